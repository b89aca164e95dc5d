"""Self-checking numerical suites over random chains.

Each suite returns a list of row dicts with the keys in :data:`FIELDS`;
``passed`` is False on any genuine numerical violation.  The suites back
the ``verify`` CLI subcommand and the acceptance tests.
"""

from __future__ import annotations

import csv
import io

import numpy as np
import scipy.linalg

from ._rng import substream
from .cmp import TabularPolicy, make_random_digraph_cmp
from .oracle import (
    fit_displacement_map,
    induce_chain,
    solve_hitting_times,
    solve_representer,
    verify_error_bound,
)

FIELDS = ("suite", "chain_id", "n_states", "goal", "epsilon", "error", "threshold", "passed")
SUITES = ("poisson", "representer", "isomorphism", "bound")

BELLMAN_TOL = 1e-9
READOUT_TOL = 1e-8
ISO_TOL = 1e-8
ISO_FLOOR = 0.1
BOUND_SLACK = 1e-9
EPSILONS = (1e-3, 1e-2, 1e-1)


def random_chain(seed, chain_id, max_n=50, n_actions=2):
    """Uniform-policy chain on a random strongly connected digraph CMP."""
    rng = substream(seed, "chain", chain_id)
    n = int(rng.integers(2, max_n + 1))
    env = make_random_digraph_cmp(n, n_actions, min(2, n), int(rng.integers(2**31)))
    return induce_chain(env, TabularPolicy.uniform(n, n_actions)), env


def _row(suite, cid, n, goal, eps, err, thr, ok):
    return {
        "suite": suite,
        "chain_id": int(cid),
        "n_states": int(n),
        "goal": int(goal),
        "epsilon": float(eps),
        "error": float(err),
        "threshold": float(thr),
        "passed": bool(ok),
    }


def mc_hitting_mean(chain, start, goal, episodes, seed):
    """Monte Carlo mean and standard error of the hitting time of ``goal``."""
    rng = substream(seed, "mc", start, goal)
    cum = np.cumsum(chain.P, axis=1)
    cum[:, -1] = 1.0
    x = np.full(episodes, start, dtype=np.int64)
    t = np.zeros(episodes, dtype=np.int64)
    alive = x != goal
    while alive.any():
        idx = np.flatnonzero(alive)
        u = rng.random(idx.size)
        x[idx] = np.argmax(cum[x[idx]] > u[:, None], axis=1)
        t[idx] += 1
        alive[idx] = x[idx] != goal
    return float(t.mean()), float(t.std(ddof=1) / np.sqrt(episodes))


def poisson_suite(n_chains=50, max_n=50, mc_chains=3, mc_episodes=100_000, seed=0):
    """Bellman residuals of the Poisson solve, plus Monte Carlo agreement.

    For every chain and goal the residual row has ``error`` = max Bellman
    residual.  The first ``mc_chains`` chains also get a row comparing the
    Monte Carlo mean from state 0 to goal n-1 with the solve, where
    ``error`` is the deviation in standard errors (threshold 3).
    """
    rows = []
    for cid in range(n_chains):
        chain, _ = random_chain(seed, cid, max_n)
        n = chain.n
        for goal in range(n):
            table = solve_hitting_times(chain, goal)
            res = float(np.max(table.bellman_residual(chain)))
            rows.append(_row("poisson", cid, n, goal, 0.0, res, BELLMAN_TOL, res < BELLMAN_TOL))
        if cid < mc_chains:
            goal = n - 1
            exact = solve_hitting_times(chain, goal).v[0]
            mean, se = mc_hitting_mean(chain, 0, goal, mc_episodes, seed)
            z = abs(mean - exact) / se if se > 0 else abs(mean - exact)
            rows.append(_row("poisson-mc", cid, n, goal, 0.0, z, 3.0, z <= 3.0))
    return rows


def representer_suite(n_chains=20, max_n=30, seed=0):
    """max |<e_g - e_x, omega_g> - V(x, g)| over all pairs, one-hot features."""
    rows = []
    for cid in range(n_chains):
        chain, _ = random_chain(seed + 1, cid, max_n)
        worst, worst_goal = 0.0, 0
        for goal in range(chain.n):
            rep = solve_representer(chain, goal, check_tol=np.inf)
            err = float(np.max(np.abs(rep.readout() - solve_hitting_times(chain, goal).v)))
            if err >= worst:
                worst, worst_goal = err, goal
        rows.append(_row("representer", cid, chain.n, worst_goal, 0.0, worst, READOUT_TOL, worst < READOUT_TOL))
    return rows


def isomorphism_floor(n_pairs=100, n_states=10, dim=4, seed=0):
    """Smallest displacement-fit residual between independent random maps."""
    res = []
    for i in range(n_pairs):
        rng = substream(seed, "iso-floor", i)
        a = rng.standard_normal((n_states, dim))
        b = rng.standard_normal((n_states, dim))
        res.append(fit_displacement_map(a, b, 0, range(n_states))[1])
    return float(np.min(res))


def isomorphism_suite(n_cases=20, n_states=10, dim=4, seed=0):
    """Rotated copies fit exactly; independent pairs stay above the floor."""
    rows = []
    for cid in range(n_cases):
        rng = substream(seed, "iso", cid)
        a = rng.standard_normal((n_states, dim))
        Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        _, rel = fit_displacement_map(a, a @ Q.T, 0, range(n_states))
        rows.append(_row("isomorphism", cid, n_states, 0, 0.0, rel, ISO_TOL, rel < ISO_TOL))
    floor = isomorphism_floor(seed=seed)
    rows.append(_row("isomorphism-floor", -1, n_states, 0, 0.0, floor, ISO_FLOOR, floor > ISO_FLOOR))
    return rows


def bound_suite(n_chains=100, max_n=30, epsilons=EPSILONS, trials=10, seed=0):
    """Perturbation bound check; one row per (chain, epsilon) at a random goal."""
    rows = []
    for cid in range(n_chains):
        chain, _ = random_chain(seed + 2, cid, max_n)
        goal = int(substream(seed, "bound-goal", cid).integers(chain.n))
        for eps in epsilons:
            try:
                rep = verify_error_bound(chain, goal, eps, trials=trials, seed=seed + cid)
            except AssertionError:
                rep = None
            if rep is None:
                rows.append(_row("bound", cid, chain.n, goal, eps, np.inf, np.nan, False))
            else:
                rows.append(_row("bound", cid, chain.n, goal, eps, rep.sup_error, rep.bound + BOUND_SLACK, rep.passed))
    return rows


def run_suites(names=SUITES, seed=0, **kw):
    table = {
        "poisson": poisson_suite,
        "representer": representer_suite,
        "isomorphism": isomorphism_suite,
        "bound": bound_suite,
    }
    rows = []
    for name in names:
        if name not in table:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
        rows.extend(table[name](seed=seed, **kw.get(name, {})))
    return rows


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def lstsq_normal_equations(Phi, Y):
    """Second least-squares route (Cholesky on the normal equations)."""
    G = Phi.T @ Phi
    c, low = scipy.linalg.cho_factor(G)
    return scipy.linalg.cho_solve((c, low), Phi.T @ Y)
