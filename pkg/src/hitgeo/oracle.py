"""Exact linear-algebra ground truth for hitting-time geometry.

Everything here is dense float64 linear algebra on the policy-induced chain.
These routines serve as oracles for the learned components and as numerical
checks of the representation results (linear hitting-time readout, linear
identifiability of displacements, and the effective-horizon error bound).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._rng import substream
from .cmp import is_strongly_connected
from .errors import GoalUnreachable, RankDeficientWarning, ShapeMismatch

MAX_STATES = 4096
SINGULAR_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class MarkovChain:
    P: np.ndarray

    @property
    def n(self):
        return self.P.shape[0]


@dataclass(frozen=True, eq=False)
class HittingTable:
    v: np.ndarray
    goal: int

    def bellman_residual(self, chain):
        """Max over transient states of |v(x) - 1 - sum_x' P(x, x') v(x')|."""
        res = self.v - 1.0 - chain.P @ self.v
        res[self.goal] = 0.0
        return float(np.max(np.abs(res)))


@dataclass(frozen=True, eq=False)
class TransientOperator:
    P_Q: np.ndarray
    goal: int
    rho: float


@dataclass(frozen=True, eq=False)
class Representer:
    omega: np.ndarray
    goal: int

    def readout(self, phi=None):
        """Hitting-time readout <phi(goal) - phi(x), omega> for every state x."""
        if phi is None:
            phi = np.eye(len(self.omega))
        return (phi[self.goal] - phi) @ self.omega


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    sup_error: float
    bound: float
    c_h: float
    rho: float
    omega_norm: float

    @property
    def passed(self):
        return self.sup_error <= self.bound + 1e-9


def induce_chain(env, policy):
    """P[x, x'] = sum_a policy[x, a] * kernel[a, x, x']."""
    policy.check_env(env)
    P = np.einsum("xa,axy->xy", policy.probs, env.kernel)
    return MarkovChain(P)


def _transient_index(n, goal):
    if not 0 <= goal < n:
        raise ShapeMismatch(f"goal {goal} outside [0, {n})")
    return np.delete(np.arange(n), goal)


def _check_reachable(chain, goal):
    # goal reachable from x  <=>  x reachable from goal in the reversed support graph
    support = chain.P > 0
    seen = np.zeros(chain.n, dtype=bool)
    seen[goal] = True
    frontier = [goal]
    while frontier:
        nxt = np.flatnonzero(support[:, frontier].any(axis=1) & ~seen)
        seen[nxt] = True
        frontier = nxt.tolist()
    if not seen.all():
        raise GoalUnreachable(f"goal {goal} unreachable from states {np.flatnonzero(~seen)[:10]}")


def _lu_solve(A, b, goal):
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    if np.min(np.abs(np.diag(lu))) < SINGULAR_TOL:
        raise GoalUnreachable(f"I - P_Q is singular for goal {goal}")
    return scipy.linalg.lu_solve((lu, piv), b)


def solve_hitting_times(chain, goal):
    """Expected hitting times of ``goal`` from the Poisson equation (I - P_Q) v_Q = 1."""
    n = chain.n
    if n > MAX_STATES:
        raise ValueError(f"oracle is capped at {MAX_STATES} states")
    idx = _transient_index(n, goal)
    _check_reachable(chain, goal)
    P_Q = chain.P[np.ix_(idx, idx)]
    v = np.zeros(n)
    v[idx] = _lu_solve(np.eye(n - 1) - P_Q, np.ones(n - 1), goal)
    return HittingTable(v, goal)


def spectral_radius(M, tol=1e-10, max_iter=100_000):
    """Spectral radius of a nonnegative matrix.

    Power iteration from the all-ones vector, stopped once the
    Collatz-Wielandt bounds min_i (Mx)_i / x_i <= rho <= max_i (Mx)_i / x_i
    agree to relative ``tol``.  Entries of x that reach zero belong to a
    nilpotent block that cannot carry rho, so the ratios skip them; an
    iterate that vanishes entirely means rho = 0.  Without convergence
    inside ``max_iter`` the dense eigenvalue moduli are used instead.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return 0.0
    x = np.ones(M.shape[0])
    for _ in range(max_iter):
        y = M @ x
        norm = np.max(np.abs(y))
        if norm == 0.0:
            return 0.0
        pos = x > 0
        if not pos.any():
            break
        ratios = y[pos] / x[pos]
        lo, hi = ratios.min(), ratios.max()
        if hi - lo <= tol * hi:
            return float(hi)
        x = y / norm
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def transient_operator(chain, goal, tol=1e-10, max_iter=100_000):
    """Kill the chain at ``goal``: delete its row and column."""
    idx = _transient_index(chain.n, goal)
    P_Q = chain.P[np.ix_(idx, idx)]
    return TransientOperator(P_Q, goal, spectral_radius(P_Q, tol, max_iter))


def solve_representer(chain, goal, check_tol=1e-8):
    """Exact representer for one-hot features.

    With phi(x) = e_x the latent transition operator is T = P^T, and the
    representer solves the adjoint system (T_Q - I)^T omega_Q = 1 on the
    transient span, with the gauge omega[goal] = 0.  The readout
    <e_goal - e_x, omega> is checked against the Poisson solution.
    """
    n = chain.n
    idx = _transient_index(n, goal)
    _check_reachable(chain, goal)
    T_Q = chain.P.T[np.ix_(idx, idx)]
    omega = np.zeros(n)
    omega[idx] = _lu_solve((T_Q - np.eye(n - 1)).T, np.ones(n - 1), goal)
    rep = Representer(omega, goal)
    table = solve_hitting_times(chain, goal)
    err = np.max(np.abs(rep.readout() - table.v))
    if err > check_tol * max(1.0, np.max(table.v)):
        raise ArithmeticError(f"representer readout disagrees with Poisson solution by {err:.3e}")
    return rep


def resolvent_inf_norm(P_Q):
    """||(I - P_Q)^{-1}||_inf, the max absolute row sum of the resolvent."""
    m = P_Q.shape[0]
    R = scipy.linalg.solve(np.eye(m) - P_Q, np.eye(m))
    return float(np.max(np.abs(R).sum(axis=1)))


def verify_error_bound(chain, goal, epsilon, trials=10, seed=0):
    """Check sup|V - V_hat| <= C_H ||omega|| eps / (1 - rho) under random perturbations.

    Each trial adds to every column of the one-hot transient latent operator
    T_Q = P_Q^T a random vector of Euclidean norm ``epsilon`` (a one-step
    latent error of exactly epsilon at every transient state), solves the
    perturbed adjoint system for omega_hat, and compares the readout with
    the exact hitting times.  ``omega`` in the bound is the representer of
    the perturbed operator, i.e. the one the readout is built from.
    C_H = ||(I - P_Q)^{-1}||_inf (1 - rho), so the bound's horizon factor is
    computed exactly.  Trials whose perturbed system is singular are
    redrawn.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    table = solve_hitting_times(chain, goal)
    op = transient_operator(chain, goal)
    rho = op.rho
    res_norm = resolvent_inf_norm(op.P_Q)
    c_h = res_norm * (1.0 - rho)
    m = op.P_Q.shape[0]
    idx = _transient_index(chain.n, goal)
    v_Q = table.v[idx]
    T_Q = op.P_Q.T
    rng = substream(seed, "bound", goal)

    worst = BoundReport(float(epsilon), 0.0, 0.0, c_h, rho, 0.0)
    worst_gap = -np.inf
    done = 0
    attempts = 0
    while done < max(trials, 1):
        attempts += 1
        if attempts > 100 * max(trials, 1):
            raise GoalUnreachable("perturbed adjoint systems kept coming out singular")
        if epsilon == 0:
            E = np.zeros((m, m))
        else:
            E = rng.standard_normal((m, m))
            E *= epsilon / np.linalg.norm(E, axis=0)
        A = (T_Q + E - np.eye(m)).T
        try:
            lu, piv = scipy.linalg.lu_factor(-A)
        except (ValueError, np.linalg.LinAlgError):
            continue
        if np.min(np.abs(np.diag(lu))) < SINGULAR_TOL:
            continue
        v_hat = scipy.linalg.lu_solve((lu, piv), np.ones(m))
        omega_hat = -v_hat
        sup_err = float(np.max(np.abs(v_hat - v_Q)))
        omega_norm = float(np.linalg.norm(omega_hat))
        bound = c_h * omega_norm * epsilon / (1.0 - rho) if rho < 1 else np.inf
        report = BoundReport(float(epsilon), sup_err, float(bound), c_h, rho, omega_norm)
        if sup_err - bound > worst_gap:
            worst_gap = sup_err - bound
            worst = report
        done += 1
    if not worst.passed:
        raise AssertionError(
            f"bound violated: sup_error={worst.sup_error:.6e} > bound={worst.bound:.6e}"
        )
    return worst


def _embed(phi, states):
    if callable(phi):
        return np.asarray([np.asarray(phi(s), dtype=np.float64) for s in states])
    return np.asarray(phi, dtype=np.float64)[np.asarray(states)]


def fit_displacement_map(phi_a, phi_b, x0, states):
    """Least-squares linear map carrying phi_a displacements onto phi_b ones.

    ``phi_a``/``phi_b`` are callables state -> vector or arrays indexed by
    state.  Returns ``(M, relative_residual)`` where M minimizes
    sum_g ||M (phi_a(g) - phi_a(x0)) - (phi_b(g) - phi_b(x0))||^2 and the
    residual is normalized by sum_g ||phi_b(g) - phi_b(x0)||^2.  A
    degenerate phi_a displacement span is reported with a warning.
    """
    states = list(states)
    A = _embed(phi_a, states) - _embed(phi_a, [x0])[0]
    B = _embed(phi_b, states) - _embed(phi_b, [x0])[0]
    if len(states) < B.shape[1]:
        raise ValueError("need at least as many states as phi_b dimensions")
    sol, _, rank, _ = np.linalg.lstsq(A, B, rcond=None)
    if rank < A.shape[1]:
        warnings.warn(
            f"phi_a displacement span has rank {rank} < {A.shape[1]}", RankDeficientWarning
        )
    M = sol.T
    denom = float(np.sum(B**2))
    resid = float(np.sum((A @ sol - B) ** 2))
    rel = resid / denom if denom > 0 else 0.0
    return M, rel


def check_sufficient_capacity(env, policy, phi):
    """Largest one-step latent error of the best linear latent transition operator.

    Fits T by least squares on pairs (phi(x), E[phi(x') | x]) and returns
    max_x ||E[phi(x') | x] - T phi(x)||.  Feature maps whose displacement
    span is degenerate get a warning, since their readouts cannot separate
    states.
    """
    chain = induce_chain(env, policy)
    Phi = _embed(phi, range(env.n_states))
    Y = chain.P @ Phi
    sol, _, _, _ = np.linalg.lstsq(Phi, Y, rcond=None)
    resid = Y - Phi @ sol
    disp = Phi - Phi[0]
    if np.linalg.matrix_rank(disp) == 0:
        warnings.warn("feature map collapses every state to one point", RankDeficientWarning)
    return float(np.max(np.linalg.norm(resid, axis=1)))


def strongly_connected_chain(chain):
    return is_strongly_connected(chain.P)
