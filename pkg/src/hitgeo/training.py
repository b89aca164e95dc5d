"""Three-phase training of the task encoder, state encoder and latent policy.

Phase ``task`` fits the task encoder with an InfoNCE objective on noisy
views of replay states.  Phase ``embedding`` freezes it and fits the state
encoder with an expectile TD loss on the directed score plus an expectile
regression of discounted in-trajectory step counts.  Phase ``policy``
freezes the state encoder and fits a latent-direction-conditioned policy by
advantage-weighted regression on the intrinsic reward
``<phi(x') - phi(x), z>``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from ._rng import substream
from .cmp import GoalScheme, TupleSampler, categorical
from .diffkit import (
    NORM_EPS,
    DenseNet,
    OptimizerState,
    opt_step,
    unit_rows,
    unit_rows_backward,
)
from .errors import FrozenViolation, NotFrozen, PhaseOrderViolation

PHASES = ("task", "embedding", "policy")
AWR_CLIP = 100.0


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    tau_v: float = 0.95
    tau_h: float = 0.5
    beta: float = 0.1
    kappa: float = 1.0
    h_max: int = 10
    latent_dim: int = 32
    temp_nce: float = 0.1
    aug_sigma: float = 0.1
    phase_steps: tuple = (200, 4800, 5000)
    batch: int = 256
    lr: float = 3e-4
    target_tau: float = 0.005
    actor_temp: float = 10.0
    hidden: tuple = (128, 128)
    activation: str = "gelu"
    p_future: float = 0.7
    geom_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phase_steps", tuple(int(v) for v in self.phase_steps))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        checks = [
            (0 < self.gamma < 1, "gamma must lie in (0, 1)"),
            (0 < self.tau_v < 1, "tau_v must lie in (0, 1)"),
            (0 < self.tau_h < 1, "tau_h must lie in (0, 1)"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.kappa >= 0, "kappa must be >= 0"),
            (self.h_max >= 1, "h_max must be >= 1"),
            (self.latent_dim >= 1, "latent_dim must be >= 1"),
            (self.temp_nce > 0, "temp_nce must be > 0"),
            (self.aug_sigma >= 0, "aug_sigma must be >= 0"),
            (len(self.phase_steps) == 3 and min(self.phase_steps) >= 0, "phase_steps needs three counts"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (0 < self.target_tau <= 1, "target_tau must lie in (0, 1]"),
            (self.actor_temp > 0, "actor_temp must be > 0"),
            (self.activation in ("relu", "gelu"), "activation must be relu or gelu"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def goal_scheme(self):
        return GoalScheme(self.p_future, self.geom_p)

    def replace(self, **kw):
        return replace(self, **kw)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class TaskEncoder:
    def __init__(self, net):
        self.net = net

    def __call__(self, feats):
        return self.net.forward(feats, record=False)


class StateEncoder:
    """Online encoder plus a Polyak-averaged target copy."""

    def __init__(self, net, target_net=None):
        self.net = net
        self.target_net = target_net if target_net is not None else net.copy().freeze()

    def __call__(self, feats):
        return self.net.forward(feats, record=False)

    def target(self, feats):
        return self.target_net.forward(feats, record=False)


class LatentPolicy:
    def __init__(self, net, n_actions):
        self.net = net
        self.n_actions = n_actions

    def logits(self, feats, z):
        return self.net.forward(np.concatenate([feats, z], axis=-1), record=False)


@dataclass
class LossBreakdown:
    td_term: float
    hit_term: float
    total: float
    mean_cos: float
    mean_distance: float


# ---------------------------------------------------------------- scores


def directed_score(phi_s, phi_t, omega_g, beta):
    """||phi_t - phi_s|| * exp(beta * (1 - cos xi)), row-wise.

    ``cos xi`` is the cosine between the displacement and ``omega_g`` with
    both norms stabilized by +1e-12.
    """
    delta = np.asarray(phi_t, dtype=np.float64) - np.asarray(phi_s, dtype=np.float64)
    unit_w, _ = unit_rows(np.asarray(omega_g, dtype=np.float64))
    d, _, _ = _score(delta, unit_w, beta)
    return d


def _score(delta, unit_w, beta):
    r = np.linalg.norm(delta, axis=-1)
    cos = np.sum(delta * unit_w, axis=-1) / (r + NORM_EPS)
    e = np.exp(beta * (1.0 - cos))
    return r * e, r, cos


def _score_grad(delta, unit_w, beta):
    """Score and its gradient with respect to the displacement."""
    d, r, cos = _score(delta, unit_w, beta)
    e = np.exp(beta * (1.0 - cos))
    rr = r[:, None]
    dr = np.where(rr > 0, delta / np.where(rr > 0, rr, 1.0), 0.0)
    denom = rr + NORM_EPS
    dcos = unit_w / denom - (cos[:, None] / denom) * dr
    grad = e[:, None] * dr - beta * (r * e)[:, None] * dcos
    return d, grad, cos


def expectile_weight(residual, tau):
    """|tau - 1(residual < 0)|."""
    return np.abs(tau - (np.asarray(residual) < 0).astype(np.float64))


def discounted_steps(h, gamma):
    """(1 - gamma^h) / (1 - gamma): discounted count of h unit costs."""
    return (1.0 - gamma ** np.asarray(h, dtype=np.float64)) / (1.0 - gamma)


# ---------------------------------------------------------------- losses


def info_nce(z, z_aug, temp):
    """InfoNCE over row-normalized embeddings; returns loss and grads for both views."""
    n = z.shape[0]
    zh, nz = unit_rows(z)
    zah, nza = unit_rows(z_aug)
    S = zh @ zah.T / temp
    m = S.max(axis=1, keepdims=True)
    ex = np.exp(S - m)
    lse = m[:, 0] + np.log(ex.sum(axis=1))
    loss = float(np.mean(lse - np.diag(S)))
    dS = ex / ex.sum(axis=1, keepdims=True)
    dS[np.arange(n), np.arange(n)] -= 1.0
    dS /= n
    g_zh = dS @ zah / temp
    g_zah = dS.T @ zh / temp
    return loss, unit_rows_backward(z, nz, g_zh), unit_rows_backward(z_aug, nza, g_zah)


def nce_loss(enc, goals, temp_nce, aug_sigma, seed=0, rng=None):
    """InfoNCE loss of the task encoder on ``goals`` and Gaussian-noised views.

    Returns ``(loss, grads)`` with ``grads`` aligned to ``enc.net.params``.
    """
    rng = rng if rng is not None else substream(seed, "nce-aug")
    goals = np.asarray(goals, dtype=np.float64)
    n = goals.shape[0]
    noisy = goals + aug_sigma * rng.standard_normal(goals.shape)
    out = enc.net.forward(np.concatenate([goals, noisy]))
    loss, gz, gza = info_nce(out[:n], out[n:], temp_nce)
    grads, _ = enc.net.backward(np.concatenate([gz, gza]))
    return loss, grads


def emb_loss(phi, task, batch, cfg, feats):
    """Expectile TD + hitting-time regression loss of the state encoder.

    ``feats`` maps state index -> encoder input row.  Gradients flow only
    into ``phi.net``; the Bellman target uses the target network and is
    treated as a constant.
    """
    if task.net.requires_grad:
        raise FrozenViolation("task encoder must be frozen during embedding learning")
    n = len(batch)
    g, s, u, s2 = batch.g, batch.s, batch.u, batch.s_next
    omega = task(feats[g])
    unit_w, _ = unit_rows(omega)

    tgt = phi.target(feats[np.concatenate([g, s2])])
    d_next, _, _ = _score(tgt[:n] - tgt[n:], unit_w, cfg.beta)
    target = np.where(s == g, 0.0, 1.0 + cfg.gamma * d_next)

    out = phi.net.forward(feats[np.concatenate([g, s, u])])
    pg, ps, pu = out[:n], out[n : 2 * n], out[2 * n :]
    d, d_grad, cos = _score_grad(pg - ps, unit_w, cfg.beta)
    delta = target - d
    w = expectile_weight(delta, cfg.tau_v)
    ell = discounted_steps(batch.h, cfg.gamma) - np.sum((pu - ps) * unit_w, axis=1)
    w2 = expectile_weight(ell, cfg.tau_h)

    td = w * delta**2
    hit = cfg.kappa * w2 * ell**2
    total = float(np.mean(td + hit))

    g_d = -2.0 * w * delta / n
    g_delta = g_d[:, None] * d_grad
    g_ell = (2.0 * cfg.kappa * w2 * ell / n)[:, None] * unit_w
    upstream = np.concatenate([g_delta, -g_delta + g_ell, -g_ell])
    grads, _ = phi.net.backward(upstream)
    report = LossBreakdown(
        td_term=float(np.mean(td)),
        hit_term=float(np.mean(hit)),
        total=total,
        mean_cos=float(np.mean(cos)),
        mean_distance=float(np.mean(d)),
    )
    return report, grads


def policy_loss(policy, phi, s_feats, actions, s2_feats, z, cfg):
    """Advantage-weighted behavior regression on the intrinsic reward.

    A = r_z(s, s') + gamma * V_z(s') - V_z(s) with r_z = <phi(s') - phi(s), z>
    and V_z(x) = <phi(x), z>; weights exp(actor_temp * A) are clipped at 100.
    Returns ``(loss, grads, weights)``.
    """
    if phi.net.requires_grad:
        raise NotFrozen("state encoder must be frozen during policy learning")
    n = len(actions)
    ps = phi(s_feats)
    ps2 = phi(s2_feats)
    v_s = np.sum(ps * z, axis=1)
    v_s2 = np.sum(ps2 * z, axis=1)
    adv = (v_s2 - v_s) + cfg.gamma * v_s2 - v_s
    weights = np.exp(np.minimum(cfg.actor_temp * adv, np.log(AWR_CLIP)))
    logits = policy.net.forward(np.concatenate([s_feats, z], axis=1))
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    denom = ex.sum(axis=1, keepdims=True)
    logp = logits - m - np.log(denom)
    idx = np.arange(n)
    loss = float(-np.mean(weights * logp[idx, actions]))
    g = ex / denom
    g[idx, actions] -= 1.0
    g *= (weights / n)[:, None]
    grads, _ = policy.net.backward(g)
    return loss, grads, weights


def act(policy, x, z, mode="greedy", rng=None):
    """Pick an action for one state (or a batch); greedy ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = x.ndim == 1
    x2, z2 = np.atleast_2d(x), np.atleast_2d(z)
    z2, _ = unit_rows(z2)
    logits = policy.logits(x2, z2)
    if mode == "greedy":
        a = np.argmax(logits, axis=1)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        a = categorical(rng, p / p.sum(axis=1, keepdims=True))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return int(a[0]) if single else a


def sample_unit_sphere(rng, n, dim):
    z = rng.standard_normal((n, dim))
    return z / (np.linalg.norm(z, axis=1, keepdims=True) + NORM_EPS)


# ---------------------------------------------------------------- model and phases


@dataclass
class IELModel:
    """All networks of one training run plus their optimizer states."""

    task: TaskEncoder
    phi: StateEncoder
    policy: LatentPolicy
    feats: np.ndarray
    optimizers: dict = field(default_factory=dict)
    phases_done: list = field(default_factory=list)

    @classmethod
    def create(cls, feats, n_actions, cfg):
        feats = np.asarray(feats, dtype=np.float64)
        f = feats.shape[1]
        dims = (f, *cfg.hidden, cfg.latent_dim)

        def seed_for(name):
            return int(substream(cfg.seed, "net", name).integers(2**31))

        task = TaskEncoder(DenseNet(dims, cfg.activation, seed_for("task")))
        phi = StateEncoder(DenseNet(dims, cfg.activation, seed_for("phi")))
        pol_dims = (f + cfg.latent_dim, *cfg.hidden, n_actions)
        policy = LatentPolicy(DenseNet(pol_dims, cfg.activation, seed_for("policy")), n_actions)
        opts = {name: OptimizerState(cfg.lr) for name in ("task", "phi", "policy")}
        return cls(task, phi, policy, feats, opts, [])

    def nets(self):
        return {
            "task": self.task.net,
            "phi": self.phi.net,
            "phi_target": self.phi.target_net,
            "policy": self.policy.net,
        }

    def embed(self, states):
        return self.phi(self.feats[np.asarray(states)])

    def task_id(self, states):
        return self.task(self.feats[np.asarray(states)])


def _check_order(model, kind):
    if kind not in PHASES:
        raise ValueError(f"unknown phase {kind!r}")
    expected = PHASES[len(model.phases_done)] if len(model.phases_done) < 3 else None
    if kind != expected:
        raise PhaseOrderViolation(
            f"phase {kind!r} requested but completed phases are {model.phases_done}"
        )


def train_phase(kind, model, data, cfg, callback=None):
    """Run one training phase in place and return its per-step loss rows.

    Each row is a dict with keys step, td_term, hit_term, nce, policy and
    wall_ms (NaN for channels the phase does not use).  The phase's
    networks are frozen once it finishes.
    """
    _check_order(model, kind)
    steps = cfg.phase_steps[PHASES.index(kind)]
    rng = substream(cfg.seed, "train", kind)
    rows = []
    nan = float("nan")
    feats = model.feats

    if kind == "task":
        sampler = TupleSampler(data, cfg.h_max, cfg.goal_scheme)
        opt = model.optimizers["task"]
        for step in range(steps):
            t0 = time.perf_counter()
            b = sampler.sample(cfg.batch, rng)
            states = np.concatenate([b.g, b.u, b.s])
            loss, grads = nce_loss(model.task, feats[states], cfg.temp_nce, cfg.aug_sigma, rng=rng)
            opt_step(opt, model.task.net.params, grads)
            rows.append(_row(step, nan, nan, loss, nan, t0))
        model.task.net.freeze()

    elif kind == "embedding":
        sampler = TupleSampler(data, cfg.h_max, cfg.goal_scheme)
        opt = model.optimizers["phi"]
        for step in range(steps):
            t0 = time.perf_counter()
            b = sampler.sample(cfg.batch, rng)
            report, grads = emb_loss(model.phi, model.task, b, cfg, feats)
            opt_step(opt, model.phi.net.params, grads)
            model.phi.target_net.polyak_update(model.phi.net, cfg.target_tau)
            rows.append(_row(step, report.td_term, report.hit_term, nan, nan, t0))
        model.phi.net.freeze()

    else:
        s_all, a_all, s2_all = data.transitions()
        opt = model.optimizers["policy"]
        for step in range(steps):
            t0 = time.perf_counter()
            idx = rng.integers(len(s_all), size=cfg.batch)
            z = sample_unit_sphere(rng, cfg.batch, cfg.latent_dim)
            loss, grads, _ = policy_loss(
                model.policy, model.phi, feats[s_all[idx]], a_all[idx], feats[s2_all[idx]], z, cfg
            )
            opt_step(opt, model.policy.net.params, grads)
            rows.append(_row(step, nan, nan, nan, loss, t0))
        model.policy.net.freeze()

    model.phases_done.append(kind)
    if callback is not None:
        callback(kind, rows)
    return rows


def _row(step, td, hit, nce, pol, t0):
    return {
        "step": step,
        "td_term": td,
        "hit_term": hit,
        "nce": nce,
        "policy": pol,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
