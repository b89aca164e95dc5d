"""Finite controlled Markov processes, behavior policies and offline data.

A :class:`FiniteCMP` is a tabular transition kernel without rewards.  The
generators here build directed (irreversible) environments, sample offline
trajectories from a behavior policy, and cut those trajectories into the
relabeled ``(s, u, h, s_next, g)`` tuples consumed by embedding training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from ._rng import substream
from .errors import (
    GenerationFailed,
    InvalidEdge,
    NotStronglyConnected,
    ShapeMismatch,
    TrajectoryTooShort,
)

ROW_TOL = 1e-12

# (dx, dy) per action; state index = y * width + x
GRID_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
GRID_ACTION_NAMES = ("N", "E", "S", "W")


def _check_stochastic(mat, what):
    mat = np.asarray(mat, dtype=np.float64)
    if np.any(mat < 0) or not np.all(np.isfinite(mat)):
        raise ValueError(f"{what} has negative or non-finite entries")
    if np.max(np.abs(mat.sum(axis=-1) - 1.0)) > ROW_TOL:
        raise ValueError(f"{what} rows do not sum to 1")
    return mat


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64, order="C")
    arr.flags.writeable = False
    return arr


def is_strongly_connected(adjacency):
    """True when the directed graph with ``adjacency > 0`` is strongly connected."""
    n_comp, _ = connected_components(
        csr_matrix(np.asarray(adjacency) > 0), directed=True, connection="strong"
    )
    return n_comp == 1


@dataclass(frozen=True, eq=False)
class FiniteCMP:
    """Tabular controlled Markov process.

    ``kernel[a, x, x']`` is the probability of moving from ``x`` to ``x'``
    under action ``a``.
    """

    kernel: np.ndarray
    coords: np.ndarray | None = None
    tag: str = "custom"

    def __post_init__(self):
        kernel = _check_stochastic(self.kernel, "kernel")
        if kernel.ndim != 3 or kernel.shape[1] != kernel.shape[2]:
            raise ShapeMismatch(f"kernel must be (A, n, n), got {kernel.shape}")
        if kernel.shape[0] < 1 or kernel.shape[1] < 2:
            raise ValueError("need n_states >= 2 and n_actions >= 1")
        object.__setattr__(self, "kernel", _frozen(kernel))
        if self.coords is not None:
            coords = _frozen(self.coords)
            if coords.shape[0] != kernel.shape[1]:
                raise ShapeMismatch("coords must have one row per state")
            object.__setattr__(self, "coords", coords)

    @property
    def n_states(self):
        return self.kernel.shape[1]

    @property
    def n_actions(self):
        return self.kernel.shape[0]

    @property
    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.asarray(self.kernel.shape, dtype=np.int64).tobytes())
        h.update(self.kernel.tobytes())
        return h.hexdigest()[:16]

    def features(self, states, kind="onehot"):
        """Encoder input features for an array of state indices."""
        states = np.asarray(states, dtype=np.int64)
        if kind == "onehot":
            return np.eye(self.n_states)[states]
        if kind == "coords":
            if self.coords is None:
                raise ValueError("environment has no coordinates")
            return np.asarray(self.coords)[states]
        raise ValueError(f"unknown feature kind {kind!r}")

    def feature_dim(self, kind="onehot"):
        if kind == "onehot":
            return self.n_states
        return self.coords.shape[1]


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        probs = _check_stochastic(self.probs, "policy")
        if probs.ndim != 2:
            raise ShapeMismatch("policy must be (n_states, n_actions)")
        object.__setattr__(self, "probs", _frozen(probs))

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=np.int64)
        return cls(np.eye(n_actions)[actions])

    def check_env(self, env):
        if self.probs.shape != (env.n_states, env.n_actions):
            raise ShapeMismatch(
                f"policy shape {self.probs.shape} does not match env "
                f"({env.n_states}, {env.n_actions})"
            )


def goal_seeking_policy(env, goal, epsilon=0.2, max_iter=10_000):
    """Epsilon-greedy policy that heads for ``goal``.

    Greedy actions minimize expected steps-to-goal, computed by value
    iteration on the stochastic shortest-path problem.
    """
    n = env.n_states
    v = np.zeros(n)
    for _ in range(max_iter):
        q = 1.0 + env.kernel @ v  # (A, n)
        q[:, goal] = 0.0
        new = q.min(axis=0)
        if np.max(np.abs(new - v)) < 1e-10:
            v = new
            break
        v = new
    q = 1.0 + env.kernel @ v
    greedy = np.argmin(q, axis=0)
    probs = np.full((n, env.n_actions), epsilon / env.n_actions)
    probs[np.arange(n), greedy] += 1.0 - epsilon
    return TabularPolicy(probs)


def make_one_way_gridworld(width, height, one_way_edges=(), slip=0.0):
    """Four-action (N/E/S/W) gridworld with one-way doors.

    Cells are ``(x, y)`` pairs.  An edge ``(a, b)`` keeps the move a->b and
    blocks b->a.  Moves off the grid or through a blocked door leave the
    agent in place; with probability ``slip`` every move stays in place.
    """
    if width * height < 2:
        raise ValueError("grid needs at least two cells")
    if not 0.0 <= slip < 1.0:
        raise ValueError("slip must lie in [0, 1)")
    n = width * height
    blocked = set()
    for a, b in one_way_edges:
        (ax, ay), (bx, by) = a, b
        inside = all(0 <= c < w for c, w in ((ax, width), (bx, width), (ay, height), (by, height)))
        if not inside or abs(ax - bx) + abs(ay - by) != 1:
            raise InvalidEdge(f"one-way edge {a}->{b} does not join adjacent cells")
        blocked.add(((bx, by), (ax, ay)))

    kernel = np.zeros((4, n, n))
    coords = np.zeros((n, 2))
    for y in range(height):
        for x in range(width):
            s = y * width + x
            coords[s] = (x, y)
            for a, (dx, dy) in enumerate(GRID_MOVES):
                nx, ny = x + dx, y + dy
                ok = 0 <= nx < width and 0 <= ny < height and ((x, y), (nx, ny)) not in blocked
                if ok:
                    kernel[a, s, ny * width + nx] += 1.0 - slip
                    kernel[a, s, s] += slip
                else:
                    kernel[a, s, s] += 1.0
    if not is_strongly_connected(kernel.mean(axis=0)):
        raise NotStronglyConnected("gridworld is not strongly connected under the uniform policy")
    return FiniteCMP(kernel, coords=coords, tag=f"grid{width}x{height}")


def one_way_door_grid(size=8, slip=0.1):
    """Gridworld split by a horizontal wall of one-way doors.

    Between rows ``size//2 - 1`` and ``size//2`` every column can only be
    crossed downward (increasing y), except the last column, which is open
    both ways.  Reaching the upper half from the lower half therefore
    requires a detour through that column.
    """
    mid = size // 2
    edges = [((x, mid - 1), (x, mid)) for x in range(size - 1)]
    env = make_one_way_gridworld(size, size, edges, slip)
    return FiniteCMP(env.kernel, coords=env.coords, tag=f"oneway{size}")


def make_random_digraph_cmp(n_states, n_actions, out_degree, seed, max_tries=1000):
    """Random CMP whose support graph is strongly connected.

    Each (state, action) pair moves to ``out_degree`` distinct successors
    drawn uniformly; with more than one successor the probabilities come
    from a flat Dirichlet.  Candidates are rejection-sampled until the
    uniform-policy chain is strongly connected.
    """
    if n_states < 2 or n_actions < 1:
        raise ValueError("need n_states >= 2 and n_actions >= 1")
    if not 1 <= out_degree <= n_states:
        raise ValueError("out_degree must lie in [1, n_states]")
    rng = substream(seed, "digraph-cmp")
    for _ in range(max_tries):
        kernel = np.zeros((n_actions, n_states, n_states))
        for a in range(n_actions):
            for x in range(n_states):
                succ = rng.choice(n_states, size=out_degree, replace=False)
                w = rng.dirichlet(np.ones(out_degree)) if out_degree > 1 else np.ones(1)
                kernel[a, x, succ] = w
        if is_strongly_connected(kernel.sum(axis=0)):
            return FiniteCMP(kernel, tag="digraph")
    raise GenerationFailed(f"no strongly connected CMP after {max_tries} tries")


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        if len(actions) != len(states) - 1:
            raise ShapeMismatch("a trajectory needs exactly len(states) - 1 actions")
        states.flags.writeable = False
        actions.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    def __len__(self):
        return len(self.actions)

    def is_valid(self, env):
        s, a = self.states, self.actions
        if len(s) == 0 or s.min() < 0 or s.max() >= env.n_states:
            return False
        if len(a) and (a.min() < 0 or a.max() >= env.n_actions):
            return False
        return bool(np.all(env.kernel[a, s[:-1], s[1:]] > 0))


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple
    env_fingerprint: str
    seed: int

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a dataset needs at least one trajectory")
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    def validate(self, env):
        if env.fingerprint != self.env_fingerprint:
            raise ShapeMismatch("dataset was generated by a different environment")
        bad = [i for i, t in enumerate(self.trajectories) if not t.is_valid(env)]
        if bad:
            raise ValueError(f"trajectories {bad[:5]} are inconsistent with the kernel")

    @property
    def lengths(self):
        return np.array([len(t) for t in self.trajectories], dtype=np.int64)

    def all_states(self):
        return np.concatenate([t.states for t in self.trajectories])

    def transitions(self):
        """Flat ``(s, a, s_next)`` arrays over every stored step."""
        s = np.concatenate([t.states[:-1] for t in self.trajectories])
        a = np.concatenate([t.actions for t in self.trajectories])
        s2 = np.concatenate([t.states[1:] for t in self.trajectories])
        return s, a, s2

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.env_fingerprint == other.env_fingerprint
            and self.seed == other.seed
            and len(self.trajectories) == len(other.trajectories)
            and all(
                np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
                for a, b in zip(self.trajectories, other.trajectories)
            )
        )


def categorical(rng, probs):
    """One draw per row of ``probs``; zero-probability entries are never picked."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cum[:, -1]
    return np.argmax(cum > u[:, None], axis=1)


def sample_trajectories(env, policy, n, length, seed, start_states=None):
    """Roll out ``n`` trajectories of exactly ``length`` transitions.

    ``policy`` is a :class:`TabularPolicy` or a sequence of them; in the
    latter case each trajectory picks one policy uniformly at random, which
    is how goal-seeking datasets with varied goals are produced.
    """
    policies = list(policy) if isinstance(policy, (list, tuple)) else [policy]
    for p in policies:
        p.check_env(env)
    rng = substream(seed, "collect")
    if start_states is None:
        x = rng.integers(env.n_states, size=n)
    else:
        x = np.resize(np.asarray(start_states, dtype=np.int64), n)
    which = rng.integers(len(policies), size=n)
    table = np.stack([p.probs for p in policies])  # (P, n_states, A)
    states = np.empty((n, length + 1), dtype=np.int64)
    actions = np.empty((n, length), dtype=np.int64)
    states[:, 0] = x
    for t in range(length):
        a = categorical(rng, table[which, x])
        x = categorical(rng, env.kernel[a, x])
        actions[:, t] = a
        states[:, t + 1] = x
    trajs = tuple(Trajectory(states[i], actions[i]) for i in range(n))
    return Dataset(trajs, env.fingerprint, int(seed))


@dataclass(frozen=True)
class GoalScheme:
    """Hindsight goal relabeling: future state on the same trajectory or a random one."""

    p_future: float = 0.7
    geom_p: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.p_future <= 1.0 or not 0.0 < self.geom_p <= 1.0:
            raise ValueError("invalid goal scheme weights")


@dataclass(frozen=True)
class TupleBatch:
    s: np.ndarray
    u: np.ndarray
    h: np.ndarray
    s_next: np.ndarray
    g: np.ndarray
    a: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return len(self.s)


class TupleSampler:
    """Draws :class:`TupleBatch` objects from a dataset with a fixed scheme.

    The flattened index is built once so that repeated batches during
    training stay cheap.
    """

    def __init__(self, data, h_max, goal_scheme=GoalScheme()):
        if h_max < 1:
            raise ValueError("h_max must be >= 1")
        lengths = data.lengths
        if np.any(lengths <= h_max):
            raise TrajectoryTooShort(
                f"every trajectory must be longer than h_max={h_max}; shortest is {lengths.min()}"
            )
        self.h_max = int(h_max)
        self.scheme = goal_scheme
        self.lengths = lengths
        self.offsets = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]])
        self.flat_states = data.all_states()
        self.flat_actions = np.concatenate(
            [np.append(t.actions, -1) for t in data.trajectories]
        )

    def sample(self, batch, rng):
        lengths = self.lengths
        traj = rng.integers(len(lengths), size=batch)
        L = lengths[traj]
        h = rng.integers(self.h_max + 1, size=batch)
        t_max = np.where(h == 0, L - 1, L - h)
        t = (rng.random(batch) * (t_max + 1)).astype(np.int64)
        base = self.offsets[traj]
        s_idx = base + t
        future = rng.random(batch) < self.scheme.p_future
        k = rng.geometric(self.scheme.geom_p, size=batch)
        g_future = base + np.minimum(t + k, L)
        g_random = rng.integers(len(self.flat_states), size=batch)
        g_idx = np.where(future, g_future, g_random)
        fs = self.flat_states
        return TupleBatch(
            s=fs[s_idx],
            u=fs[s_idx + h],
            h=h,
            s_next=fs[s_idx + 1],
            g=fs[g_idx],
            a=self.flat_actions[s_idx],
        )


def extract_tuples(data, batch, h_max, goal_scheme=GoalScheme(), seed=0):
    """Sample ``batch`` relabeled tuples ``(s, u, h, s_next, g)`` from ``data``."""
    return TupleSampler(data, h_max, goal_scheme).sample(batch, substream(seed, "tuples"))
