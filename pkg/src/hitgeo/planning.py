"""Test-time planning over a coreset of latent embeddings.

Pieces: greedy DPP coreset selection, the directed edge-cost matrix,
MST-backed k-NN graph construction, Dijkstra on the reversed graph,
one-step plan execution, and the recursive-midpoint baseline.  Functions
work on plain embedding arrays; :mod:`hitgeo.estimators` binds them to
trained encoders.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffkit import NORM_EPS
from .errors import TooFewCandidates
from .training import directed_score

DPP_MIN_GAIN = 1e-12
# Graph edge costs are rounded to this dyadic grid.  Any sum of fewer than
# 2**21 / max_cost such costs is then exact in float64, so shortest-path
# distances do not depend on the order in which edges are added.
COST_QUANTUM = 2.0**-32


@dataclass(frozen=True, eq=False)
class Coreset:
    members: np.ndarray
    embeddings: np.ndarray
    kernel_sigma: float

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True, eq=False)
class CostMatrix:
    c: np.ndarray
    goal: int | None
    beta: float


@dataclass(frozen=True, eq=False)
class PlanGraph:
    """Directed weighted graph stored as parallel edge arrays.

    ``src -> dst`` with ``cost``.  When ``reversed`` is true every edge has
    been flipped so that single-source shortest paths from the goal give
    forward costs-to-goal.
    """

    n: int
    src: np.ndarray
    dst: np.ndarray
    cost: np.ndarray
    mst_edges: tuple
    k: int
    reversed: bool = True

    def flipped(self):
        return PlanGraph(self.n, self.dst, self.src, self.cost, self.mst_edges, self.k, not self.reversed)

    def forward_edges(self):
        g = self.flipped() if self.reversed else self
        return g.src, g.dst, g.cost

    def adjacency_lists(self):
        adj = [[] for _ in range(self.n)]
        for a, b, c in zip(self.src.tolist(), self.dst.tolist(), self.cost.tolist()):
            adj[a].append((b, c))
        return adj

    def dense(self):
        """Cost matrix of this graph's edges, +inf where there is no edge."""
        m = np.full((self.n, self.n), np.inf)
        m[self.src, self.dst] = self.cost
        np.fill_diagonal(m, np.minimum(np.diag(m), 0.0))
        return m

    def dump(self, path):
        """Write forward edges as ``src dst cost`` lines (cost in repr precision)."""
        src, dst, cost = self.forward_edges()
        lines = ["# src dst cost"]
        lines += [f"{a} {b} {c!r}" for a, b, c in zip(src.tolist(), dst.tolist(), cost.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return Path(path)


@dataclass(frozen=True)
class PlanResult:
    next_vertex: int | None
    path_cost: float
    localized_vertex: int
    goal_vertex: int


# ---------------------------------------------------------------- coreset


def gaussian_kernel(emb, sigma):
    sq = np.sum(emb**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.exp(-d2 / (2.0 * sigma**2))


def dpp_greedy_coreset(embeddings, state_ids, budget, sigma):
    """Greedy MAP inference for a DPP with a Gaussian kernel on the embeddings.

    Each round adds the candidate with the largest log-determinant gain,
    maintained through an incremental Cholesky factor.  Selection stops at
    ``budget`` or once the best determinant ratio falls below 1e-12, so
    exact duplicates are never picked while distinct candidates remain.
    Ties go to the lowest candidate index.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(state_ids)
    if budget < 2:
        raise ValueError("budget must be >= 2")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    n = emb.shape[0]
    if n < 2:
        raise TooFewCandidates("need at least two candidates")
    selected = _greedy_dpp(gaussian_kernel(emb, sigma), budget)
    if len(selected) < 2:
        raise TooFewCandidates("fewer than two distinct candidate embeddings")
    sel = np.asarray(selected)
    return Coreset(ids[sel], emb[sel], float(sigma))


def _greedy_dpp(K, budget):
    n = K.shape[0]
    budget = min(budget, n)
    cis = np.zeros((budget, n))
    gains = np.diag(K).copy()
    chosen = np.zeros(n, dtype=bool)
    selected = []
    while len(selected) < budget:
        masked = np.where(chosen, -np.inf, gains)
        j = int(np.argmax(masked))
        if masked[j] < DPP_MIN_GAIN:
            break
        k = len(selected)
        e = (K[j] - cis[:k, j] @ cis[:k]) / np.sqrt(gains[j])
        cis[k] = e
        gains = gains - e**2
        chosen[j] = True
        selected.append(j)
    return selected


def log_det(K, subset):
    sub = K[np.ix_(subset, subset)]
    sign, val = np.linalg.slogdet(sub)
    return val if sign > 0 else -np.inf


# ---------------------------------------------------------------- costs and graphs


def cost_matrix(embeddings, omega_g, beta, goal=None):
    """c[i, j] = directed_score(emb_i, emb_j, omega_g, beta), zero diagonal."""
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    src = np.repeat(emb, n, axis=0)
    dst = np.tile(emb, (n, 1))
    w = np.broadcast_to(np.asarray(omega_g, dtype=np.float64), src.shape)
    c = directed_score(src, dst, w, beta).reshape(n, n)
    np.fill_diagonal(c, 0.0)
    return CostMatrix(c, goal, float(beta))


def symmetric_cost_matrix(embeddings):
    emb = np.asarray(embeddings, dtype=np.float64)
    diff = emb[:, None, :] - emb[None, :, :]
    c = np.linalg.norm(diff, axis=2)
    np.fill_diagonal(c, 0.0)
    return CostMatrix(c, None, 0.0)


def minimum_spanning_tree(w):
    """Prim's algorithm on a dense symmetric weight matrix.

    Returns edges ``(parent, child)``; ties are broken by lowest index so the
    tree is deterministic.  Zero weights are ordinary edges.
    """
    n = w.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1)
    best[0] = 0.0
    edges = []
    for _ in range(n):
        cand = np.where(in_tree, np.inf, best)
        v = int(np.argmin(cand))
        in_tree[v] = True
        if parent[v] >= 0:
            edges.append((int(parent[v]), v))
        better = ~in_tree & (w[v] < best)
        best[better] = w[v][better]
        parent[better] = v
    return edges


def keep_top_k(c, k):
    """Per row, the k smallest off-diagonal costs (stable order)."""
    n = c.shape[0]
    k = min(k, n - 1)
    off = c.copy()
    np.fill_diagonal(off, np.inf)
    order = np.argsort(off, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    return rows, order.ravel()


def construct_graph(cost, k, symmetric=False):
    """Sparse directed planning graph, returned edge-reversed.

    MST on (c + c^T)/2 forms the backbone, each vertex keeps its k cheapest
    outgoing edges, and every MST edge is inserted in both directions with
    its own directed cost.  ``symmetric=True`` additionally mirrors every
    kept edge, giving the undirected graph of the goal-agnostic variant.
    Edge costs are rounded to multiples of :data:`COST_QUANTUM`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    c = np.asarray(cost.c if isinstance(cost, CostMatrix) else cost, dtype=np.float64)
    n = c.shape[0]
    mst = minimum_spanning_tree((c + c.T) / 2.0)
    keep = np.zeros((n, n), dtype=bool)
    rows, cols = keep_top_k(c, k)
    keep[rows, cols] = True
    for a, b in mst:
        keep[a, b] = True
        keep[b, a] = True
    if symmetric:
        keep |= keep.T
    np.fill_diagonal(keep, False)
    src, dst = np.nonzero(keep)
    cost = np.round(c[src, dst] / COST_QUANTUM) * COST_QUANTUM
    fwd = PlanGraph(n, src, dst, cost, tuple(mst), int(k), reversed=False)
    return fwd.flipped()


def shortest_paths(graph, source):
    """Dijkstra from ``source`` with a binary heap.

    On a reversed planning graph, ``dist[v]`` is the forward cost from v to
    the source and ``pred[v]`` the next vertex on that path (-1 if none).
    Heap entries are ``(dist, vertex)`` so equal distances resolve to the
    lowest vertex index.
    """
    n = graph.n
    adj = graph.adjacency_lists()
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    dist[source] = 0.0
    heap = [(0.0, int(source))]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for w, c in adj[v]:
            nd = d + c
            if nd < dist[w]:
                dist[w] = nd
                pred[w] = v
                heapq.heappush(heap, (nd, w))
    return pred, dist


def all_pairs_paths(graph):
    """Dijkstra from every vertex; ``dist[t, v]`` is the cost from v to t."""
    preds, dists = zip(*(shortest_paths(graph, t) for t in range(graph.n)))
    return np.stack(preds), np.stack(dists)


# ---------------------------------------------------------------- online planning


def _unit(v):
    return v / (np.linalg.norm(v) + NORM_EPS)


def plan_step(coreset_emb, pred, dist, phi_x, phi_g, omega_g, beta, goal_vertex=None):
    """One planning decision from the current embedding ``phi_x``.

    ``pred``/``dist`` come from :func:`shortest_paths` rooted at the goal
    vertex.  Returns ``(PlanResult, z)`` where ``z`` is the unit direction
    toward the next waypoint, or toward the goal itself when the agent is
    localized at the goal vertex or no path exists.
    """
    emb = np.asarray(coreset_emb, dtype=np.float64)
    n = emb.shape[0]
    w = np.broadcast_to(omega_g, emb.shape)
    if goal_vertex is None:
        goal_vertex = int(np.argmin(directed_score(emb, np.broadcast_to(phi_g, emb.shape), w, beta)))
    curr = int(np.argmin(directed_score(np.broadcast_to(phi_x, emb.shape), emb, w, beta)))
    nxt = int(pred[curr]) if pred[curr] >= 0 else None
    if nxt is not None and curr != goal_vertex:
        target = emb[nxt]
    else:
        target = phi_g
    z = _unit(np.asarray(target) - np.asarray(phi_x))
    result = PlanResult(nxt, float(dist[curr]), curr, int(goal_vertex))
    return result, z


def rec_mid_plan(phi_x, phi_g, pool_emb, depth=3):
    """Recursive midpoint subgoal under the symmetric latent distance.

    Each level picks m minimizing max(||m - x||, ||g - m||) over the pool,
    then recurses on (x, m).  Returns the pool index of the innermost
    subgoal.  Recursion stops early when the midpoint collapses onto x,
    which would otherwise yield a zero direction.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    pool = np.asarray(pool_emb, dtype=np.float64)
    x = np.asarray(phi_x, dtype=np.float64)
    target = np.asarray(phi_g, dtype=np.float64)
    to_x = np.linalg.norm(pool - x, axis=1)
    best = None
    for _ in range(depth):
        legs = np.maximum(to_x, np.linalg.norm(target - pool, axis=1))
        m = int(np.argmin(legs))
        if best is not None and to_x[m] < NORM_EPS:
            break
        best = m
        target = pool[m]
    return best
