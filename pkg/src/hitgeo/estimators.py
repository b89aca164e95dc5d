"""scikit-learn style front ends.

:class:`IELEmbedding` wraps three-phase training behind ``fit`` /
``transform`` / ``predict`` and :class:`GraphPlanner` wraps coreset
selection and the four planners behind ``fit`` / ``direction``.  Both expose
``get_params`` / ``set_params`` through :class:`sklearn.base.BaseEstimator`,
so they clone and grid-search like any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cmp import Dataset, FiniteCMP
from .diffkit import NORM_EPS
from .planning import (
    all_pairs_paths,
    construct_graph,
    cost_matrix,
    dpp_greedy_coreset,
    plan_step,
    rec_mid_plan,
    shortest_paths,
    symmetric_cost_matrix,
)
from .training import PHASES, IELModel, TrainConfig, act, directed_score, train_phase

PLANNERS = ("rec_mid", "sym_graph", "asym_graph", "direct")


def check_states(states, n_states):
    """Validate an array of state indices."""
    arr = np.asarray(states)
    if arr.ndim == 0:
        arr = arr[None]
    if arr.dtype.kind not in "iu":
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError("state indices must be integers")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_states):
        raise ValueError(f"state indices must lie in [0, {n_states})")
    return arr.astype(np.int64)


class IELEmbedding(TransformerMixin, BaseEstimator):
    """Directed hitting-time embedding with a latent-conditioned policy.

    ``fit(dataset, env=env)`` runs the task, embedding and policy phases.
    ``transform(X)`` maps encoder features to latent states and
    ``predict(X, Z)`` returns greedy actions for latent directions ``Z``.
    """

    def __init__(
        self,
        gamma=0.99,
        tau_v=0.95,
        tau_h=0.5,
        beta=0.1,
        kappa=1.0,
        h_max=10,
        latent_dim=32,
        temp_nce=0.1,
        aug_sigma=0.1,
        phase_steps=(200, 4800, 5000),
        batch=256,
        lr=3e-4,
        target_tau=0.005,
        actor_temp=10.0,
        hidden=(128, 128),
        activation="gelu",
        p_future=0.7,
        geom_p=0.1,
        features="onehot",
        seed=0,
    ):
        self.gamma = gamma
        self.tau_v = tau_v
        self.tau_h = tau_h
        self.beta = beta
        self.kappa = kappa
        self.h_max = h_max
        self.latent_dim = latent_dim
        self.temp_nce = temp_nce
        self.aug_sigma = aug_sigma
        self.phase_steps = phase_steps
        self.batch = batch
        self.lr = lr
        self.target_tau = target_tau
        self.actor_temp = actor_temp
        self.hidden = hidden
        self.activation = activation
        self.p_future = p_future
        self.geom_p = geom_p
        self.features = features
        self.seed = seed

    def train_config(self):
        params = self.get_params()
        params.pop("features")
        return TrainConfig(**params)

    @classmethod
    def from_config(cls, cfg, features="onehot"):
        return cls(**{name: getattr(cfg, name) for name in TrainConfig.field_names()}, features=features)

    def fit(self, X, y=None, env=None, phases=PHASES, model=None, callback=None):
        """Train on a :class:`Dataset` ``X`` collected in ``env``.

        ``phases`` may name a prefix of the phase order; passing a partially
        trained ``model`` continues from where it stopped.
        """
        if not isinstance(X, Dataset):
            raise TypeError("IELEmbedding.fit expects a hitgeo Dataset")
        if not isinstance(env, FiniteCMP):
            raise TypeError("IELEmbedding.fit needs the generating FiniteCMP as env=")
        X.validate(env)
        cfg = self.train_config()
        if model is None:
            feats = env.features(np.arange(env.n_states), self.features)
            model = IELModel.create(feats, env.n_actions, cfg)
        self.model_ = model
        self.n_states_ = env.n_states
        self.n_features_in_ = model.feats.shape[1]
        self.losses_ = dict(getattr(self, "losses_", {}))
        for kind in phases:
            if kind in model.phases_done:
                continue
            self.losses_[kind] = train_phase(kind, model, X, cfg, callback)
        return self

    def _feats(self, X):
        check_is_fitted(self, "model_")
        return check_array(X, dtype=np.float64, ensure_min_samples=1)

    def transform(self, X):
        """Latent embeddings phi(X) for encoder-feature rows X."""
        X = self._feats(X)
        return self.model_.phi(X)

    def task_identifiers(self, X):
        X = self._feats(X)
        return self.model_.task(X)

    def predict(self, X, Z):
        """Greedy actions for features X under latent directions Z."""
        X = self._feats(X)
        Z = check_array(Z, dtype=np.float64)
        return act(self.model_.policy, X, Z, mode="greedy")

    def embed_states(self, states):
        check_is_fitted(self, "model_")
        return self.model_.embed(check_states(states, self.n_states_))

    def task_ids(self, states):
        check_is_fitted(self, "model_")
        return self.model_.task_id(check_states(states, self.n_states_))


class GraphPlanner(BaseEstimator):
    """Chooses latent directions z for a frozen :class:`IELEmbedding`.

    ``planner`` is one of ``rec_mid``, ``sym_graph``, ``asym_graph`` or
    ``direct``.  Graph planners build a DPP coreset from the candidate
    states passed to ``fit``; ``sym_graph`` precomputes all shortest paths
    once, ``asym_graph`` rebuilds its directed graph per goal and caches it.
    """

    def __init__(self, planner="asym_graph", k=10, sigma=20.0, budget=256, beta=0.1, depth=3):
        self.planner = planner
        self.k = k
        self.sigma = sigma
        self.budget = budget
        self.beta = beta
        self.depth = depth

    def fit(self, X, y=None, encoder=None):
        """``X`` holds candidate state indices (typically the dataset's states)."""
        if self.planner not in PLANNERS:
            raise ValueError(f"planner must be one of {PLANNERS}")
        check_is_fitted(encoder, "model_")
        self.encoder_ = encoder
        states = np.unique(check_states(X, encoder.n_states_))
        self.n_states_ = encoder.n_states_
        self.embeddings_ = encoder.embed_states(np.arange(encoder.n_states_))
        self.task_ids_ = encoder.task_ids(np.arange(encoder.n_states_))
        self._goal_cache = {}
        if self.planner == "direct":
            return self
        cand = self.embeddings_[states]
        self.coreset_ = dpp_greedy_coreset(cand, states, self.budget, self.sigma)
        if self.planner == "sym_graph":
            cost = symmetric_cost_matrix(self.coreset_.embeddings)
            self.graph_ = construct_graph(cost, self.k, symmetric=True)
            self.all_pred_, self.all_dist_ = all_pairs_paths(self.graph_)
        return self

    def _asym_goal(self, goal):
        if goal not in self._goal_cache:
            emb = self.coreset_.embeddings
            omega = self.task_ids_[goal]
            phi_g = self.embeddings_[goal]
            cost = cost_matrix(emb, omega, self.beta, goal)
            graph = construct_graph(cost, self.k)
            gv = int(np.argmin(directed_score(emb, np.broadcast_to(phi_g, emb.shape),
                                              np.broadcast_to(omega, emb.shape), self.beta)))
            pred, dist = shortest_paths(graph, gv)
            self._goal_cache[goal] = (gv, pred, dist, graph)
        return self._goal_cache[goal]

    def graph_for(self, goal=None):
        check_is_fitted(self, "encoder_")
        if self.planner == "sym_graph":
            return self.graph_
        if self.planner == "asym_graph":
            return self._asym_goal(int(goal))[3]
        raise ValueError(f"planner {self.planner!r} has no graph")

    def direction(self, x, goal):
        """Unit latent direction for the policy at state ``x`` heading to ``goal``."""
        check_is_fitted(self, "encoder_")
        phi_x = self.embeddings_[x]
        phi_g = self.embeddings_[goal]
        if self.planner == "direct":
            d = phi_g - phi_x
            return d / (np.linalg.norm(d) + NORM_EPS)
        emb = self.coreset_.embeddings
        if self.planner == "rec_mid":
            m = rec_mid_plan(phi_x, phi_g, emb, self.depth)
            d = emb[m] - phi_x
            if np.linalg.norm(d) < NORM_EPS:
                d = phi_g - phi_x
            return d / (np.linalg.norm(d) + NORM_EPS)
        if self.planner == "sym_graph":
            zero = np.zeros_like(phi_g)
            gv = int(np.argmin(np.linalg.norm(emb - phi_g, axis=1)))
            _, z = plan_step(emb, self.all_pred_[gv], self.all_dist_[gv], phi_x, phi_g, zero, 0.0, gv)
            return z
        gv, pred, dist, _ = self._asym_goal(int(goal))
        _, z = plan_step(emb, pred, dist, phi_x, phi_g, self.task_ids_[goal], self.beta, gv)
        return z
