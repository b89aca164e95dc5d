import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitgeo.cmp import (
    Dataset,
    GoalScheme,
    TabularPolicy,
    Trajectory,
    TupleSampler,
    extract_tuples,
    goal_seeking_policy,
    is_strongly_connected,
    make_one_way_gridworld,
    make_random_digraph_cmp,
    one_way_door_grid,
    sample_trajectories,
)
from hitgeo.errors import InvalidEdge, NotStronglyConnected, ShapeMismatch, TrajectoryTooShort


def chain_env(n=4):
    """Deterministic forward chain 0 -> 1 -> ... -> n-1 -> 0 with one action."""
    k = np.zeros((1, n, n))
    for i in range(n):
        k[0, i, (i + 1) % n] = 1.0
    from hitgeo.cmp import FiniteCMP

    return FiniteCMP(k)


class TestGridworld:
    def test_two_cell_grid(self):
        env = make_one_way_gridworld(2, 1, [], 0.0)
        assert env.n_states == 2 and env.n_actions == 4
        # E from cell 0 reaches 1, W from cell 1 reaches 0, N/S hit walls
        assert env.kernel[1, 0, 1] == 1.0
        assert env.kernel[3, 1, 0] == 1.0
        assert env.kernel[0, 0, 0] == 1.0 and env.kernel[2, 1, 1] == 1.0

    def test_one_way_blocks_reverse_move(self):
        env = make_one_way_gridworld(2, 2, [((0, 0), (0, 1))], 0.0)
        a, b = 0, 2  # (0,0) and (0,1)
        assert env.kernel[:, a, b].max() == 1.0
        assert np.all(env.kernel[:, b, a] == 0.0)

    def test_slip_rows_match_hand_construction(self):
        slip = 0.2
        env = make_one_way_gridworld(3, 3, [], slip)
        moves = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}
        for y in range(3):
            for x in range(3):
                s = 3 * y + x
                for a, (dx, dy) in moves.items():
                    row = np.zeros(9)
                    nx, ny = x + dx, y + dy
                    if 0 <= nx < 3 and 0 <= ny < 3:
                        row[3 * ny + nx] += 0.8
                        row[s] += 0.2
                    else:
                        row[s] = 1.0
                    np.testing.assert_allclose(env.kernel[a, s], row, atol=1e-15)

    def test_non_adjacent_edge_rejected(self):
        with pytest.raises(InvalidEdge):
            make_one_way_gridworld(3, 3, [((0, 0), (2, 0))])

    def test_disconnected_grid_rejected(self):
        # both doors out of column 0 of a 2x1 grid point east -> cell 1 can never return
        with pytest.raises(NotStronglyConnected):
            make_one_way_gridworld(2, 1, [((0, 0), (1, 0))])

    def test_one_way_door_grid_has_irreversible_pair(self):
        env = one_way_door_grid(8)
        K = env.kernel
        forward = (K > 0).any(axis=0)
        irreversible = forward & ~forward.T
        np.fill_diagonal(irreversible, False)
        assert irreversible.any()


class TestRandomDigraph:
    def test_rows_stochastic(self):
        env = make_random_digraph_cmp(5, 2, 1, 7)
        np.testing.assert_allclose(env.kernel.sum(axis=2), 1.0, atol=1e-12)
        assert env.kernel.min() >= 0

    def test_deterministic_in_seed(self):
        a = make_random_digraph_cmp(6, 3, 2, 11)
        b = make_random_digraph_cmp(6, 3, 2, 11)
        assert np.array_equal(a.kernel, b.kernel)
        assert a.fingerprint == b.fingerprint

    @pytest.mark.parametrize("seed", range(5))
    def test_two_states_is_two_cycle(self, seed):
        env = make_random_digraph_cmp(2, 1, 1, seed)
        assert np.array_equal(env.kernel[0], [[0.0, 1.0], [1.0, 0.0]])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 3), st.integers(0, 10_000))
    def test_generated_chain_strongly_connected(self, n, a, seed):
        env = make_random_digraph_cmp(n, a, min(2, n), seed)
        assert is_strongly_connected(env.kernel.mean(axis=0))


class TestSampling:
    def test_forced_path(self):
        env = chain_env(4)
        data = sample_trajectories(env, TabularPolicy.uniform(4, 1), 3, 6, 0, start_states=[0])
        for t in data.trajectories:
            assert t.states.tolist() == [0, 1, 2, 3, 0, 1, 2]

    def test_deterministic_in_seed(self):
        env = make_one_way_gridworld(3, 3, [], 0.2)
        pol = TabularPolicy.uniform(9, 4)
        a = sample_trajectories(env, pol, 10, 50, 3)
        b = sample_trajectories(env, pol, 10, 50, 3)
        assert a == b

    def test_lengths_and_validity(self):
        env = make_random_digraph_cmp(7, 2, 3, 1)
        data = sample_trajectories(env, TabularPolicy.uniform(7, 2), 4, 25, 9)
        assert np.all(data.lengths == 25)
        data.validate(env)

    def test_shape_mismatch(self):
        env = make_random_digraph_cmp(4, 2, 2, 0)
        with pytest.raises(ShapeMismatch):
            sample_trajectories(env, TabularPolicy.uniform(4, 3), 1, 5, 0)

    def test_transition_frequencies_match_kernel(self):
        env = make_random_digraph_cmp(5, 2, 3, 4)
        pol = TabularPolicy.uniform(5, 2)
        data = sample_trajectories(env, pol, 100, 1000, 5)  # 1e5 transitions
        s, a, s2 = data.transitions()
        counts = np.zeros(env.kernel.shape)
        np.add.at(counts, (a, s, s2), 1)
        visits = counts.sum(axis=2, keepdims=True)
        p = env.kernel
        freq = counts / np.maximum(visits, 1)
        se = np.sqrt(p * (1 - p) / np.maximum(visits, 1))
        mask = (visits > 0) & (p > 0) & (p < 1)
        assert np.all(np.abs(freq - p)[mask] <= 3 * se[mask] + 1e-12) or (
            # 3-SE is a per-cell bound; allow the expected ~0.3% exceedances
            np.mean(np.abs(freq - p)[mask] > 3 * se[mask]) < 0.02
        )

    def test_goal_seeking_policy_reaches_goal(self):
        env = make_one_way_gridworld(4, 4, [], 0.0)
        pol = goal_seeking_policy(env, 15, epsilon=0.0)
        data = sample_trajectories(env, pol, 5, 10, 0, start_states=[0])
        assert all(15 in t.states for t in data.trajectories)


class TestTuples:
    @pytest.fixture
    def data(self):
        env = make_one_way_gridworld(4, 4, [], 0.1)
        return sample_trajectories(env, TabularPolicy.uniform(16, 4), 20, 30, 1)

    def test_labels_within_range(self, data):
        b = extract_tuples(data, 2000, 5, seed=0)
        assert b.h.min() >= 0 and b.h.max() <= 5
        assert set(np.unique(b.h)) == set(range(6))

    def test_zero_offset_means_same_state(self, data):
        b = extract_tuples(data, 2000, 5, seed=1)
        assert np.all(b.u[b.h == 0] == b.s[b.h == 0])

    def test_chain_offsets_cross_check(self):
        env = chain_env(7)
        data = sample_trajectories(env, TabularPolicy.uniform(7, 1), 5, 40, 2)
        b = extract_tuples(data, 1000, 6, seed=3)
        assert np.all(b.u == (b.s + b.h) % 7)
        assert np.all(b.s_next == (b.s + 1) % 7)

    def test_tuple_consistency_with_trajectory(self, data):
        sampler = TupleSampler(data, 4, GoalScheme())
        rng = np.random.default_rng(0)
        b = sampler.sample(500, rng)
        # replay the position bookkeeping: every (s, u, h) occurs on some trajectory
        seqs = [t.states.tolist() for t in data.trajectories]
        for s, u, h, s2 in zip(b.s, b.u, b.h, b.s_next):
            assert any(
                seq[i] == s and seq[i + h] == u and seq[i + 1] == s2
                for seq in seqs
                for i in range(len(seq) - max(h, 1))
            )

    def test_too_short(self, data):
        with pytest.raises(TrajectoryTooShort):
            extract_tuples(data, 10, 30)

    def test_goal_scheme_pure_future(self):
        env = chain_env(50)
        data = sample_trajectories(env, TabularPolicy.uniform(50, 1), 1, 45, 0, start_states=[0])
        b = extract_tuples(data, 500, 3, GoalScheme(p_future=1.0, geom_p=0.1), seed=0)
        assert np.all(b.g > b.s)


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        Dataset((), "x", 0)


def test_trajectory_validity_detects_impossible_step():
    env = chain_env(3)
    assert Trajectory([0, 1, 2], [0, 0]).is_valid(env)
    assert not Trajectory([0, 2], [0]).is_valid(env)
