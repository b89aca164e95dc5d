import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hitgeo.cmp import TabularPolicy, make_one_way_gridworld, one_way_door_grid, sample_trajectories
from hitgeo.estimators import PLANNERS, GraphPlanner, IELEmbedding, check_states
from hitgeo.evaluation import EvalReport, evaluate, rollout

SMALL = dict(hidden=(16,), latent_dim=4, batch=32, h_max=4, lr=1e-3, phase_steps=(50, 300, 500))


@pytest.fixture(scope="module")
def two_state():
    env = make_one_way_gridworld(2, 1, [], 0.0)
    data = sample_trajectories(env, TabularPolicy.uniform(2, 4), 30, 20, 0)
    est = IELEmbedding(**{**SMALL, "phase_steps": (50, 300, 2000)}).fit(data, env=env)
    return env, data, est


@pytest.fixture(scope="module")
def grid():
    env = one_way_door_grid(4, 0.0)
    data = sample_trajectories(env, TabularPolicy.uniform(16, 4), 40, 30, 0)
    est = IELEmbedding(**SMALL, beta=1.0).fit(data, env=env)
    return env, data, est


def test_check_states():
    np.testing.assert_array_equal(check_states([0, 2.0], 3), [0, 2])
    with pytest.raises(ValueError):
        check_states([3], 3)
    with pytest.raises(ValueError):
        check_states([0.5], 3)


class TestIELEmbedding:
    def test_params_round_trip(self):
        est = IELEmbedding(beta=0.3, hidden=(8,))
        assert est.get_params()["beta"] == 0.3
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert est.train_config().beta == 0.3

    def test_from_config(self):
        est = IELEmbedding(gamma=0.9, seed=4)
        again = IELEmbedding.from_config(est.train_config())
        assert again.get_params() == est.get_params()

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            IELEmbedding().transform(np.eye(2))

    def test_fit_input_checks(self, two_state):
        env, data, _ = two_state
        with pytest.raises(TypeError):
            IELEmbedding().fit(np.zeros((3, 2)), env=env)
        with pytest.raises(TypeError):
            IELEmbedding().fit(data)

    def test_transform_and_predict(self, two_state):
        env, _, est = two_state
        Z = est.transform(np.eye(2))
        assert Z.shape == (2, 4)
        np.testing.assert_array_equal(Z, est.embed_states([0, 1]))
        acts = est.predict(np.eye(2), np.tile(Z[1] - Z[0], (2, 1)))
        assert acts.shape == (2,)
        assert est.task_identifiers(np.eye(2)).shape == (2, 4)

    def test_losses_recorded(self, two_state):
        _, _, est = two_state
        assert set(est.losses_) == {"task", "embedding", "policy"}
        assert len(est.losses_["embedding"]) == 300

    def test_partial_then_resume(self):
        env = make_one_way_gridworld(2, 1, [], 0.0)
        data = sample_trajectories(env, TabularPolicy.uniform(2, 4), 10, 10, 0)
        est = IELEmbedding(**SMALL).fit(data, env=env, phases=("task",))
        assert est.model_.phases_done == ["task"]
        est.fit(data, env=env, model=est.model_)
        assert est.model_.phases_done == ["task", "embedding", "policy"]


class TestGraphPlanner:
    def test_bad_planner(self, grid):
        _, data, est = grid
        with pytest.raises(ValueError):
            GraphPlanner(planner="nope").fit(data.all_states(), encoder=est)

    @pytest.mark.parametrize("name", PLANNERS)
    def test_directions_are_unit(self, grid, name):
        env, data, est = grid
        gp = GraphPlanner(planner=name, beta=est.beta).fit(data.all_states(), encoder=est)
        for x, g in [(0, 15), (12, 3), (5, 5)]:
            z = gp.direction(x, g)
            assert z.shape == (4,)
            assert np.linalg.norm(z) == pytest.approx(1.0, abs=1e-9) or np.linalg.norm(z) == 0.0

    def test_graph_access(self, grid):
        _, data, est = grid
        sym = GraphPlanner(planner="sym_graph").fit(data.all_states(), encoder=est)
        asym = GraphPlanner(planner="asym_graph", beta=est.beta).fit(data.all_states(), encoder=est)
        assert sym.graph_for() is sym.graph_
        assert asym.graph_for(3) is asym.graph_for(3)  # cached per goal
        assert asym.graph_for(3) is not asym.graph_for(4)
        with pytest.raises(ValueError):
            GraphPlanner(planner="direct").fit(data.all_states(), encoder=est).graph_for(0)

    def test_beta_zero_asym_equals_sym_costs(self, grid):
        _, data, est = grid
        sym = GraphPlanner(planner="sym_graph").fit(data.all_states(), encoder=est)
        asym = GraphPlanner(planner="asym_graph", beta=0.0).fit(data.all_states(), encoder=est)
        a = asym.graph_for(5).flipped()
        np.testing.assert_allclose(a.dense()[np.isfinite(a.dense())], sym.graph_.flipped().dense()[np.isfinite(a.dense())], atol=1e-12)


class TestEvaluate:
    def test_direct_two_state_succeeds(self, two_state):
        env, data, est = two_state
        gp = GraphPlanner(planner="direct").fit(data.all_states(), encoder=est)
        rep = evaluate(env, est, gp, [(0, 1), (1, 0)], 5, 10, seed=0)
        assert rep.success_rate() == 1.0

    def test_zero_steps(self, two_state):
        env, data, est = two_state
        gp = GraphPlanner(planner="direct").fit(data.all_states(), encoder=est)
        rng = np.random.default_rng(0)
        assert rollout(env, est, gp, 0, 1, 0, rng) == (False, 0)
        assert rollout(env, est, gp, 1, 1, 0, rng) == (True, 0)

    def test_deterministic_and_csv_round_trip(self, grid):
        env, data, est = grid
        gp = GraphPlanner(planner="asym_graph", beta=est.beta).fit(data.all_states(), encoder=est)
        a = evaluate(env, est, gp, [(0, 15), 7], 2, 30, seed=3, mode="sample")
        b = evaluate(env, est, gp, [(0, 15), 7], 2, 30, seed=3, mode="sample")
        assert a.to_csv() == b.to_csv()
        assert EvalReport.from_csv(a.to_csv()).to_csv() == a.to_csv()
        assert all(0.0 <= r["success_rate"] <= 1.0 for r in a.rows)
        assert a.rows[1]["start"] == -1
