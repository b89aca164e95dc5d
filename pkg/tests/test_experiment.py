import math
from pathlib import Path

import pytest

from hitgeo.errors import ConfigError, FormatError
from hitgeo.evaluation import EvalReport
from hitgeo.experiment import (
    ExperimentConfig,
    aggregate,
    build_env,
    collect_reports,
    eval_tasks,
    report_csv,
    run_experiment,
    run_seed,
    worker_count,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def tiny():
    return ExperimentConfig.load(CONFIGS / "two_state.ini")


class TestConfig:
    def test_shipped_configs_load(self):
        for path in sorted(CONFIGS.glob("*.ini")):
            ExperimentConfig.load(path)

    def test_defaults(self):
        cfg = ExperimentConfig({})
        assert cfg["train"]["beta"] == 0.1
        assert cfg.seeds == (0,)

    def test_ini_round_trip(self, tiny):
        again = ExperimentConfig.from_ini(tiny.to_ini())
        assert again.to_ini() == tiny.to_ini()
        assert again["train"]["hidden"] == (16, 16)

    @pytest.mark.parametrize(
        "override",
        [
            "train.nope=1",
            "nosection.k=1",
            "env.kind=maze",
            "env.slip=1.0",
            "planner.planners=direct,astar",
            "train.beta=-1",
            "train.beta=abc",
            "experiment.seeds=",
            "missing-equals",
        ],
    )
    def test_rejected(self, tiny, override):
        with pytest.raises(ConfigError):
            tiny.with_overrides([override])

    def test_malformed_ini(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_ini("no section header\n")

    def test_override_and_for_seed(self, tiny):
        cfg = tiny.with_overrides(["train.beta=0.5"]).for_seed(7)
        assert cfg["train"]["beta"] == 0.5 and cfg.seeds == (7,)
        assert cfg.train_config(7).seed == 7


def test_eval_tasks_distinct_and_seeded(tiny):
    env = build_env(tiny, 0)
    a = eval_tasks(env, 30, seed=1)
    assert a == eval_tasks(env, 30, seed=1)
    assert all(s != g and 0 <= s < 2 and 0 <= g < 2 for s, g in a)


def test_worker_count(monkeypatch):
    monkeypatch.setenv("HITGEO_THREADS", "4")
    assert worker_count(2) == 2
    monkeypatch.setenv("HITGEO_THREADS", "x")
    with pytest.raises(ConfigError):
        worker_count(2)


def test_aggregate_mean_std():
    rep = EvalReport()
    for seed, succ in [(0, 1), (1, 3)]:
        rep.rows.append({"planner": "direct", "seed": seed, "start": 0, "goal": 1,
                         "episodes": 4, "successes": succ, "success_rate": succ / 4, "mean_steps": 1.0})
    (row,) = aggregate(rep)
    assert row["mean"] == 0.5 and row["std"] == 0.25 and row["n_seeds"] == 2
    assert report_csv([row]).splitlines()[0] == "planner,n_seeds,mean,std,median,min,max"


class TestRuns:
    def test_run_layout_and_resume(self, tiny, tmp_path):
        rep = run_experiment(tiny, tmp_path)
        run = tmp_path / "seed-0"
        names = {p.name for p in run.iterdir()}
        assert {"config.ini", "env.json", "dataset.bin", "eval.csv", "summary.json", "timing.json",
                "ckpt-task.bin", "ckpt-embedding.bin", "ckpt-policy.bin", "losses-policy.csv"} <= names
        assert all(math.isfinite(r["success_rate"]) for r in rep.rows)

        stamps = {p.name: p.stat().st_mtime_ns for p in run.glob("ckpt-*.bin")}
        eval_text = (run / "eval.csv").read_text()
        (run / "eval.csv").unlink()
        run_seed(tiny, 0, tmp_path)
        assert {p.name: p.stat().st_mtime_ns for p in run.glob("ckpt-*.bin")} == stamps
        assert (run / "eval.csv").read_text() == eval_text

    def test_resume_mid_training(self, tiny, tmp_path):
        run_seed(tiny, 0, tmp_path / "a")
        run_seed(tiny, 0, tmp_path / "b")
        b = tmp_path / "b" / "seed-0"
        for name in ("ckpt-policy.bin", "ckpt-embedding.bin", "eval.csv"):
            (b / name).unlink()
        run_seed(tiny, 0, tmp_path / "b")
        a = tmp_path / "a" / "seed-0"
        for name in ("ckpt-policy.bin", "ckpt-embedding.bin", "eval.csv", "losses-policy.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_changed_config_refused(self, tiny, tmp_path):
        run_seed(tiny, 0, tmp_path)
        with pytest.raises(ConfigError):
            run_seed(tiny.with_overrides(["train.beta=0.7"]), 0, tmp_path)

    def test_collect_reports(self, tiny, tmp_path):
        run_experiment(tiny, tmp_path)
        rows = aggregate(collect_reports([tmp_path]))
        assert [r["planner"] for r in rows] == ["rec_mid", "sym_graph", "asym_graph", "direct"]
        with pytest.raises(FormatError):
            collect_reports([tmp_path / "seed-0" / "ckpt-task.bin"])
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError):
            collect_reports([tmp_path / "empty"])
