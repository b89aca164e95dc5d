import csv
import io
from pathlib import Path

import pytest

from hitgeo.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "two_state.ini"


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2
    assert main([]) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nbetta = 0.1\n")
    assert main(["gen-env", "--config", str(cfg), "--out", str(tmp_path / "e.json")]) == 2
    assert main(["gen-env", "--override", "env.kind=maze", "--out", str(tmp_path / "e.json")]) == 2


def test_missing_file_is_io_error(tmp_path):
    assert main(["collect", "--env", str(tmp_path / "missing.json")]) == 4


def test_unknown_suite(tmp_path):
    assert main(["verify", "--suites", "poisson,nope"]) == 2


def test_verify_writes_csv(tmp_path):
    out = tmp_path / "v.csv"
    assert main(["verify", "--suites", "isomorphism", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert rows and all(r["passed"] == "True" for r in rows)


def _pipeline(tmp_path, capsys):
    c = ["--config", str(CONFIG)]
    env, data, ckpt = tmp_path / "env.json", tmp_path / "data.txt", tmp_path / "ckpt"
    assert main(["gen-env", *c, "--out", str(env)]) == 0
    assert main(["collect", *c, "--env", str(env), "--out", str(data)]) == 0
    assert main(["train", *c, "--env", str(env), "--data", str(data), "--out", str(ckpt)]) == 0
    trained = ["--env", str(env), "--data", str(data), "--ckpt", str(ckpt)]
    assert main(["plan", *c, *trained, "--goal", "1", "--out", str(tmp_path / "g.txt")]) == 0
    assert main(["plan", *c, *trained, "--goal", "5"]) == 2
    assert main(["eval", *c, *trained, "--out", str(tmp_path / "eval.csv")]) == 0
    assert main(["eval", *c, *trained, "--planner", "direct"]) == 0
    direct = capsys.readouterr().out
    return ckpt, direct


def test_pipeline(tmp_path, capsys):
    ckpt, direct = _pipeline(tmp_path, capsys)
    assert {"ckpt-task.bin", "ckpt-embedding.bin", "ckpt-policy.bin"} <= {p.name for p in ckpt.iterdir()}
    assert (tmp_path / "g.txt").read_text().strip()
    planners = {r["planner"] for r in csv.DictReader(io.StringIO(direct))}
    assert planners == {"direct"}

    assert main(["report", str(tmp_path / "eval.csv")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["planner"] for r in rows] == ["rec_mid", "sym_graph", "asym_graph", "direct"]
    assert all("mean" in r and "std" in r for r in rows)


def test_train_is_reproducible(tmp_path, capsys):
    a, _ = _pipeline(tmp_path / "a", capsys)
    b, _ = _pipeline(tmp_path / "b", capsys)
    for name in ("ckpt-task.bin", "ckpt-embedding.bin", "ckpt-policy.bin", "losses-policy.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()


def test_run_and_report(tmp_path, capsys):
    assert main(["run", "--config", str(CONFIG), "--out", str(tmp_path)]) == 0
    first = capsys.readouterr().out
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text() == first


@pytest.mark.parametrize("args", [["report", "nowhere.csv"], ["eval", "--env", "x", "--data", "y", "--ckpt", "z"]])
def test_io_errors(tmp_path, args, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(args) == 4
