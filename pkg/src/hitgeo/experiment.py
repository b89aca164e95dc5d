"""Experiment configuration and the gen-env -> collect -> train -> eval pipeline.

Configs are INI files with sections ``experiment``, ``env``, ``dataset``,
``train``, ``planner`` and ``eval``.  Unknown sections or keys are errors.
Every seed gets its own run directory::

    seed-<s>/config.ini        snapshot with seeds = <s>
    seed-<s>/env.json
    seed-<s>/dataset.bin
    seed-<s>/ckpt-<phase>.bin  one per finished training phase
    seed-<s>/losses-<phase>.csv
    seed-<s>/eval.csv
    seed-<s>/summary.json
    seed-<s>/timing.json       wall-clock only; excluded from determinism checks

Re-running skips whatever already exists, so an interrupted run resumes
from its last finished phase.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import time

import numpy as np

from ._rng import substream
from .cmp import (
    TabularPolicy,
    make_one_way_gridworld,
    make_random_digraph_cmp,
    one_way_door_grid,
    sample_trajectories,
)
from .diffkit import load_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError
from .estimators import PLANNERS, GraphPlanner, IELEmbedding
from .evaluation import EvalReport, evaluate
from .io import load_dataset, load_env, save_dataset, save_env
from .training import PHASES, IELModel, TrainConfig

FORMAT_VERSION = 1
ENV_KINDS = ("door_grid", "gridworld", "random_digraph")


def _ints(text):
    return tuple(int(v) for v in _split(text))


def _strs(text):
    return tuple(_split(text))


def _split(text):
    return [v.strip() for v in str(text).replace(";", ",").split(",") if v.strip()]


_TRAIN_TYPES = {
    f: (_ints if f in ("phase_steps", "hidden") else int if f in ("h_max", "latent_dim", "batch", "seed") else str if f == "activation" else float)
    for f in TrainConfig.field_names()
}

SCHEMA = {
    "experiment": {"seeds": (_ints, (0,)), "out": (str, "runs")},
    "env": {
        "kind": (str, "door_grid"),
        "size": (int, 8),
        "slip": (float, 0.1),
        "width": (int, 2),
        "height": (int, 1),
        "n_states": (int, 10),
        "n_actions": (int, 2),
        "out_degree": (int, 2),
    },
    "dataset": {"trajectories": (int, 500), "length": (int, 100)},
    "train": {**{f: (_TRAIN_TYPES[f], getattr(TrainConfig, f)) for f in TrainConfig.field_names() if f != "seed"},
              "features": (str, "onehot")},
    "planner": {
        "planners": (_strs, PLANNERS),
        "k": (int, 10),
        "sigma": (float, 20.0),
        "budget": (int, 256),
        "depth": (int, 3),
    },
    "eval": {"tasks": (int, 20), "episodes": (int, 3), "max_steps": (int, 100), "mode": (str, "greedy")},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings, one dict per config section."""

    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {}
        for sec, keys in SCHEMA.items():
            given = dict(self.sections.get(sec, {}))
            merged[sec] = {}
            for key, (conv, default) in keys.items():
                raw = given.pop(key, default)
                try:
                    merged[sec][key] = conv(raw) if isinstance(raw, str) else raw
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}") from None
            if given:
                raise ConfigError(f"unknown key(s) in [{sec}]: {sorted(given)}")
        extra = set(self.sections) - set(SCHEMA)
        if extra:
            raise ConfigError(f"unknown section(s): {sorted(extra)}")
        object.__setattr__(self, "sections", merged)
        self._validate()

    def _validate(self):
        env, ds, pl, ev = self["env"], self["dataset"], self["planner"], self["eval"]
        if env["kind"] not in ENV_KINDS:
            raise ConfigError(f"[env] kind must be one of {ENV_KINDS}")
        if not 0 <= env["slip"] < 1:
            raise ConfigError("[env] slip must lie in [0, 1)")
        if ds["trajectories"] < 1 or ds["length"] < 1:
            raise ConfigError("[dataset] trajectories and length must be >= 1")
        bad = set(pl["planners"]) - set(PLANNERS)
        if bad:
            raise ConfigError(f"[planner] unknown planner(s) {sorted(bad)}")
        if pl["k"] < 1 or pl["budget"] < 2 or pl["sigma"] <= 0 or pl["depth"] < 1:
            raise ConfigError("[planner] needs k >= 1, budget >= 2, sigma > 0, depth >= 1")
        if ev["tasks"] < 1 or ev["episodes"] < 0 or ev["max_steps"] < 0:
            raise ConfigError("[eval] tasks >= 1, episodes >= 0, max_steps >= 0")
        if ev["mode"] not in ("greedy", "sample"):
            raise ConfigError("[eval] mode must be greedy or sample")
        if not self["experiment"]["seeds"]:
            raise ConfigError("[experiment] seeds must list at least one seed")
        try:
            self.train_config(0)
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from None

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def seeds(self):
        return self["experiment"]["seeds"]

    def train_config(self, seed):
        kw = {k: v for k, v in self["train"].items() if k != "features"}
        return TrainConfig(**kw, seed=int(seed))

    def with_overrides(self, overrides):
        """Apply ``section.key=value`` strings and revalidate."""
        sections = {s: dict(v) for s, v in self.sections.items()}
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not section.key=value")
            lhs, value = item.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
            sections.setdefault(sec, {})[key] = value.strip()
        return ExperimentConfig(sections)

    def for_seed(self, seed):
        return self.with_overrides([f"experiment.seeds={int(seed)}"])

    def to_ini(self):
        parser = configparser.ConfigParser(interpolation=None)
        for sec, keys in self.sections.items():
            parser[sec] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        return cls({sec: dict(parser[sec]) for sec in parser.sections()})

    @classmethod
    def load(cls, path):
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- stages


def build_env(cfg, seed):
    e = cfg["env"]
    if e["kind"] == "door_grid":
        return one_way_door_grid(e["size"], e["slip"])
    if e["kind"] == "gridworld":
        return make_one_way_gridworld(e["width"], e["height"], (), e["slip"])
    env_seed = int(substream(seed, "env").integers(2**31))
    return make_random_digraph_cmp(e["n_states"], e["n_actions"], e["out_degree"], env_seed)


def collect(cfg, env, seed):
    d = cfg["dataset"]
    policy = TabularPolicy.uniform(env.n_states, env.n_actions)
    return sample_trajectories(env, policy, d["trajectories"], d["length"], seed)


def restore_model(path, feats, n_actions, tcfg):
    """Rebuild an :class:`IELModel` from a phase checkpoint."""
    nets, opts, meta = load_checkpoint(path)
    model = IELModel.create(feats, n_actions, tcfg)
    model.task.net = nets["task"]
    model.phi.net = nets["phi"]
    model.phi.target_net = nets["phi_target"]
    model.policy.net = nets["policy"]
    model.optimizers.update(opts)
    model.phases_done = list(meta["phases_done"])
    return model


def train(cfg, env, data, run_dir, seed, log=None):
    """Train phase by phase, checkpointing after each; resumes from the last one."""
    run_dir = Path(run_dir)
    tcfg = cfg.train_config(seed)
    est = IELEmbedding.from_config(tcfg, features=cfg["train"]["features"])
    feats = env.features(np.arange(env.n_states), est.features)
    model = None
    for phase in reversed(PHASES):
        ckpt = run_dir / f"ckpt-{phase}.bin"
        if ckpt.exists():
            model = restore_model(ckpt, feats, env.n_actions, tcfg)
            break
    timing = {}
    for i, phase in enumerate(PHASES):
        if model is not None and phase in model.phases_done:
            continue
        t0 = time.perf_counter()
        est.fit(data, env=env, phases=PHASES[: i + 1], model=model)
        model = est.model_
        timing[phase] = time.perf_counter() - t0
        save_checkpoint(
            run_dir / f"ckpt-{phase}.bin",
            model.nets(),
            model.optimizers,
            {"phases_done": model.phases_done, "seed": int(seed), "format_version": FORMAT_VERSION},
        )
        _write_losses(run_dir / f"losses-{phase}.csv", est.losses_[phase])
        if log:
            log(f"seed {seed}: {phase} phase done in {timing[phase]:.1f}s")
    est.model_ = model
    est.n_states_ = env.n_states
    est.n_features_in_ = feats.shape[1]
    return est, timing


LOSS_FIELDS = ("step", "td_term", "hit_term", "nce", "policy")


def _write_losses(path, rows):
    # wall_ms is deliberately left out so loss files are reproducible byte for byte
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_FIELDS)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in LOSS_FIELDS[1:]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def eval_tasks(env, n_tasks, seed):
    """Uniformly random (start, goal) pairs with start != goal."""
    rng = substream(seed, "eval", "tasks")
    tasks = []
    for _ in range(n_tasks):
        start = int(rng.integers(env.n_states))
        goal = int(rng.integers(env.n_states - 1))
        goal += goal >= start
        tasks.append((start, goal))
    return tasks


def make_planner(cfg, name, encoder, data):
    p = cfg["planner"]
    return GraphPlanner(
        planner=name, k=p["k"], sigma=p["sigma"], budget=p["budget"], beta=encoder.beta, depth=p["depth"]
    ).fit(data.all_states(), encoder=encoder)


def evaluate_run(cfg, env, encoder, data, seed):
    ev = cfg["eval"]
    tasks = eval_tasks(env, ev["tasks"], seed)
    report = EvalReport()
    for name in cfg["planner"]["planners"]:
        t0 = time.perf_counter()
        planner = make_planner(cfg, name, encoder, data)
        part = evaluate(env, encoder, planner, tasks, ev["episodes"], ev["max_steps"], seed, ev["mode"])
        report.rows.extend(part.rows)
        report.timing[name] = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- orchestration


def run_seed(cfg, seed, out, log=None):
    """Full pipeline for one seed inside ``out/seed-<seed>``; returns its EvalReport."""
    run_dir = Path(out) / f"seed-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = cfg.for_seed(seed).to_ini()
    snap_path = run_dir / "config.ini"
    if snap_path.exists() and snap_path.read_text(encoding="utf-8") != snap:
        raise ConfigError(f"{run_dir} holds a run with a different config")
    snap_path.write_text(snap, encoding="utf-8")
    timing = {}

    env_path = run_dir / "env.json"
    if env_path.exists():
        env = load_env(env_path)
    else:
        env = build_env(cfg, seed)
        save_env(env, env_path)
    data_path = run_dir / "dataset.bin"
    if data_path.exists():
        data = load_dataset(data_path, env)
    else:
        t0 = time.perf_counter()
        data = collect(cfg, env, seed)
        save_dataset(data, data_path)
        timing["collect"] = time.perf_counter() - t0

    encoder, train_time = train(cfg, env, data, run_dir, seed, log)
    timing.update(train_time)

    eval_path = run_dir / "eval.csv"
    if eval_path.exists():
        report = EvalReport.from_csv(eval_path.read_text(encoding="utf-8"))
    else:
        report = evaluate_run(cfg, env, encoder, data, seed)
        eval_path.write_text(report.to_csv(), encoding="utf-8")
        timing.update({f"eval-{k}": v for k, v in report.timing.items()})
        if log:
            log(f"seed {seed}: " + ", ".join(
                f"{p} {report.success_rate(p):.2f}" for p in cfg["planner"]["planners"]))

    summary = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "env_fingerprint": env.fingerprint,
        "env_tag": env.tag,
        "dataset_transitions": int(data.lengths.sum()),
        "success_rate": {p: report.success_rate(p) for p in cfg["planner"]["planners"]},
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _merge_timing(run_dir / "timing.json", timing)
    return report


def _merge_timing(path, timing):
    old = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    old.update({k: round(v, 3) for k, v in timing.items()})
    path.write_text(json.dumps(old, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def worker_count(n_jobs):
    raw = os.environ.get("HITGEO_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"HITGEO_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_jobs))


def run_experiment(cfg, out=None, log=None):
    """Run every seed of ``cfg``; returns the combined :class:`EvalReport`."""
    out = Path(out or cfg["experiment"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds
    workers = worker_count(len(seeds))
    if workers == 1:
        reports = [run_seed(cfg, s, out, log) for s in seeds]
    else:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    combined = EvalReport()
    for r in reports:
        combined.rows.extend(r.rows)
    return combined


# ---------------------------------------------------------------- reports


REPORT_FIELDS = ("planner", "n_seeds", "mean", "std", "median", "min", "max")


def per_seed_success(report):
    """{planner: {seed: success rate}} from an EvalReport."""
    table = {}
    for r in report.rows:
        cell = table.setdefault(r["planner"], {}).setdefault(r["seed"], [0, 0])
        cell[0] += r["successes"]
        cell[1] += r["episodes"]
    return {p: {s: a / b if b else float("nan") for s, (a, b) in sorted(d.items())} for p, d in table.items()}


def aggregate(report):
    """Mean +/- std (population), median and range of per-seed success per planner."""
    rows = []
    table = per_seed_success(report)
    for p in [p for p in PLANNERS if p in table] + sorted(set(table) - set(PLANNERS)):
        v = np.array(list(table[p].values()))
        rows.append({
            "planner": p,
            "n_seeds": len(v),
            "mean": float(v.mean()),
            "std": float(v.std()),
            "median": float(np.median(v)),
            "min": float(v.min()),
            "max": float(v.max()),
        })
    return rows


def report_csv(rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def collect_reports(paths):
    """Concatenate eval.csv files found under the given files or directories."""
    report = EvalReport()
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.rglob("eval.csv")) if p.is_dir() else [p])
    if not files:
        raise FormatError("no eval.csv files found")
    for f in files:
        try:
            part = EvalReport.from_csv(f.read_text(encoding="utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise FormatError(f"{f}: {exc}") from None
            raise FormatError(f"{f}: malformed eval CSV ({exc})") from None
        report.rows.extend(part.rows)
    return report
