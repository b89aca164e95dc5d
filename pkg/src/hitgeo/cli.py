"""``hitgeo`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 verification
failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, HitgeoError
from .estimators import PLANNERS, IELEmbedding
from .experiment import (
    ExperimentConfig,
    aggregate,
    build_env,
    collect,
    collect_reports,
    evaluate_run,
    make_planner,
    report_csv,
    restore_model,
    run_experiment,
    train,
)
from .io import load_dataset, load_env, save_dataset, save_env
from .training import PHASES
from .verify import SUITES, rows_to_csv, run_suites

EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_IO = 4


def _common(p, out_help):
    p.add_argument("--config", type=Path, help="INI experiment config")
    p.add_argument("--seed", type=int, help="seed (default: first seed in the config)")
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")


def build_parser():
    parser = argparse.ArgumentParser(prog="hitgeo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="write an environment file")
    _common(p, "env file to write (default env.json)")

    p = sub.add_parser("collect", help="sample a trajectory dataset")
    _common(p, "dataset file to write (.bin or .txt)")
    p.add_argument("--env", type=Path, required=True)

    p = sub.add_parser("train", help="run the three training phases, checkpointing each")
    _common(p, "checkpoint directory")
    p.add_argument("--env", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("plan", help="build a planning graph and dump its edge list")
    _common(p, "edge-list file to write")
    p.add_argument("--env", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True, help="directory holding ckpt-policy.bin")
    p.add_argument("--planner", choices=("sym_graph", "asym_graph"), default="asym_graph")
    p.add_argument("--goal", type=int, default=0, help="goal state (asym_graph only)")

    p = sub.add_parser("eval", help="evaluate planners with a trained checkpoint")
    _common(p, "eval CSV to write")
    p.add_argument("--env", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--planner", choices=PLANNERS, help="evaluate only this planner")

    p = sub.add_parser("run", help="full pipeline over every configured seed")
    _common(p, "output directory (default: [experiment] out)")

    p = sub.add_parser("verify", help="run the exact-oracle suites")
    _common(p, "CSV file for the suite rows (default stdout)")
    p.add_argument("--suites", default=",".join(SUITES), help=f"comma list from {SUITES}")

    p = sub.add_parser("report", help="aggregate eval CSVs into a summary table")
    p.add_argument("paths", nargs="+", type=Path, help="eval.csv files or run directories")
    p.add_argument("--out", type=Path, help="CSV file to write (default stdout)")
    return parser


def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig({})
    return cfg.with_overrides(args.override)


def _seed(args, cfg):
    return cfg.seeds[0] if args.seed is None else args.seed


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _load_trained(cfg, seed, args):
    env = load_env(args.env)
    data = load_dataset(args.data, env)
    ckpt = Path(args.ckpt) / f"ckpt-{PHASES[-1]}.bin"
    if not ckpt.exists():
        raise FileNotFoundError(f"{ckpt} not found; run train first")
    tcfg = cfg.train_config(seed)
    est = IELEmbedding.from_config(tcfg, features=cfg["train"]["features"])
    feats = env.features(np.arange(env.n_states), est.features)
    est.model_ = restore_model(ckpt, feats, env.n_actions, tcfg)
    est.n_states_ = env.n_states
    est.n_features_in_ = feats.shape[1]
    return env, data, est


def _run(args):
    if args.command == "report":
        if args.out is not None:
            args.out.parent.mkdir(parents=True, exist_ok=True)
        rows = aggregate(collect_reports(args.paths))
        _emit(report_csv(rows), args.out)
        return 0
    cfg = _config(args)
    seed = _seed(args, cfg)
    if args.out is not None and args.command not in ("train", "run"):
        args.out.parent.mkdir(parents=True, exist_ok=True)

    if args.command == "gen-env":
        save_env(build_env(cfg, seed), args.out or Path("env.json"))
    elif args.command == "collect":
        env = load_env(args.env)
        save_dataset(collect(cfg, env, seed), args.out or Path("dataset.bin"))
    elif args.command == "train":
        env = load_env(args.env)
        data = load_dataset(args.data, env)
        out = args.out or Path(".")
        out.mkdir(parents=True, exist_ok=True)
        train(cfg, env, data, out, seed, log=lambda m: print(m, file=sys.stderr))
    elif args.command == "plan":
        env, data, est = _load_trained(cfg, seed, args)
        if not 0 <= args.goal < env.n_states:
            raise ConfigError(f"--goal must lie in [0, {env.n_states})")
        planner = make_planner(cfg, args.planner, est, data)
        graph = planner.graph_for(args.goal)
        graph.dump(args.out or Path("graph.txt"))
    elif args.command == "eval":
        env, data, est = _load_trained(cfg, seed, args)
        if args.planner:
            cfg = cfg.with_overrides([f"planner.planners={args.planner}"])
        report = evaluate_run(cfg, env, est, data, seed)
        _emit(report.to_csv(), args.out)
    elif args.command == "run":
        report = run_experiment(cfg, args.out, log=lambda m: print(m, file=sys.stderr))
        _emit(report_csv(aggregate(report)), None)
    elif args.command == "verify":
        names = [s.strip() for s in args.suites.split(",") if s.strip()]
        bad = set(names) - set(SUITES)
        if bad:
            raise ConfigError(f"unknown suite(s) {sorted(bad)}")
        rows = run_suites(names, seed=seed)
        _emit(rows_to_csv(rows), args.out)
        failed = [r for r in rows if not r["passed"]]
        if failed:
            print(f"{len(failed)} of {len(rows)} checks failed", file=sys.stderr)
            return EXIT_VERIFY
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HitgeoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
