"""Command-line entry point: ``nodiff <command> [options]``.

Commands::

    gen-data  --task T --episodes N --seed S --out FILE
    train     [--config FILE] [--<config key> VALUE ...] --dataset FILE --out CKPT
    eval      --ckpt CKPT --K K --episodes N --seed S [--T_a N] [--jobs J] --out REPORT.csv
    bench     --ckpt CKPT --K K [K ...] [--n_predictions N] --out TIMING.csv
    table1    [--config FILE] [--<config key> VALUE ...] --dataset FILE [--methods M ...] --out DIR
    ablate    [--config FILE] [--<config key> VALUE ...] --dataset FILE --out DIR
    plot      --reports FILE [FILE ...] --out DIR

Every option can also be given in the ``--config`` file (a flat YAML/JSON
mapping using the option names); the command line wins. Exit status is 0 on
success, 1 on a domain error and 2 on a usage error. ``NODIFF_OUT_DIR`` sets
the directory used when ``--out`` is omitted (default ``runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import yaml

from . import __version__
from .checkpoint import atomic_write_text, load_checkpoint
from .errors import ConfigError, NoDiffError
from .harness.config import TrainConfig, config_from_dict
from .harness.evaluate import bench, reports_to_csv, rollout_eval
from .harness.tables import METHODS, run_ablation, run_table1, train_table1_checkpoints
from .harness.train import fit
from .plots import export_plots, trajectories_document
from .toyworld import TASKS, generate_dataset

OUT_ENV = "NODIFF_OUT_DIR"
GRAMMAR = __doc__.split("Commands::", 1)[1].split("\n\n", 2)[1]
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _add_train_keys(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (same keys as the config file)")
    for name in TRAIN_KEYS:
        flags = [f"--{name}"]
        if "_" in name and name.lower() == name:
            flags.append(f"--{name.replace('_', '-')}")
        g.add_argument(*flags, dest=name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nodiff", description="One-step diffusion motion planning on a 2D toy world.")
    parser.add_argument("--version", action="version", version=f"nodiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", default=None, help="flat YAML/JSON file of option values")
        return p

    p = command("gen-data", "generate expert demonstrations")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = command("train", "train one policy")
    _add_train_keys(p)
    p.add_argument("--dataset")
    p.add_argument("--out")

    p = command("eval", "closed-loop success rate of a checkpoint")
    p.add_argument("--ckpt")
    p.add_argument("--K", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--T_a", "--T-a", dest="T_a", type=int)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")

    p = command("bench", "inference latency per K")
    p.add_argument("--ckpt")
    p.add_argument("--K", type=int, nargs="+")
    p.add_argument("--n_predictions", "--n-predictions", dest="n_predictions", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--out")

    p = command("table1", "success rate per method and K")
    _add_train_keys(p)
    p.add_argument("--dataset")
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--eval_seed", "--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")

    p = command("ablate", "train and evaluate setups I-V at K=1")
    _add_train_keys(p)
    p.add_argument("--dataset")
    p.add_argument("--eval_seed", "--eval-seed", dest="eval_seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")

    p = command("plot", "export SVG figures from reports")
    p.add_argument("--reports", nargs="+")
    p.add_argument("--out")
    return parser


DEFAULTS = {
    "gen-data": {"task": "reach", "episodes": 200, "seed": 0},
    "eval": {"episodes": 200, "seed": 1000, "jobs": 1},
    "bench": {"K": [1, 10, 50, 100], "n_predictions": 30, "warmup": 3},
    "table1": {"methods": list(METHODS), "eval_seed": 1000, "jobs": 1},
    "ablate": {"eval_seed": 1000, "jobs": 1},
}


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge built-in defaults < config file < command line."""
    file_vals = {}
    if args.config:
        try:
            file_vals = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_vals, dict):
            raise UsageError(f"{args.config}: config must be a flat key/value mapping")
    known = set(vars(args)) - {"command", "config"}
    unknown = set(file_vals) - known
    if unknown:
        raise UsageError(f"{args.config}: keys not valid for {args.command}: {sorted(unknown)}")
    out = dict(DEFAULTS.get(args.command, {}))
    out.update(file_vals)
    out.update({k: v for k, v in vars(args).items() if v is not None and k in known})
    return out


def _train_config(opts: dict) -> TrainConfig:
    return config_from_dict({k: opts[k] for k in TRAIN_KEYS if k in opts})


def _require(opts: dict, *keys):
    for k in keys:
        if opts.get(k) is None:
            raise UsageError(f"missing required option --{k}")


def write_manifest(artifact, command: str, argv, config: dict, artifacts: dict, started: float, seed) -> Path:
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "tool_version": __version__,
        "seed": seed,
    }
    return atomic_write_text(Path(str(artifact) + ".manifest.json"), json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _jsonable(opts: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in opts.items()}


def cmd_gen_data(opts, argv, started):
    out = Path(opts.get("out") or _out_dir() / f"{opts['task']}.ds")
    generate_dataset(opts["task"], int(opts["episodes"]), int(opts["seed"]), out)
    write_manifest(out, "gen-data", argv, _jsonable(opts), {"dataset": out}, started, opts["seed"])
    print(out)


def cmd_train(opts, argv, started):
    _require(opts, "dataset")
    cfg = _train_config(opts)
    out = Path(opts.get("out") or _out_dir() / f"{cfg.task}_{cfg.setup}_s{cfg.seed}.json")
    res = fit(cfg, opts["dataset"], out, progress=lambda r: print(json.dumps(r), file=sys.stderr))
    resolved = {**cfg.to_dict(), "dataset": opts["dataset"], "out": str(out)}
    arts = {"dataset": opts["dataset"], "checkpoint": out, "log": res.log_path}
    write_manifest(out, "train", argv, resolved, arts, started, cfg.seed)
    print(out)


def cmd_eval(opts, argv, started):
    _require(opts, "ckpt", "K")
    policy, doc = load_checkpoint(opts["ckpt"])
    K, K_m = int(opts["K"]), policy.schedule.K_m
    if not (1 <= K <= K_m):
        raise UsageError(f"--K {K} exceeds the checkpoint's K_m {K_m}" if K > K_m else f"--K must be >= 1, got {K}")
    train_cfg = doc["manifest"].get("config", {})
    task = opts.get("task") or train_cfg.get("task", "reach")
    T_a = int(opts.get("T_a") or train_cfg.get("T_a", 8))
    rep = rollout_eval(policy, task, int(opts["episodes"]), K, int(opts["seed"]), T_a=T_a, jobs=int(opts["jobs"]))
    out = Path(opts.get("out") or _out_dir() / f"eval_{policy.setup}_K{K}_s{opts['seed']}.csv")
    atomic_write_text(out, reports_to_csv([rep]))
    traj = out.with_suffix(".traj.json")
    atomic_write_text(traj, json.dumps(trajectories_document(rep), sort_keys=True) + "\n")
    resolved = {**_jsonable(opts), "task": task, "T_a": T_a}
    write_manifest(out, "eval", argv, resolved, {"checkpoint": opts["ckpt"], "report": out, "trajectories": traj}, started, opts["seed"])
    for o in rep.errors:
        print(f"episode {o.index} failed: {o.error}", file=sys.stderr)
    print(f"{rep.setup} K={K}: {rep.success_rate:.1f}% ({rep.successes}/{rep.episodes})")


def cmd_bench(opts, argv, started):
    _require(opts, "ckpt")
    policy, _ = load_checkpoint(opts["ckpt"])
    Ks = [int(k) for k in opts["K"]]
    for K in Ks:
        if K > policy.schedule.K_m:
            raise UsageError(f"--K {K} exceeds the checkpoint's K_m {policy.schedule.K_m}")
    rep = bench(policy, Ks, int(opts["n_predictions"]), warmup=int(opts["warmup"]))
    out = Path(opts.get("out") or _out_dir() / "timing.csv")
    atomic_write_text(out, rep.to_csv())
    write_manifest(out, "bench", argv, {**_jsonable(opts), "hardware": rep.hardware}, {"checkpoint": opts["ckpt"], "report": out}, started, None)
    for r in rep.rows:
        print(f"K={r.K}: {r.mean_s * 1e3:.3f} ms +- {r.std_s * 1e3:.3f} ({r.calls} calls)")


def cmd_table1(opts, argv, started):
    _require(opts, "dataset")
    cfg = _train_config(opts)
    out = Path(opts.get("out") or _out_dir() / "table1")
    jobs = int(opts["jobs"])
    errors = train_table1_checkpoints(cfg, opts["dataset"], out, opts["methods"], jobs=jobs)
    for path, err in errors.items():
        if err:
            print(f"training failed for {path}: {err}", file=sys.stderr)
    table = run_table1(
        out, cfg.task, cfg.K_eval, cfg.seeds, methods=opts["methods"], n_episodes=cfg.eval_episodes,
        eval_seed=int(opts["eval_seed"]), T_a=cfg.T_a, jobs=jobs,
    )
    for m in table.missing:
        print(f"missing: {m}", file=sys.stderr)
    csv_path = atomic_write_text(out / "table1.csv", table.to_csv())
    rep_path = atomic_write_text(out / "table1_reports.csv", table.reports_csv())
    resolved = {**cfg.to_dict(), **{k: opts[k] for k in ("dataset", "methods", "eval_seed", "jobs")}}
    write_manifest(csv_path, "table1", argv, _jsonable(resolved), {"table": csv_path, "reports": rep_path}, started, list(cfg.seeds))
    print(table.to_csv(), end="")


def cmd_ablate(opts, argv, started):
    _require(opts, "dataset")
    cfg = _train_config(opts)
    out = Path(opts.get("out") or _out_dir() / "ablation")
    text, _ = run_ablation(cfg, opts["dataset"], out, eval_seed=int(opts["eval_seed"]), jobs=int(opts["jobs"]))
    csv_path = atomic_write_text(out / "ablation.csv", text)
    resolved = {**cfg.to_dict(), **{k: opts[k] for k in ("dataset", "eval_seed", "jobs")}}
    write_manifest(csv_path, "ablate", argv, _jsonable(resolved), {"table": csv_path}, started, list(cfg.seeds))
    print(text, end="")


def cmd_plot(opts, argv, started):
    _require(opts, "reports")
    out = Path(opts.get("out") or _out_dir() / "plots")
    paths = export_plots(opts["reports"], out)
    for p in paths:
        write_manifest(p, "plot", argv, _jsonable(opts), {"figure": p}, started, None)
        print(p)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "table1": cmd_table1,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    started = time.time()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        opts = resolve(args, parser)
        COMMANDS[args.command](opts, argv, started)
    except UsageError as exc:
        print(f"nodiff: usage error: {exc}\n\nusage:\n{GRAMMAR}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"nodiff: usage error: {exc}", file=sys.stderr)
        return 2
    except NoDiffError as exc:
        print(f"nodiff: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
