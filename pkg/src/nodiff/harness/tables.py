"""Comparison table (success vs K per method) and setup ablation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import load_checkpoint, read_document
from ..errors import NoDiffError
from ..policy import SETUPS
from .config import TrainConfig
from .evaluate import SuccessReport, reports_to_csv, rollout_eval, write_csv
from .train import fit

log = logging.getLogger(__name__)

METHODS = ("NO-Diffusion", "NO-Diffusion-dagger", "ISO-BASELINE")
ABLATION_SETUPS = ("I", "II", "III", "IV", "V")


def method_config(base: TrainConfig, method: str, seed: int, K: int | None = None) -> TrainConfig:
    """Training config for one table cell.

    The dagger row trains on exactly the K noise levels it is evaluated with.
    """
    if method == "NO-Diffusion":
        return base.with_overrides(setup="I", seed=seed, train_steps=0)
    if method == "NO-Diffusion-dagger":
        return base.with_overrides(setup="I", seed=seed, train_steps=K)
    if method == "ISO-BASELINE":
        return base.with_overrides(setup="ISO-BASELINE", seed=seed, train_steps=0)
    if method in SETUPS:
        return base.with_overrides(setup=method, seed=seed, train_steps=0)
    raise NoDiffError(f"unknown method {method!r}", component="harness")


def checkpoint_name(method: str, seed: int, K: int | None = None) -> str:
    slug = method.lower().replace("-", "_")
    if method == "NO-Diffusion-dagger":
        return f"{slug}_K{K}_s{seed}.json"
    return f"{slug}_s{seed}.json"


def _needs_K(method: str) -> bool:
    return method == "NO-Diffusion-dagger"


def _cached_matches(path: Path, config: TrainConfig) -> bool:
    if not path.exists():
        return False
    try:
        return read_document(path)["manifest"]["config"] == config.to_dict()
    except (NoDiffError, KeyError):
        return False


def _train_one(args):
    config, dataset, path = args
    if _cached_matches(Path(path), config):
        return str(path), None
    try:
        fit(config, dataset, path)
        return str(path), None
    except NoDiffError as exc:
        return str(path), str(exc)


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def train_table1_checkpoints(base: TrainConfig, dataset, ckpt_dir, methods=METHODS, *, jobs: int = 1) -> dict:
    """Train (or reuse up-to-date) checkpoints for every table cell; returns {path: error or None}."""
    ckpt_dir = Path(ckpt_dir)
    jobs_list = []
    for method in methods:
        for seed in base.seeds:
            for K in base.K_eval if _needs_K(method) else (None,):
                cfg = method_config(base, method, seed, K)
                jobs_list.append((cfg, str(dataset), str(ckpt_dir / checkpoint_name(method, seed, K))))
    return dict(_map(_train_one, jobs_list, jobs))


@dataclass
class Table1:
    methods: tuple[str, ...]
    K_eval: tuple[int, ...]
    cells: dict  # (method, K) -> mean success rate over seeds, or None when missing
    reports: list[SuccessReport] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        fields = ("method",) + tuple(f"K={K}" for K in self.K_eval)
        rows = []
        for m in self.methods:
            row = {"method": m}
            for K in self.K_eval:
                v = self.cells.get((m, K))
                row[f"K={K}"] = "NA" if v is None else v
            rows.append(row)
        return write_csv(fields, rows)

    def reports_csv(self) -> str:
        return reports_to_csv(self.reports)


def _eval_cell(args):
    method, K, seed, path, task, n, eval_seed, T_a = args
    policy, _ = load_checkpoint(path)
    rep = rollout_eval(policy, task, n, K, eval_seed, T_a=T_a)
    rep.setup = method
    rep.outcomes = []  # keep the table light; paths are exported by the eval command
    return method, K, seed, rep


def run_table1(
    ckpt_dir,
    task: str,
    K_eval=(1, 10, 50, 100),
    seeds=(0, 1, 2),
    *,
    methods=METHODS,
    n_episodes: int = 200,
    eval_seed: int = 1000,
    T_a: int = 8,
    jobs: int = 1,
) -> Table1:
    """Evaluate every (method, K) cell; each cell is the mean over training seeds.

    All cells use the same evaluation episodes (``eval_seed``). A missing
    checkpoint leaves its cell as ``NA`` and is listed in ``missing``.
    """
    ckpt_dir = Path(ckpt_dir)
    work, missing = [], []
    absent_cells = set()
    for method in methods:
        for K in K_eval:
            for seed in seeds:
                path = ckpt_dir / checkpoint_name(method, seed, K if _needs_K(method) else None)
                if not path.exists():
                    missing.append(f"{method} K={K} seed={seed}: {path}")
                    absent_cells.add((method, K))
                    continue
                work.append((method, K, seed, str(path), task, n_episodes, eval_seed, T_a))
    results = _map(_eval_cell, work, jobs)
    by_cell: dict = {}
    reports = []
    for method, K, seed, rep in results:
        by_cell.setdefault((method, K), []).append(rep.success_rate)
        reports.append(rep)
    cells = {}
    for method in methods:
        for K in K_eval:
            rates = by_cell.get((method, K))
            cells[(method, K)] = None if (method, K) in absent_cells or not rates else float(np.mean(rates))
    for m in missing:
        log.warning("missing checkpoint for %s", m)
    return Table1(tuple(methods), tuple(K_eval), cells, reports, missing)


# -- ablation -------------------------------------------------------------

ABLATION_FIELDS = ("setup", "loss", "encoder", "sigma", "conditioning", "success_rate", "param_count", "note")


def _ablation_cell(args):
    setup, seed, config, dataset, path, n, eval_seed, T_a = args
    _, err = _train_one((config, dataset, path))
    if err:
        return setup, seed, None, None, err
    try:
        policy, _ = load_checkpoint(path)
        rep = rollout_eval(policy, config.task, n, 1, eval_seed, T_a=T_a)
        return setup, seed, rep.success_rate, policy.param_count(), None
    except NoDiffError as exc:
        return setup, seed, None, None, str(exc)


def run_ablation(
    base: TrainConfig,
    dataset,
    out_dir,
    *,
    setups=ABLATION_SETUPS,
    n_episodes: int | None = None,
    eval_seed: int = 1000,
    jobs: int = 1,
) -> tuple[str, list[dict]]:
    """Train and evaluate each setup at K = 1 over ``base.seeds``.

    Returns the CSV text and the row dicts. A setup whose training or
    evaluation fails keeps its row with the error in ``note``.
    """
    out_dir = Path(out_dir)
    n = n_episodes or base.eval_episodes
    work = []
    for setup in setups:
        for seed in base.seeds:
            cfg = method_config(base, setup, seed)
            path = out_dir / f"ablation_{setup}_s{seed}.json"
            work.append((setup, seed, cfg, str(dataset), str(path), n, eval_seed, base.T_a))
    results = _map(_ablation_cell, work, jobs)
    rows = []
    for setup in setups:
        spec = SETUPS[setup]
        mine = [r for r in results if r[0] == setup]
        errors = [f"seed {r[1]}: {r[4]}" for r in mine if r[4]]
        rates = [r[2] for r in mine if r[2] is not None]
        counts = {r[3] for r in mine if r[3] is not None}
        rows.append(
            {
                "setup": setup,
                "loss": spec.loss,
                "encoder": spec.encoder,
                "sigma": spec.sigma,
                "conditioning": spec.conditioning,
                "success_rate": float(np.mean(rates)) if rates and not errors else "NA",
                "param_count": counts.pop() if len(counts) == 1 else "NA",
                "note": "; ".join(errors),
            }
        )
    return write_csv(ABLATION_FIELDS, rows), rows


__all__ = [
    "METHODS",
    "ABLATION_SETUPS",
    "ABLATION_FIELDS",
    "method_config",
    "checkpoint_name",
    "train_table1_checkpoints",
    "Table1",
    "run_table1",
    "run_ablation",
]
