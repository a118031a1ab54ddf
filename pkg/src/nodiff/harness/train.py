"""Training loop: minibatch Adam on the joint objective."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_text, save_checkpoint, schedule_manifest
from ..errors import DataError, NumericError, TrainingError
from ..ndmath import RngStream, adam_init, adam_update
from ..policy import Draws, Policy
from ..toyworld import env_from_header, load_dataset
from .config import TrainConfig
from .data import TrainingSet, build_training_set, fit_norm_stats

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "L_diff", "L_mu", "L_sigma", "total")


@dataclass
class FitResult:
    policy: Policy
    log: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    log_path: Path | None = None


def image_shape_of(header: dict) -> tuple[int, int, int, int]:
    env = env_from_header(header)
    return (env.n_views, env.height, env.width, env.channels)


def prepare(config: TrainConfig, dataset_path) -> tuple[Policy, TrainingSet, dict]:
    """Initial policy (fitted NormStats, seeded weights) and its training set."""
    header, episodes = load_dataset(dataset_path)
    if header["task"] != config.task:
        raise DataError(
            f"dataset task {header['task']!r} does not match config task {config.task!r}", component="harness"
        )
    env = env_from_header(header)
    mcfg = config.model_config(image_shape_of(header), env.state_dim, env.action_dim)
    norm = fit_norm_stats(episodes)
    data = build_training_set(episodes, mcfg, norm)
    policy = Policy.create(mcfg, config.setup, config.schedule(), norm, RngStream.named(config.seed, "init"))
    return policy, data, header


def log_to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        w.writerow([r["iteration"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def _save(out, policy: Policy, config: TrainConfig, meta: dict):
    info = schedule_manifest(config.K_m, config.beta_min, config.beta_max, config.train_steps)
    return save_checkpoint(out, policy, info, config.to_dict(), meta)


def fit(config: TrainConfig, dataset_path, out=None, *, progress=None) -> FitResult:
    """Train one policy.

    Minibatch indices come from the ``batches`` stream and diffusion indices
    plus noise from the ``training-noise`` stream, both keyed by
    ``config.seed``, so a run is a pure function of (config, dataset).

    When ``out`` is given the checkpoint is written there and the training
    curve next to it as ``<out>.log.csv``. A non-finite loss or gradient
    stops training; the last finite parameters are saved to
    ``<out>.last_good.json`` and a :class:`TrainingError` with the loss
    breakdown is raised.
    """
    policy, data, header = prepare(config, dataset_path)
    meta = {"dataset": {"task": header["task"], "seed": header["seed"], "n_episodes": header["n_episodes"]}}
    K_m = policy.schedule.K_m
    B, P = config.batch_size, policy.config.motion_size
    adam = adam_init(policy.params.size, lr=config.lr)
    layout = policy.layout()
    batches = RngStream.named(config.seed, "batches")
    noise = RngStream.named(config.seed, "training-noise")

    records: list[dict] = []
    acc = np.zeros(4)
    n_acc = 0
    for it in range(1, config.iterations + 1):
        idx = batches.integers(0, len(data), B)
        k = noise.integers(1, K_m + 1, B)
        eps = noise.normal(B * P).reshape(B, policy.config.T_p, policy.config.action_dim)
        last = None
        try:
            res = policy.loss_total(data.batch(idx), Draws(k, eps))
            last = res.breakdown()
            adam_update(adam, policy.params, res.grad, layout)
        except NumericError as exc:
            good = policy.params.copy()
            path = None
            if out is not None:
                path = _save(Path(str(out) + ".last_good.json"), policy, config, {**meta, "iterations": it - 1})
            raise TrainingError(
                f"training stopped at iteration {it}: {exc}"
                + (f"; last good parameters saved to {path}" if path else ""),
                component="harness",
                breakdown=last,
                last_good=good,
            ) from exc
        acc += (res.l_diff, res.l_mu, res.l_sigma, res.total)
        n_acc += 1
        if it % config.log_interval == 0 or it == config.iterations:
            m = acc / n_acc
            rec = dict(zip(LOG_FIELDS, (it, *map(float, m))))
            records.append(rec)
            acc[:] = 0.0
            n_acc = 0
            if progress is not None:
                progress(rec)
            log.debug("iter %d %s", it, rec)

    result = FitResult(policy, records)
    if out is not None:
        result.checkpoint = _save(out, policy, config, {**meta, "iterations": config.iterations})
        result.log_path = atomic_write_text(Path(str(out) + ".log.csv"), log_to_csv(records))
    return result


__all__ = ["fit", "prepare", "FitResult", "LOG_FIELDS", "log_to_csv", "image_shape_of"]
