"""Checkpoint documents.

A checkpoint is one JSON document::

    {
      "format": "nodiff-checkpoint",
      "version": 1,
      "manifest": {"setup": ..., "model": {...}, "schedule": {...}, "config": {...}},
      "norm_stats": {"action_min": [...], "action_max": [...], "state_mean": [...], "state_std": [...]},
      "groups": {"psi": {"layout": [{"name": "W0", "shape": [256, 518]}, ...], "values": [...]}, ...},
      "meta": {"iterations": ..., "seed": ...}
    }

Keys are sorted and floats are written with Python's shortest round-trip
``repr``, so save -> load -> save is byte-identical and values are bit-exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, StructuralError
from .policy import ModelConfig, NormStats, Policy
from .schedule import Schedule, build_schedule, subsample_schedule

CHECKPOINT_FORMAT = "nodiff-checkpoint"
CHECKPOINT_VERSION = 1


def schedule_manifest(K_m: int, beta_min: float, beta_max: float, train_steps: int = 0) -> dict:
    return {"K_m": K_m, "beta_min": beta_min, "beta_max": beta_max, "train_steps": train_steps}


def schedule_from_manifest(m: dict) -> Schedule:
    base = build_schedule(m["K_m"], m["beta_min"], m["beta_max"])
    steps = m.get("train_steps", 0)
    return subsample_schedule(base, steps) if steps and steps != m["K_m"] else base


def to_document(policy: Policy, schedule_info: dict, config: dict | None = None, meta: dict | None = None) -> dict:
    groups = {}
    for g, sl in policy.group_slices.items():
        if g in policy.nets:
            layout = [{"name": s.name, "shape": list(s.shape)} for s in policy.nets[g].layout]
        else:
            layout = [{"name": "value", "shape": list(policy.consts[g].shape)}]
        groups[g] = {"layout": layout, "values": policy.params[sl].tolist()}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "manifest": {
            "setup": policy.setup,
            "model": policy.config.to_dict(),
            "schedule": schedule_info,
            "alpha_bar": policy.schedule.alpha_bar.tolist(),
            "config": config or {},
        },
        "norm_stats": policy.norm.to_dict(),
        "groups": groups,
        "meta": meta or {},
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def from_document(doc: dict) -> Policy:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise StructuralError("not a nodiff checkpoint", component="checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise StructuralError(
            f"checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})",
            component="checkpoint",
        )
    man = doc["manifest"]
    config = ModelConfig.from_dict(man["model"])
    schedule = schedule_from_manifest(man["schedule"])
    if "alpha_bar" in man and not np.array_equal(np.array(man["alpha_bar"]), schedule.alpha_bar):
        raise StructuralError("stored alpha_bar does not match the schedule manifest", component="checkpoint")
    norm = NormStats.from_dict(doc["norm_stats"])
    groups = {}
    for g, rec in doc["groups"].items():
        values = np.array(rec["values"], dtype=np.float64)
        n = sum(int(np.prod(e["shape"])) for e in rec["layout"])
        if values.shape != (n,):
            raise StructuralError(f"group {g}: {values.size} values for layout of {n}", component="checkpoint")
        groups[g] = values
    policy = Policy.from_groups(config, man["setup"], schedule, norm, groups)
    for g, rec in doc["groups"].items():
        expected = (
            [(s.name, list(s.shape)) for s in policy.nets[g].layout]
            if g in policy.nets
            else [("value", list(policy.consts[g].shape))]
        )
        if [(e["name"], list(e["shape"])) for e in rec["layout"]] != expected:
            raise StructuralError(f"group {g}: layout does not match the architecture", component="checkpoint")
    return policy


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        tmp.write_text(text, encoding="utf-8", newline="\n")
        tmp.replace(path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}", component="checkpoint") from exc
    return path


def save_checkpoint(path, policy: Policy, schedule_info: dict, config: dict | None = None, meta: dict | None = None):
    return atomic_write_text(path, dumps(to_document(policy, schedule_info, config, meta)))


def read_document(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactIOError(f"cannot read checkpoint {path}: {exc}", component="checkpoint") from exc
    except json.JSONDecodeError as exc:
        raise StructuralError(f"{path} is not valid JSON: {exc}", component="checkpoint") from exc


def load_checkpoint(path) -> tuple[Policy, dict]:
    """Returns the policy and the full document (manifest, meta) for provenance."""
    doc = read_document(path)
    return from_document(doc), doc
