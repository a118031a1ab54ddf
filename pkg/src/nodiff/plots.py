"""Static SVG figures: rollout path overlays and success rate against K.

Output is byte-reproducible: the SVG id salt is fixed and no creation date
is embedded.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
from matplotlib.figure import Figure

from .errors import ArtifactIOError, StructuralError
from .harness.evaluate import SuccessReport, read_reports_csv

TRAJ_FORMAT = "nodiff-trajectories"
TRAJ_VERSION = 1


def trajectories_document(report: SuccessReport, max_episodes: int | None = None) -> dict:
    eps = report.outcomes[:max_episodes] if max_episodes else report.outcomes
    return {
        "format": TRAJ_FORMAT,
        "version": TRAJ_VERSION,
        "task": report.task,
        "setup": report.setup,
        "K": report.K,
        "seed": report.seed,
        "episodes": [
            {"index": o.index, "success": bool(o.success), "path": [] if o.path is None else o.path.tolist()}
            for o in eps
        ],
    }


def _read(path) -> str:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read report {path}: {exc}", component="cli") from exc


def _svg(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with matplotlib.rc_context({"svg.hashsalt": "nodiff", "svg.fonttype": "path"}):
        fig.savefig(tmp, format="svg", metadata={"Date": None})
    tmp.replace(path)
    return path


def plot_trajectories(docs: list[dict], path, max_paths: int = 20) -> Path:
    """Overlay robot paths, one colour per (setup, K), with a legend."""
    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot()
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    colors = matplotlib.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, doc in enumerate(docs):
        color = colors[i % len(colors)]
        label = f"{doc['setup']} K={doc['K']}"
        for j, ep in enumerate(doc["episodes"][:max_paths]):
            pts = ep["path"]
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.plot(xs, ys, color=color, lw=1.0, alpha=0.8, label=label if j == 0 else None)
            ax.plot(xs[-1:], ys[-1:], marker="o" if ep["success"] else "x", color=color, ms=3)
    if docs:
        ax.legend(loc="upper left", fontsize=8)
    return _svg(fig, Path(path))


def plot_success_vs_K(rows: list[dict], path) -> Path:
    """Mean success rate per setup against K, one line per setup."""
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot()
    ax.set_xlabel("denoising steps K")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(-2, 102)
    series: dict = {}
    for r in rows:
        series.setdefault(r["setup"], {}).setdefault(r["K"], []).append(r["success_rate"])
    for setup in sorted(series):
        Ks = sorted(series[setup])
        ax.plot(Ks, [sum(series[setup][K]) / len(series[setup][K]) for K in Ks], marker="o", label=setup)
    if series:
        ax.set_xscale("log")
        ax.legend(fontsize=8)
    return _svg(fig, Path(path))


def export_plots(report_paths, out_dir) -> list[Path]:
    """Figures from evaluation outputs.

    ``*.csv`` SuccessReport tables feed ``success_vs_K.svg``; trajectory
    documents (``*.json``) feed ``trajectories.svg``. Both files are always
    written, with empty axes when there is no data of that kind.
    """
    out_dir = Path(out_dir)
    rows, docs = [], []
    for p in report_paths:
        text = _read(p)
        if str(p).endswith(".csv"):
            rows.extend(read_reports_csv(text))
        else:
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise StructuralError(f"{p}: not JSON: {exc}", component="cli") from exc
            if doc.get("format") != TRAJ_FORMAT:
                raise StructuralError(f"{p}: not a trajectory document", component="cli")
            docs.append(doc)
    return [plot_trajectories(docs, out_dir / "trajectories.svg"), plot_success_vs_K(rows, out_dir / "success_vs_K.svg")]


__all__ = ["trajectories_document", "plot_trajectories", "plot_success_vs_K", "export_plots"]
