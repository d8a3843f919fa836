"""Incremental accuracy metrics and report rendering."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RunMetrics:
    ia: tuple[float, ...]
    aia: float
    fia: float

    def to_json(self) -> dict:
        return {"ia": list(self.ia), "aia": self.aia, "fia": self.fia}


def accuracy_counts(predictions, labels) -> tuple[int, int]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricsError(f"shape mismatch {predictions.shape} vs {labels.shape}")
    return int((predictions == labels).sum()), int(labels.size)


def to_percent(correct: int, total: int) -> float:
    if total == 0:
        raise MetricsError("no samples")
    return 100.0 * correct / total


def incremental_accuracy(predictions, labels) -> float:
    return to_percent(*accuracy_counts(predictions, labels))


def aggregate(ia: Sequence[float]) -> RunMetrics:
    ia = tuple(float(x) for x in ia)
    if not ia:
        raise MetricsError("no phases")
    if any(not 0.0 <= x <= 100.0 for x in ia):
        raise MetricsError(f"accuracies must lie in [0, 100]: {ia}")
    return RunMetrics(ia, sum(ia) / len(ia), ia[-1])


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise MetricsError(f"missing {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def recompute(run_dir) -> RunMetrics:
    """Aggregate straight from ``metrics.jsonl``."""
    records = sorted(read_metrics(run_dir), key=lambda r: r["phase"])
    return aggregate([r["ia"] for r in records])


def phase_table(records: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["phase", "ia", "classes_seen"])
    for r in sorted(records, key=lambda r: r["phase"]):
        writer.writerow([r["phase"], f"{r['ia']:.4f}", r["classes_seen"]])
    return buf.getvalue()


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def render_svg(curves: dict[str, list[tuple[float, float]]], xlabel: str = "phase",
               ylabel: str = "accuracy (%)", width: int = 480, height: int = 320) -> str:
    """Minimal line chart, one polyline per named curve.

    Output depends only on the inputs, so re-rendering is byte-identical.
    """
    left, right, top, bottom = 56, 130, 20, 44
    xs = [x for pts in curves.values() for x, _ in pts] or [0.0, 1.0]
    ys = [y for pts in curves.values() for _, y in pts] or [0.0, 100.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(100.0, max(ys))
    if x1 == x0:
        x1 = x0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           '<rect width="100%" height="100%" fill="white"/>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for tick in np.linspace(y0, y1, 6):
        out.append(f'<text x="{left - 6}" y="{sy(tick) + 4:.2f}" font-size="10" '
                   f'text-anchor="end">{tick:.0f}</text>')
    for x in sorted(set(xs)):
        out.append(f'<text x="{sx(x):.2f}" y="{top + ph + 14}" font-size="10" '
                   f'text-anchor="middle">{x:g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" font-size="11" '
               f'text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.2f}" font-size="11" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.2f})">{ylabel}</text>')
    for i, (name, pts) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}">'
                   f'<title>{name}</title></polyline>')
        ly = top + 14 * (i + 1)
        out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly}" font-size="10">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ablation_rows(runs: dict[str, Path]) -> list[list[str]]:
    # group seeds of the same configuration by the run's non-seed fingerprint
    groups: dict[str, list[tuple[str, float, float]]] = {}
    for name, run_dir in runs.items():
        summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
        key = summary.get("group", name)
        groups.setdefault(key, []).append((name, summary["aia"], summary["fia"]))
    rows = []
    for key, members in groups.items():
        aia = [m[1] for m in members]
        fia = [m[2] for m in members]
        sd = (lambda v: statistics.stdev(v) if len(v) > 1 else 0.0)
        rows.append([key, ",".join(m[0] for m in members), str(len(members)),
                     f"{statistics.fmean(aia):.4f}", f"{sd(aia):.4f}",
                     f"{statistics.fmean(fia):.4f}", f"{sd(fia):.4f}"])
    return rows


def emit_report(run_dirs, out_dir, names: Sequence[str] | None = None) -> list[Path]:
    """Write ``accuracy.svg`` and per-run ``<name>_phases.csv``; with several
    runs also ``ablation.csv`` (mean and std over seeds of each config)."""
    run_dirs = [Path(p) for p in ([run_dirs] if isinstance(run_dirs, (str, Path)) else run_dirs)]
    names = list(names) if names else [p.name for p in run_dirs]
    if len(names) != len(run_dirs):
        raise MetricsError("one name per run directory required")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, curves = [], {}
    for name, run_dir in zip(names, run_dirs):
        records = sorted(read_metrics(run_dir), key=lambda r: r["phase"])
        curves[name] = [(float(r["phase"]), float(r["ia"])) for r in records]
        path = out_dir / f"{name}_phases.csv"
        path.write_text(phase_table(records), encoding="utf-8")
        written.append(path)
    svg = out_dir / "accuracy.svg"
    svg.write_text(render_svg(curves), encoding="utf-8")
    written.append(svg)
    if len(run_dirs) > 1:
        path = out_dir / "ablation.csv"
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["config", "runs", "n", "aia_mean", "aia_std", "fia_mean", "fia_std"])
        writer.writerows(_ablation_rows(dict(zip(names, run_dirs))))
        path.write_text(buf.getvalue(), encoding="utf-8")
        written.append(path)
    return written
