"""Empirical probes: Lipschitz behaviour of the fusion network and hyperparameter sweeps."""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .metrics import render_svg
from .model import AVModel


@dataclass
class LipschitzReport:
    epsilon: float
    n_samples: int
    distances: list[float]
    input_norms: list[float]
    mean: float
    fraction_exceeding: float

    def to_json(self) -> dict:
        return asdict(self)


def _sphere_perturbations(rng: np.random.Generator, n: int, shape, epsilon: float) -> np.ndarray:
    z = rng.standard_normal((n, int(np.prod(shape))))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return (z * epsilon).reshape((n,) + tuple(shape))


@torch.no_grad()
def probe_lipschitz(model: AVModel, audio: np.ndarray, visual: np.ndarray, epsilon: float,
                    n_samples: int, rng: np.random.Generator) -> LipschitzReport:
    """Distance of the video feature H under input perturbations of norm ``epsilon``.

    Perturbations are uniform on the sphere over the flattened audio+visual
    features of a sample; evaluation runs in float64 so the perturbation
    norm is exact to rounding.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise ValueError("model has non-finite parameters")
    net = copy.deepcopy(model).double().eval()
    idx = rng.choice(len(audio), size=min(n_samples, len(audio)), replace=False)
    a = torch.as_tensor(np.asarray(audio)[idx], dtype=torch.float64)
    v = torch.as_tensor(np.asarray(visual)[idx], dtype=torch.float64)
    k, da = a.shape[1:]
    dv = v.shape[2]
    delta = _sphere_perturbations(rng, len(idx), (k, da + dv), epsilon)
    da_t = torch.as_tensor(delta[:, :, :da])
    dv_t = torch.as_tensor(delta[:, :, da:])
    a2, v2 = a + da_t, v + dv_t
    # norm of the perturbation that actually reached the network
    realised = torch.cat([(a2 - a).flatten(1), (v2 - v).flatten(1)], dim=1).norm(dim=1)
    base = net.fuse(a, v).video
    moved = net.fuse(a2, v2).video
    dist = (moved - base).norm(dim=1).numpy()
    if not np.isfinite(dist).all():
        raise ValueError("probe produced non-finite distances")
    return LipschitzReport(
        epsilon=float(epsilon), n_samples=len(idx), distances=dist.tolist(),
        input_norms=realised.numpy().tolist(), mean=float(dist.mean()),
        fraction_exceeding=float((dist > epsilon).mean()),
    )


def expand_grid(grid: dict) -> list[dict]:
    if not grid:
        raise cfgmod.ConfigError("empty sweep grid")
    unknown = sorted(set(grid) - set(cfgmod.DEFAULTS))
    if unknown:
        raise cfgmod.ConfigError(f"unknown sweep key(s): {', '.join(unknown)}")
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise cfgmod.ConfigError(f"sweep values for {k!r} must be a non-empty list")
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def _run_point(args):
    from .trainer import run_from_config

    cfg, run_dir = args
    result = run_from_config(cfg, run_dir)
    return result.metrics.aia, result.metrics.fia


def sweep(base_config: dict, grid: dict, seeds=None, out_dir=None,
          workers: int | None = None) -> list[dict]:
    """Run the full pipeline for every grid point and seed; one row per run."""
    points = expand_grid(grid)
    seeds = list(seeds) if seeds is not None else [base_config["seed"]]
    jobs, rows = [], []
    out_dir = Path(out_dir) if out_dir is not None else None
    for i, point in enumerate(points):
        for seed in seeds:
            cfg = cfgmod.merge(base_config, {**point, "seed": seed})
            run_dir = out_dir / f"point{i:03d}_seed{seed}" if out_dir is not None else None
            jobs.append((cfg, run_dir))
            rows.append({"point": i, "seed": seed, **point, "fingerprint": cfgmod.fingerprint(cfg)})

    if workers is None:
        workers = int(os.environ.get("HAD_NUM_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(job) for job in jobs]
    for row, (aia, fia) in zip(rows, results):
        row["aia"], row["fia"] = aia, fia

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "sweep.csv").write_text(sweep_table(rows, list(grid)), encoding="utf-8")
        for key in grid:
            curve = _mean_curve(rows, key)
            if all(isinstance(x, (int, float)) and not isinstance(x, bool) for x, _ in curve):
                (out_dir / f"sweep_{key.replace('.', '_')}.svg").write_text(
                    render_svg({"AIA": curve}, xlabel=key, ylabel="AIA (%)"), encoding="utf-8")
        (out_dir / "grid.json").write_text(json.dumps({"grid": grid, "seeds": seeds}, indent=1),
                                           encoding="utf-8")
    return rows


def _mean_curve(rows: list[dict], key: str) -> list[tuple]:
    by_value: dict = {}
    for r in rows:
        by_value.setdefault(json.dumps(r[key]), []).append(r["aia"])
    return [(json.loads(v), float(np.mean(a))) for v, a in by_value.items()]


def sweep_table(rows: list[dict], keys: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point", "seed", *keys, "aia", "fia", "fingerprint"])
    for r in rows:
        writer.writerow([r["point"], r["seed"], *(json.dumps(r[k]) for k in keys),
                         f"{r['aia']:.6f}", f"{r['fia']:.6f}", r["fingerprint"]])
    return buf.getvalue()
