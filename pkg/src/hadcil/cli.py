"""Command-line entry point: ``had <command> ...``.

Failures exit nonzero and print one line ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .features import (DatasetError, SyntheticSpec, dataset_checksum, generate_synthetic,
                       ingest_precomputed, read_dataset, write_dataset)
from .metrics import MetricsError, emit_report, recompute, to_percent
from .model import load_checkpoint
from .probes import probe_lipschitz, sweep
from .trainer import (ScheduleError, TrainingError, evaluate_counts, load_split,
                      run_from_config)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON config used as the base")
    p.add_argument("--out", type=Path, default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="had", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    for name, default in vars(SyntheticSpec()).items():
        if name == "seed":
            continue
        g.add_argument(f"--{name.replace('_', '-')}", type=type(default), default=default)

    i = sub.add_parser("ingest", parents=[common], help="convert extractor outputs")
    i.add_argument("--audio-dir", type=Path, required=True)
    i.add_argument("--visual2d-dir", type=Path, required=True)
    i.add_argument("--visual3d-dir", type=Path, required=True)
    i.add_argument("--labels", type=Path, required=True, help="CSV with id,label,split")
    i.add_argument("--name", default="ingested")

    t = sub.add_parser("train", parents=[common], help="run the incremental protocol")
    t.add_argument("--data", type=Path, default=None)
    t.add_argument("--preset", default=None)
    t.add_argument("--ablate", action="append", default=[],
                   help=f"one of: {', '.join(cfgmod.ABLATIONS)}")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--from-config", type=Path, default=None,
                   help="reproduce a run from its persisted config.json")

    e = sub.add_parser("eval", parents=[common], help="re-score a finished run")
    e.add_argument("run", type=Path)
    e.add_argument("--data", type=Path, default=None)

    r = sub.add_parser("report", parents=[common], help="curves and tables for runs")
    r.add_argument("runs", type=Path, nargs="+")
    r.add_argument("--names", nargs="+", default=None)

    pl = sub.add_parser("probe-lipschitz", parents=[common], help="perturbation probe on F")
    pl.add_argument("run", type=Path)
    pl.add_argument("--epsilon", type=float, default=1e-2)
    pl.add_argument("--n-samples", type=int, default=10)
    pl.add_argument("--data", type=Path, default=None)

    s = sub.add_parser("sweep", parents=[common], help="grid over config keys")
    s.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    s.add_argument("--seeds", default=None, help="comma-separated seeds")
    s.add_argument("--preset", default=None)
    s.add_argument("--data", type=Path, default=None)
    s.add_argument("--ablate", action="append", default=[])
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _split_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise UsageError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def resolve_config(args) -> dict:
    """defaults <- preset <- config file <- ablations <- --set <- explicit flags."""
    base_file = getattr(args, "from_config", None) or args.config
    cfg = cfgmod.make_config(getattr(args, "preset", None))
    if base_file is not None:
        cfg = cfgmod.merge(cfg, cfgmod.load_config(base_file))
    for name in getattr(args, "ablate", []):
        if name not in cfgmod.ABLATIONS:
            raise cfgmod.ConfigError(
                f"unknown ablation {name!r}; available: {', '.join(cfgmod.ABLATIONS)}")
        cfg.update(cfgmod.ABLATIONS[name])
    overrides = dict(_split_assignment(o) for o in getattr(args, "overrides", []))
    cfg = cfgmod.merge(cfg, {k: cfgmod.parse_value(v) for k, v in overrides.items()})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "data", None) is not None:
        cfg["data"] = str(Path(args.data).resolve())
    return cfg


def _require_out(args) -> Path:
    if args.out is None:
        raise UsageError("--out is required")
    return args.out


def cmd_generate(args) -> dict:
    out = _require_out(args)
    fields = {k: getattr(args, k) for k in vars(SyntheticSpec()) if k != "seed"}
    spec = SyntheticSpec(**fields, seed=args.seed if args.seed is not None else 0)
    manifest, samples = generate_synthetic(spec)
    write_dataset(manifest, samples, out)
    return {"dataset": str(out), "records": len(samples), "checksum": dataset_checksum(out)}


def cmd_ingest(args) -> dict:
    out = _require_out(args)
    manifest, skipped = ingest_precomputed(args.audio_dir, args.visual2d_dir, args.visual3d_dir,
                                           args.labels, out, name=args.name)
    return {"dataset": str(out), "records": len(manifest.records), "skipped": skipped}


def cmd_train(args) -> dict:
    out = _require_out(args)
    cfg = resolve_config(args)
    result = run_from_config(cfg, out)
    return {"run": str(out), "aia": result.metrics.aia, "fia": result.metrics.fia,
            "ia": list(result.metrics.ia), "fingerprint": cfgmod.fingerprint(cfg)}


def _final_checkpoint(run: Path) -> Path:
    phases = sorted(run.glob("phase_*"), key=lambda p: int(p.name.split("_")[1]))
    if not phases:
        raise MetricsError(f"no phase checkpoints in {run}")
    return phases[-1] / "checkpoint"


def _run_context(run: Path, data: Path | None):
    cfg = cfgmod.load_config(run / "config.json")
    summary = json.loads((run / "summary.json").read_text(encoding="utf-8"))
    model, _ = load_checkpoint(_final_checkpoint(run))
    manifest, store = read_dataset(data or cfg["data"])
    order = np.asarray(summary["class_order"])
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return cfg, summary, model, store, remap


def cmd_eval(args) -> dict:
    cfg, summary, model, store, remap = _run_context(args.run, args.data)
    test = load_split(store, "test", remap)
    correct, total = evaluate_counts(model, test.where(test.labels < model.num_classes))
    fia = to_percent(correct, total)
    from_log = recompute(args.run)
    result = {"fia": fia, "fia_summary": summary["fia"], "aia_log": from_log.aia,
              "aia_summary": summary["aia"], "fia_log": from_log.fia,
              "consistent": abs(fia - summary["fia"]) <= 1e-6
              and abs(from_log.aia - summary["aia"]) <= 1e-6}
    out = args.out or args.run / "eval.json"
    Path(out).write_text(json.dumps(result, indent=1), encoding="utf-8")
    return result


def cmd_report(args) -> dict:
    out = _require_out(args)
    files = emit_report(args.runs, out, args.names)
    return {"files": [str(f) for f in files]}


def cmd_probe(args) -> dict:
    cfg, _, model, store, remap = _run_context(args.run, args.data)
    train = load_split(store, "train", remap)
    seed = cfg["seed"] if args.seed is None else args.seed
    report = probe_lipschitz(model, train.audio, train.visual, args.epsilon, args.n_samples,
                             np.random.default_rng(seed))
    out = args.out or args.run / "probe.json"
    Path(out).write_text(json.dumps(report.to_json(), indent=1), encoding="utf-8")
    return {"probe": str(out), "mean": report.mean,
            "fraction_exceeding": report.fraction_exceeding}


def cmd_sweep(args) -> dict:
    out = _require_out(args)
    cfg = resolve_config(args)
    grid = {}
    for item in args.grid:
        key, values = _split_assignment(item)
        grid[key] = [cfgmod.parse_value(v) for v in values.split(",") if v != ""]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = sweep(cfg, grid, seeds, out)
    return {"sweep": str(out / "sweep.csv"), "runs": len(rows)}


COMMANDS = {
    "generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
    "report": cmd_report, "probe-lipschitz": cmd_probe, "sweep": cmd_sweep,
}

_CATEGORIES = (
    (UsageError, "usage", 2),
    (cfgmod.ConfigError, "config", 2),
    (ScheduleError, "schedule", 2),
    (DatasetError, "dataset", 1),
    (MetricsError, "metrics", 1),
    (TrainingError, "training", 1),
    (OSError, "io", 1),
    (ValueError, "value", 1),
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = COMMANDS[args.command](args)
    except Exception as exc:  # mapped to one machine-parsable line
        for kind, category, code in _CATEGORIES:
            if isinstance(exc, kind):
                break
        else:
            category, code = "internal", 1
        message = " ".join(str(exc).split())
        print(f"error: {category}: {message}", file=sys.stderr)
        return code
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
