"""Phase-based class-incremental training protocol."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from . import config as cfgmod
from .features import FeatureStore, ModalFeatures, read_dataset
from .ham import AugmentationConfig, augment_low, loss_hsm, loss_lsm
from .hdm import hcd_terms, loss_dl, loss_sl
from .metrics import RunMetrics, aggregate, to_percent
from .model import AVModel, FeatureBatch, FusionConfig, ModelSnapshot, save_checkpoint

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSchedule:
    num_classes_total: int
    base_classes: int
    num_increments: int
    classes_per_increment: int
    memory_size: int
    class_order_seed: int = 0

    def __post_init__(self):
        if min(self.base_classes, self.classes_per_increment) < 1 or self.num_increments < 0:
            raise ScheduleError("base/increment sizes must be positive")
        expected = self.base_classes + self.num_increments * self.classes_per_increment
        if expected != self.num_classes_total:
            raise ScheduleError(
                f"base {self.base_classes} + {self.num_increments} x "
                f"{self.classes_per_increment} = {expected} != total {self.num_classes_total}"
            )
        if self.memory_size < 0:
            raise ScheduleError("memory size must be >= 0")

    @property
    def num_phases(self) -> int:
        return 1 + self.num_increments

    def phase_bounds(self) -> list[tuple[int, int]]:
        """Half-open ranges of ordered class positions introduced by each phase."""
        bounds = [(0, self.base_classes)]
        for i in range(self.num_increments):
            lo = self.base_classes + i * self.classes_per_increment
            bounds.append((lo, lo + self.classes_per_increment))
        return bounds

    def class_order(self) -> np.ndarray:
        return np.random.default_rng(self.class_order_seed).permutation(self.num_classes_total)


# (total, base, increments, per increment, memory)
SCHEDULE_PRESETS: dict[str, tuple[int, int, int, int, int]] = {
    "ave-3": (28, 10, 3, 6, 140),
    "ave-6": (28, 10, 6, 3, 140),
    "avk100-5": (100, 50, 5, 10, 1000),
    "avk100-10": (100, 50, 10, 5, 1000),
    "avk200-10": (200, 100, 10, 10, 2000),
    "avk200-20": (200, 100, 20, 5, 2000),
    "avk400-20": (400, 200, 20, 10, 4000),
    "avk400-40": (400, 200, 40, 5, 4000),
    "synthetic-4": (20, 8, 3, 4, 40),
}


def build_schedule(preset: str | None = None, *, num_classes_total: int | None = None,
                   base_classes: int | None = None, num_increments: int | None = None,
                   classes_per_increment: int | None = None, memory_size: int | None = None,
                   class_order_seed: int = 0) -> TaskSchedule:
    if preset is not None:
        if preset not in SCHEDULE_PRESETS:
            raise ScheduleError(
                f"unknown schedule preset {preset!r}; available: {', '.join(SCHEDULE_PRESETS)}")
        total, base, inc, per, mem = SCHEDULE_PRESETS[preset]
        return TaskSchedule(total, base, inc, per, mem if memory_size is None else memory_size,
                            class_order_seed)
    values = (num_classes_total, base_classes, num_increments, classes_per_increment, memory_size)
    if any(v is None for v in values):
        raise ScheduleError("explicit schedule needs total, base, increments, per-increment, memory")
    return TaskSchedule(*values, class_order_seed=class_order_seed)


def schedule_from_config(cfg: dict, num_classes_total: int | None = None) -> TaskSchedule:
    seed = cfg["schedule.class_order_seed"]
    seed = cfg["seed"] if seed is None else seed
    return build_schedule(
        cfg["schedule.preset"], num_classes_total=num_classes_total,
        base_classes=cfg["schedule.base_classes"], num_increments=cfg["schedule.num_increments"],
        classes_per_increment=cfg["schedule.classes_per_increment"],
        memory_size=cfg["schedule.memory_size"], class_order_seed=seed)


@dataclass
class TaskData:
    ids: list[str]
    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "TaskData":
        idx = np.asarray(idx, dtype=np.int64)
        return TaskData([self.ids[i] for i in idx], self.audio[idx], self.visual[idx],
                        self.labels[idx])

    def where(self, mask) -> "TaskData":
        return self.subset(np.flatnonzero(mask))

    def batch(self, idx=None, dtype=torch.float32) -> FeatureBatch:
        if idx is None:
            return FeatureBatch.from_numpy(self.audio, self.visual, self.labels, dtype)
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureBatch.from_numpy(self.audio[idx], self.visual[idx], self.labels[idx], dtype)


@dataclass
class MemoryEntry:
    id: str
    features: ModalFeatures
    label: int


class MemoryBank:
    def __init__(self, capacity: int, entries: list[MemoryEntry] | None = None):
        self.capacity = capacity
        self.entries = list(entries or [])
        if len(self.entries) > capacity:
            raise ValueError(f"{len(self.entries)} entries exceed capacity {capacity}")
        self._stacked = None

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.label] = counts.get(e.label, 0) + 1
        return dict(sorted(counts.items()))

    def by_class(self) -> dict[int, list[MemoryEntry]]:
        out: dict[int, list[MemoryEntry]] = {}
        for e in self.entries:
            out.setdefault(e.label, []).append(e)
        return out

    def as_task_data(self) -> TaskData:
        if self._stacked is None:
            self._stacked = TaskData(
                [e.id for e in self.entries],
                np.stack([e.features.audio for e in self.entries]),
                np.stack([e.features.visual for e in self.entries]),
                np.array([e.label for e in self.entries], dtype=np.int64))
        return self._stacked


def allocate_quotas(capacity: int, available: dict[int, int]) -> dict[int, int]:
    """Split ``capacity`` evenly over classes in index order, capped by availability.

    Remainder slots go to the lowest class indices. Slack from classes that
    cannot fill their quota is handed out one slot at a time, always to the
    open class holding the fewest (ties to the lowest index), so unconstrained
    classes stay within one of each other.
    """
    classes = sorted(available)
    if not classes:
        return {}
    base, extra = divmod(capacity, len(classes))
    quota = {c: min(base + (i < extra), available[c]) for i, c in enumerate(classes)}
    slack = capacity - sum(quota.values())
    while slack > 0:
        open_ = [c for c in classes if quota[c] < available[c]]
        if not open_:
            break
        quota[min(open_, key=lambda c: (quota[c], c))] += 1
        slack -= 1
    return quota


def update_memory(bank: MemoryBank, new_task: TaskData, rng: np.random.Generator) -> MemoryBank:
    old = bank.by_class()
    new_idx: dict[int, np.ndarray] = {}
    for c in np.unique(new_task.labels):
        if int(c) in old:
            raise ValueError(f"class {int(c)} already in memory")
        new_idx[int(c)] = np.flatnonzero(new_task.labels == c)
    available = {c: len(v) for c, v in old.items()}
    available.update({c: len(v) for c, v in new_idx.items()})
    quota = allocate_quotas(bank.capacity, available)

    entries: list[MemoryEntry] = []
    for c in sorted(quota):
        if c in old:
            keep = np.sort(rng.choice(len(old[c]), quota[c], replace=False))
            entries.extend(old[c][i] for i in keep)
        else:
            pick = np.sort(rng.choice(new_idx[c], quota[c], replace=False))
            entries.extend(
                MemoryEntry(new_task.ids[i],
                            ModalFeatures(new_task.audio[i], new_task.visual[i]), c)
                for i in pick)
    return MemoryBank(bank.capacity, entries)


def build_batches(task: TaskData, bank: MemoryBank, batch_size: int, rng: np.random.Generator,
                  dtype=torch.float32) -> Iterator[tuple[FeatureBatch, FeatureBatch]]:
    """One epoch of ``(current, exemplar)`` batch pairs.

    The exemplar batch is half stored old-class exemplars and half a fresh
    draw of current-task samples; it is empty while the bank is empty.
    """
    order = rng.permutation(len(task))
    stored = bank.as_task_data() if len(bank) else None
    for start in range(0, len(task), batch_size):
        current = task.batch(order[start:start + batch_size], dtype)
        if stored is None:
            exemplar = task.batch(np.zeros(0, dtype=np.int64), dtype)
        else:
            n = min(batch_size // 2, len(stored), len(task))
            old = stored.batch(rng.choice(len(stored), n, replace=False), dtype)
            fresh = task.batch(rng.choice(len(task), n, replace=False), dtype)
            exemplar = old.cat(fresh)
        yield current, exemplar


TERM_NAMES = ("cls", "lsm", "hsm", "sl", "dl", "ss_a", "ns_a", "ss_v", "ns_v")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 5.0
    gamma: float = 0.2
    eta: float = 25.0

    def __post_init__(self):
        for name in ("beta", "gamma", "eta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def combine(self, t: dict) -> object:
        return (t["cls"] + self.beta * (t["lsm"] + t["hsm"]) + self.gamma * (t["sl"] + t["dl"])
                + self.eta * (t["ss_a"] + t["ns_a"] + t["ss_v"] + t["ns_v"]))


@dataclass
class LossBreakdown:
    cls: float
    lsm: float
    hsm: float
    sl: float
    dl: float
    ss_a: float
    ns_a: float
    ss_v: float
    ns_v: float
    total: float
    skipped: frozenset = frozenset()

    def to_json(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "skipped"}
        out["skipped"] = sorted(self.skipped)
        return out


def mean_breakdown(history: list[LossBreakdown]) -> dict:
    if not history:
        return {}
    names = TERM_NAMES + ("total",)
    out = {n: float(np.mean([getattr(h, n) for h in history])) for n in names}
    out["skipped"] = sorted(set().union(*(h.skipped for h in history)))
    return out


def compute_losses(model: AVModel, snapshot: ModelSnapshot | None, current: FeatureBatch,
                   exemplar: FeatureBatch, cfg: dict,
                   generator: torch.Generator) -> tuple[dict, set]:
    """All objective terms for one step, with skipped terms set to zero."""
    zero = torch.zeros((), dtype=model.dtype)
    terms = {n: zero for n in TERM_NAMES}
    skipped: set[str] = set()
    terms["cls"] = F.cross_entropy(model(current), current.labels)

    aug = AugmentationConfig(cfg["lambda"], generator)
    ham_on = cfg["ham.enabled"] and len(exemplar) > 0
    augmented = None
    if len(exemplar) and ((ham_on and cfg["ham.low_level"]) or
                          (cfg["hcd.enabled"] and snapshot is not None)):
        augmented = augment_low(exemplar, aug)

    if ham_on and cfg["ham.low_level"]:
        terms["lsm"] = loss_lsm(model, exemplar, aug, augmented=augmented,
                                routing=cfg["ham.routing"])
    else:
        skipped.add("lsm")
    if ham_on and cfg["ham.high_level"]:
        terms["hsm"] = loss_hsm(model, exemplar, aug, routing=cfg["ham.routing"])
    else:
        skipped.add("hsm")

    if snapshot is not None and cfg["hld.enabled"] and len(exemplar):
        if cfg["hld.sld"]:
            terms["sl"] = loss_sl(model, snapshot, exemplar, current, skipped=skipped)
        else:
            skipped.add("sl")
        if cfg["hld.dld"]:
            terms["dl"] = loss_dl(model, snapshot, exemplar, current, n_draws=cfg["hld.n_draws"],
                                  generator=generator, skipped=skipped)
        else:
            skipped.add("dl")
    else:
        skipped.update(("sl", "dl"))

    if snapshot is not None and cfg["hcd.enabled"] and len(exemplar):
        terms.update(hcd_terms(model, snapshot, exemplar, augmented, current,
                               scd=cfg["hcd.scd"], vcd=cfg["hcd.vcd"], skipped=skipped))
    else:
        skipped.update(("ss_a", "ns_a", "ss_v", "ns_v"))
    return terms, skipped


def train_phase(model: AVModel, phase_data: TaskData, bank: MemoryBank,
                snapshot: ModelSnapshot | None, cfg: dict, rng: np.random.Generator,
                generator: torch.Generator) -> tuple[AVModel, list[LossBreakdown]]:
    weights = LossWeights(cfg["beta"], cfg["gamma"], cfg["eta"])
    betas = tuple(cfg["train.adam_betas"])
    opt = torch.optim.Adam(model.parameters(), lr=cfg["train.lr"], betas=betas,
                           eps=cfg["train.adam_eps"])
    history: list[LossBreakdown] = []
    model.train()
    step = 0
    for _ in range(cfg["train.epochs"]):
        for current, exemplar in build_batches(phase_data, bank, cfg["train.batch_size"], rng,
                                               model.dtype):
            terms, skipped = compute_losses(model, snapshot, current, exemplar, cfg, generator)
            total = weights.combine(terms)
            for name, value in list(terms.items()) + [("total", total)]:
                if not torch.isfinite(value):
                    raise TrainingError(f"non-finite loss term {name!r} at step {step}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            history.append(LossBreakdown(**{n: float(v.detach()) for n, v in terms.items()},
                                         total=float(total.detach()), skipped=frozenset(skipped)))
            step += 1
    model.eval()
    return model, history


@torch.no_grad()
def predict(model: AVModel, data: TaskData, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        out.append(model(data.batch(idx, model.dtype)).argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_counts(model: AVModel, data: TaskData) -> tuple[int, int]:
    pred = predict(model, data)
    return int((pred == data.labels).sum()), len(data)


@dataclass
class RunResult:
    metrics: RunMetrics
    class_order: list[int]
    phase_records: list[dict]
    model: AVModel
    bank: MemoryBank


def load_split(store: FeatureStore, split: str, remap: np.ndarray) -> TaskData:
    ids, audio, visual, labels = store.arrays(split)
    return TaskData(ids, audio, visual, remap[labels])


def _seeds(seed: int):
    ss = np.random.SeedSequence(seed)
    init, torch_seed, data = ss.spawn(3)
    return (int(init.generate_state(1)[0]), int(torch_seed.generate_state(1)[0]),
            np.random.default_rng(data))


def run_incremental(dataset, schedule: TaskSchedule, cfg: dict,
                    run_dir=None) -> RunResult:
    """Train over every phase of ``schedule`` and score IA after each one.

    ``dataset`` is a dataset directory or a ``(manifest, store)`` pair.
    Labels are remapped to positions in the seeded class order, so the
    classifier row for position ``p`` belongs to original class ``order[p]``.
    """
    manifest, store = read_dataset(dataset) if isinstance(dataset, (str, Path)) else dataset
    if manifest.num_classes != schedule.num_classes_total:
        raise ScheduleError(f"dataset has {manifest.num_classes} classes, schedule expects "
                            f"{schedule.num_classes_total}")
    order = schedule.class_order()
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    train = load_split(store, "train", remap)
    test = load_split(store, "test", remap)

    init_seed, torch_seed, rng = _seeds(cfg["seed"])
    generator = torch.Generator()
    generator.manual_seed(torch_seed)
    fcfg = FusionConfig(audio_dim=manifest.audio_dim, visual_dim=manifest.visual_dim,
                        snippets=manifest.snippets_per_video, d_model=cfg["model.d_model"],
                        num_heads=cfg["model.num_heads"], head=cfg["model.head"],
                        positional=cfg["model.positional"])
    model = AVModel(fcfg, num_classes=0, seed=init_seed)
    bank = MemoryBank(schedule.memory_size)

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfgmod.save_config(cfg, run_dir / "config.json")
        (run_dir / "metrics.jsonl").write_text("", encoding="utf-8")

    records, ia = [], []
    for t, (lo, hi) in enumerate(schedule.phase_bounds(), start=1):
        snapshot = model.snapshot() if t > 1 else None
        model.expand_classes(hi - lo, generator=generator)
        phase_data = train.where((train.labels >= lo) & (train.labels < hi))
        model, history = train_phase(model, phase_data, bank, snapshot, cfg, rng, generator)
        bank = update_memory(bank, phase_data, rng)
        correct, total = evaluate_counts(model, test.where(test.labels < hi))
        ia.append(to_percent(correct, total))
        record = {"phase": t, "ia": ia[-1], "correct": correct, "total": total,
                  "classes_seen": hi, "memory": len(bank), "loss": mean_breakdown(history)}
        records.append(record)
        logger.info("phase %d: IA %.2f%% on %d classes", t, ia[-1], hi)
        if run_dir is not None:
            save_checkpoint(model, run_dir / f"phase_{t}" / "checkpoint",
                            extra={"phase": t, "class_order": order.tolist()})
            with open(run_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    metrics = aggregate(ia)
    if run_dir is not None:
        group_cfg = {k: v for k, v in cfg.items() if k not in ("seed", "schedule.class_order_seed")}
        summary = {"aia": metrics.aia, "fia": metrics.fia, "ia": list(metrics.ia),
                   "seed": cfg["seed"], "schedule": asdict(schedule),
                   "class_order": order.tolist(), "fingerprint": cfgmod.fingerprint(cfg),
                   "group": cfgmod.fingerprint(group_cfg)}
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True),
                                              encoding="utf-8")
    return RunResult(metrics, order.tolist(), records, model, bank)


def run_from_config(cfg: dict, run_dir=None) -> RunResult:
    if cfg.get("data") is None:
        raise cfgmod.ConfigError("config has no dataset path ('data')")
    manifest, store = read_dataset(cfg["data"])
    schedule = schedule_from_config(cfg, manifest.num_classes)
    return run_incremental((manifest, store), schedule, cfg, run_dir)

