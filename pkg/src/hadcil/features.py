"""Snippet-level feature storage.

A dataset directory holds ``manifest.json`` and a single ``features.f32``
blob. Each record is ``K * D_a`` audio values followed by ``K * D_v``
visual values, little-endian float32, snippet-major.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "valid", "test")
_DTYPE = np.dtype("<f4")

# Extractor output shapes of the real pipeline (VGGish, ResNet-152 at 8 fps, 3D ResNet).
AUDIO_SHAPE = (10, 128)
FRAME2D_SHAPE = (80, 2048)
CLIP3D_SHAPE = (10, 512)


class DatasetError(ValueError):
    """Raised for malformed, inconsistent or corrupt datasets."""


@dataclass
class ModalFeatures:
    audio: np.ndarray
    visual: np.ndarray

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float32)
        self.visual = np.asarray(self.visual, dtype=np.float32)
        if self.audio.ndim != 2 or self.visual.ndim != 2:
            raise DatasetError("audio and visual must be K x D matrices")
        if self.audio.shape[0] != self.visual.shape[0] or self.audio.shape[0] < 1:
            raise DatasetError(
                f"snippet count mismatch: audio {self.audio.shape[0]}, visual {self.visual.shape[0]}"
            )
        if not (np.isfinite(self.audio).all() and np.isfinite(self.visual).all()):
            raise DatasetError("non-finite feature values")

    @property
    def num_snippets(self) -> int:
        return self.audio.shape[0]


@dataclass
class LabeledSample:
    id: str
    features: ModalFeatures
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    snippets_per_video: int
    audio_dim: int
    visual_dim: int
    records: list[dict] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    @property
    def record_floats(self) -> int:
        return self.snippets_per_video * (self.audio_dim + self.visual_dim)

    @property
    def record_bytes(self) -> int:
        return self.record_floats * _DTYPE.itemsize

    def validate(self) -> None:
        if min(self.num_classes, self.snippets_per_video, self.audio_dim, self.visual_dim) < 1:
            raise DatasetError("manifest dimensions must be >= 1")
        indices = sorted(r["record_index"] for r in self.records)
        if indices != list(range(len(self.records))):
            raise DatasetError("record_index values must be dense 0..N-1 and unique")
        ids = [r["id"] for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate record id")
        train_classes = set()
        for r in self.records:
            if r["split"] not in SPLITS:
                raise DatasetError(f"record {r['id']}: unknown split {r['split']!r}")
            if not 0 <= r["label"] < self.num_classes:
                raise DatasetError(f"record {r['id']}: label {r['label']} out of range")
            if r["split"] == "train":
                train_classes.add(r["label"])
        missing = set(range(self.num_classes)) - train_classes
        if missing:
            raise DatasetError(f"classes without train samples: {sorted(missing)}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        return cls(**data)


@dataclass
class SyntheticSpec:
    num_classes: int = 20
    train_per_class: int = 30
    valid_per_class: int = 10
    test_per_class: int = 10
    snippets: int = 10
    audio_dim: int = 16
    visual_dim: int = 24
    class_separation: float = 1.0
    temporal_smoothing: float = 0.5
    cross_modal_coupling: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        counts = (self.num_classes, self.train_per_class, self.valid_per_class,
                  self.test_per_class, self.snippets, self.audio_dim, self.visual_dim)
        if min(counts) < 1:
            raise ValueError("all SyntheticSpec counts must be >= 1")
        if not self.class_separation >= 0:
            raise ValueError("class_separation must be >= 0")
        if not 0.0 <= self.temporal_smoothing <= 1.0:
            raise ValueError("temporal_smoothing must lie in [0, 1]")
        if not 0.0 <= self.cross_modal_coupling <= 1.0:
            raise ValueError("cross_modal_coupling must lie in [0, 1]")


def _encode(features: ModalFeatures) -> bytes:
    return (
        features.audio.astype(_DTYPE, copy=False).tobytes()
        + features.visual.astype(_DTYPE, copy=False).tobytes()
    )


def write_dataset(manifest: DatasetManifest, samples: Sequence[LabeledSample], directory) -> None:
    if len(samples) == 0:
        raise DatasetError("empty dataset")
    if len(samples) != len(manifest.records):
        raise DatasetError(
            f"manifest lists {len(manifest.records)} records but {len(samples)} samples given"
        )
    manifest.validate()
    k, da, dv = manifest.snippets_per_video, manifest.audio_dim, manifest.visual_dim
    order = sorted(manifest.records, key=lambda r: r["record_index"])
    for rec, sample in zip(order, samples):
        if rec["id"] != sample.id:
            raise DatasetError(f"sample {sample.id}: out of manifest order (expected {rec['id']})")
        if sample.features.audio.shape != (k, da) or sample.features.visual.shape != (k, dv):
            raise DatasetError(
                f"sample {sample.id}: dimension mismatch, audio {sample.features.audio.shape} "
                f"visual {sample.features.visual.shape}, manifest expects ({k}, {da}) / ({k}, {dv})"
            )

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "features.f32", "wb") as fh:
        for sample in samples:
            fh.write(_encode(sample.features))
    (directory / "manifest.json").write_text(
        json.dumps(manifest.to_json(), indent=1), encoding="utf-8"
    )


class FeatureStore:
    """Lazy record access over a memory-mapped ``features.f32``."""

    def __init__(self, manifest: DatasetManifest, path: Path):
        self.manifest = manifest
        self.path = path
        n = len(manifest.records)
        self._data = np.memmap(path, dtype=_DTYPE, mode="r", shape=(n, manifest.record_floats))
        self._by_index = sorted(manifest.records, key=lambda r: r["record_index"])

    def __len__(self) -> int:
        return len(self._by_index)

    def _split_row(self, row: np.ndarray) -> ModalFeatures:
        m = self.manifest
        cut = m.snippets_per_video * m.audio_dim
        audio = np.array(row[:cut]).reshape(m.snippets_per_video, m.audio_dim)
        visual = np.array(row[cut:]).reshape(m.snippets_per_video, m.visual_dim)
        return ModalFeatures(audio, visual)

    def __getitem__(self, record_index: int) -> LabeledSample:
        rec = self._by_index[record_index]
        return LabeledSample(rec["id"], self._split_row(self._data[record_index]),
                             rec["label"], rec["split"])

    def arrays(self, split: str | None = None):
        """Stack a split into ``(ids, audio[N,K,Da], visual[N,K,Dv], labels[N])``."""
        m = self.manifest
        rows = [r for r in self._by_index if split is None or r["split"] == split]
        idx = np.array([r["record_index"] for r in rows], dtype=np.int64)
        block = np.asarray(self._data[idx], dtype=np.float32) if len(idx) else np.zeros(
            (0, m.record_floats), np.float32)
        cut = m.snippets_per_video * m.audio_dim
        audio = block[:, :cut].reshape(-1, m.snippets_per_video, m.audio_dim)
        visual = block[:, cut:].reshape(-1, m.snippets_per_video, m.visual_dim)
        labels = np.array([r["label"] for r in rows], dtype=np.int64)
        return [r["id"] for r in rows], audio, visual, labels


def read_dataset(directory) -> tuple[DatasetManifest, FeatureStore]:
    directory = Path(directory)
    try:
        data = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest.json in {directory}") from exc
    manifest = DatasetManifest.from_json(data)
    manifest.validate()
    blob = directory / "features.f32"
    expected = manifest.record_bytes * len(manifest.records)
    actual = blob.stat().st_size if blob.exists() else 0
    if actual != expected:
        raise DatasetError(f"corrupt dataset: expected {expected} bytes, found {actual}")
    return manifest, FeatureStore(manifest, blob)


def _ar1_noise(rng: np.random.Generator, k: int, dim: int, rho: float) -> np.ndarray:
    # stationary unit-variance AR(1) along the snippet axis
    eps = rng.standard_normal((k, dim))
    out = np.empty_like(eps)
    out[0] = eps[0]
    scale = np.sqrt(1.0 - rho * rho)
    for t in range(1, k):
        out[t] = rho * out[t - 1] + scale * eps[t]
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetManifest, list[LabeledSample]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    anchors_a = rng.standard_normal((spec.num_classes, spec.audio_dim)) * spec.class_separation
    anchors_v = rng.standard_normal((spec.num_classes, spec.visual_dim)) * spec.class_separation

    per_split = {"train": spec.train_per_class, "valid": spec.valid_per_class,
                 "test": spec.test_per_class}
    samples, records = [], []
    for split in SPLITS:
        for c in range(spec.num_classes):
            for j in range(per_split[split]):
                latent = rng.standard_normal() * spec.cross_modal_coupling
                audio = anchors_a[c] + _ar1_noise(rng, spec.snippets, spec.audio_dim,
                                                  spec.temporal_smoothing) + latent
                visual = anchors_v[c] + _ar1_noise(rng, spec.snippets, spec.visual_dim,
                                                   spec.temporal_smoothing) + latent
                sid = f"{split}-c{c:03d}-{j:04d}"
                records.append({"id": sid, "label": c, "split": split,
                                "record_index": len(records)})
                samples.append(LabeledSample(sid, ModalFeatures(audio, visual), c, split))

    manifest = DatasetManifest(
        name=f"synthetic-{spec.num_classes}c-seed{spec.seed}",
        num_classes=spec.num_classes,
        snippets_per_video=spec.snippets,
        audio_dim=spec.audio_dim,
        visual_dim=spec.visual_dim,
        records=records,
    )
    return manifest, samples


def pool_frames(frames: np.ndarray, snippets: int) -> np.ndarray:
    """Mean-pool ``snippets * r`` frame rows into ``snippets`` rows."""
    n, dim = frames.shape
    if n % snippets:
        raise DatasetError(f"{n} frames do not divide into {snippets} snippets")
    return frames.reshape(snippets, n // snippets, dim).mean(axis=1)


def _read_labels(labels_file) -> list[dict]:
    with open(labels_file, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["label"] = int(row["label"])
        row.setdefault("split", "train")
    return rows


def ingest_precomputed(audio_dir, visual2d_dir, visual3d_dir, labels_file, out_dir,
                       name: str = "ingested",
                       audio_shape: tuple[int, int] = AUDIO_SHAPE,
                       frame2d_shape: tuple[int, int] = FRAME2D_SHAPE,
                       clip3d_shape: tuple[int, int] = CLIP3D_SHAPE,
                       ) -> tuple[DatasetManifest, dict[str, str]]:
    """Convert per-video ``<id>.npy`` extractor outputs into a dataset directory.

    ``labels_file`` is a CSV with columns ``id,label,split``. 2D frame
    features are mean-pooled per snippet and concatenated with the 3D
    features. Videos with unexpected shapes are skipped; the returned dict
    maps each skipped id to its reason.
    """
    k = audio_shape[0]
    if clip3d_shape[0] != k:
        raise ValueError("audio and 3D features must share the snippet count")
    visual_dim = frame2d_shape[1] + clip3d_shape[1]
    skipped: dict[str, str] = {}
    samples: list[LabeledSample] = []
    for row in _read_labels(labels_file):
        vid = row["id"]
        try:
            audio = np.load(Path(audio_dir) / f"{vid}.npy")
            frames = np.load(Path(visual2d_dir) / f"{vid}.npy")
            clips = np.load(Path(visual3d_dir) / f"{vid}.npy")
        except OSError as exc:
            skipped[vid] = f"missing file: {exc}"
            continue
        bad = [(what, arr.shape, want) for what, arr, want in
               (("audio", audio, audio_shape), ("2d", frames, frame2d_shape),
                ("3d", clips, clip3d_shape)) if tuple(arr.shape) != tuple(want)]
        if bad:
            skipped[vid] = "; ".join(f"{w} shape {tuple(s)} != {tuple(e)}" for w, s, e in bad)
            continue
        visual = np.concatenate([pool_frames(frames.astype(np.float64), k), clips], axis=1)
        samples.append(LabeledSample(vid, ModalFeatures(audio, visual), row["label"], row["split"]))

    for vid, reason in skipped.items():
        logger.warning("skipping %s: %s", vid, reason)
    if not samples:
        raise DatasetError("empty dataset")
    num_classes = max(s.label for s in samples) + 1
    manifest = DatasetManifest(
        name=name, num_classes=num_classes, snippets_per_video=k,
        audio_dim=audio_shape[1], visual_dim=visual_dim,
        records=[{"id": s.id, "label": s.label, "split": s.split, "record_index": i}
                 for i, s in enumerate(samples)],
    )
    write_dataset(manifest, samples, out_dir)
    return manifest, skipped


def dataset_checksum(directory) -> str:
    h = hashlib.sha256()
    directory = Path(directory)
    for fname in ("manifest.json", "features.f32"):
        h.update((directory / fname).read_bytes())
    return h.hexdigest()


def iter_split(store: FeatureStore, split: str) -> Iterable[LabeledSample]:
    for i in range(len(store)):
        sample = store[i]
        if sample.split == split:
            yield sample
