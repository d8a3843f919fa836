"""Audio-visual fusion network and incremental classifier head.

The trainable model is split into a fusion partition (``fusion.*``) and a
classifier partition (``classifier.*``); the augmentation losses route
gradients to exactly one of them.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .features import ModalFeatures

COSINE_EPS = 1e-8
COSINE_INIT_SCALE = 10.0


def _rowwise_dot(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    # per-class reduction so existing logits stay bit-identical when rows are appended
    return (x.unsqueeze(-2) * weight).sum(dim=-1)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    audio_dim: int
    visual_dim: int
    snippets: int
    d_model: int = 64
    num_heads: int = 4
    head: str = "cosine"
    positional: bool = True

    def __post_init__(self):
        if min(self.audio_dim, self.visual_dim, self.snippets, self.d_model, self.num_heads) < 1:
            raise ContractError("all FusionConfig sizes must be >= 1")
        if self.d_model % self.num_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.head not in ("cosine", "linear"):
            raise ContractError(f"unknown head {self.head!r}")


@dataclass
class FusionOutputs:
    audio_snippets: torch.Tensor  # (B, K, d)
    visual_snippets: torch.Tensor
    audio_video: torch.Tensor  # (B, d)
    visual_video: torch.Tensor
    video: torch.Tensor

    def modality(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(snippet features, video feature) for ``"a"`` or ``"v"``."""
        if name == "a":
            return self.audio_snippets, self.audio_video
        if name == "v":
            return self.visual_snippets, self.visual_video
        raise ValueError(f"unknown modality {name!r}")


@dataclass
class FeatureBatch:
    audio: torch.Tensor  # (B, K, Da)
    visual: torch.Tensor  # (B, K, Dv)
    labels: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.audio.shape[0]

    @classmethod
    def from_numpy(cls, audio, visual, labels=None, dtype=torch.float32) -> "FeatureBatch":
        return cls(
            torch.as_tensor(np.asarray(audio), dtype=dtype),
            torch.as_tensor(np.asarray(visual), dtype=dtype),
            None if labels is None else torch.as_tensor(np.asarray(labels), dtype=torch.long),
        )

    @classmethod
    def from_features(cls, items, labels=None, dtype=torch.float32) -> "FeatureBatch":
        items = list(items)
        return cls.from_numpy(np.stack([f.audio for f in items]),
                              np.stack([f.visual for f in items]), labels, dtype)

    def cat(self, other: "FeatureBatch") -> "FeatureBatch":
        labels = None
        if self.labels is not None and other.labels is not None:
            labels = torch.cat([self.labels, other.labels])
        return FeatureBatch(torch.cat([self.audio, other.audio]),
                            torch.cat([self.visual, other.visual]), labels)

    def to(self, dtype) -> "FeatureBatch":
        return FeatureBatch(self.audio.to(dtype), self.visual.to(dtype), self.labels)


class Attention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, kq, d = query.shape
        h = self.num_heads
        dh = d // h
        q = self.q(query).view(b, kq, h, dh).transpose(1, 2)
        k = self.k(context).view(b, -1, h, dh).transpose(1, 2)
        v = self.v(context).view(b, -1, h, dh).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, kq, d)
        return self.out(mixed)


class HybridAttentionFusion(nn.Module):
    """One pre-norm block per modality: self-attention then cross-attention."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.proj_a = nn.Linear(cfg.audio_dim, d)
        self.proj_v = nn.Linear(cfg.visual_dim, d)
        self.pos_a = nn.Parameter(torch.randn(cfg.snippets, d) * 0.02)
        self.pos_v = nn.Parameter(torch.randn(cfg.snippets, d) * 0.02)
        self.norm_self_a = nn.LayerNorm(d)
        self.norm_self_v = nn.LayerNorm(d)
        self.norm_cross_a = nn.LayerNorm(d)
        self.norm_cross_v = nn.LayerNorm(d)
        self.self_a = Attention(d, cfg.num_heads)
        self.self_v = Attention(d, cfg.num_heads)
        self.cross_a = Attention(d, cfg.num_heads)
        self.cross_v = Attention(d, cfg.num_heads)

    def forward(self, audio: torch.Tensor, visual: torch.Tensor) -> FusionOutputs:
        a = self.proj_a(audio)
        v = self.proj_v(visual)
        if self.cfg.positional:
            a = a + self.pos_a
            v = v + self.pos_v
        na = self.norm_self_a(a)
        nv = self.norm_self_v(v)
        a = a + self.self_a(na, na)
        v = v + self.self_v(nv, nv)
        ca = self.norm_cross_a(a)
        cv = self.norm_cross_v(v)
        a, v = a + self.cross_a(ca, cv), v + self.cross_v(cv, ca)
        ha = a.mean(dim=1)
        hv = v.mean(dim=1)
        return FusionOutputs(a, v, ha, hv, ha + hv)


class CosineClassifier(nn.Module):
    def __init__(self, d_model: int, num_classes: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, d_model) / math.sqrt(d_model))
        # scale kept positive through a log parameterisation
        self.log_scale = nn.Parameter(torch.tensor(math.log(COSINE_INIT_SCALE)))

    @property
    def scale(self) -> torch.Tensor:
        return self.log_scale.exp()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xn = x / x.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
        wn = self.weight / self.weight.norm(dim=-1, keepdim=True).clamp_min(COSINE_EPS)
        return self.scale * _rowwise_dot(xn, wn)

    def expand(self, n_new: int, generator: torch.Generator | None = None) -> None:
        d = self.weight.shape[1]
        rows = torch.randn(n_new, d, generator=generator, dtype=self.weight.dtype) / math.sqrt(d)
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), rows]))


class LinearClassifier(nn.Module):
    def __init__(self, d_model: int, num_classes: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, d_model) / math.sqrt(d_model))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _rowwise_dot(x, self.weight) + self.bias

    def expand(self, n_new: int, generator: torch.Generator | None = None) -> None:
        d = self.weight.shape[1]
        rows = torch.randn(n_new, d, generator=generator, dtype=self.weight.dtype) / math.sqrt(d)
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), rows]))
        self.bias = nn.Parameter(torch.cat([self.bias.detach(),
                                            torch.zeros(n_new, dtype=self.bias.dtype)]))


@dataclass
class ParameterPartition:
    fusion: dict[str, nn.Parameter]
    classifier: dict[str, nn.Parameter]

    def fusion_flat(self) -> torch.Tensor:
        return torch.cat([p.reshape(-1) for p in self.fusion.values()])

    def classifier_flat(self) -> torch.Tensor:
        return torch.cat([p.reshape(-1) for p in self.classifier.values()])


class AVModel(nn.Module):
    def __init__(self, cfg: FusionConfig, num_classes: int = 0, seed: int | None = None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.fusion = HybridAttentionFusion(cfg)
            head = CosineClassifier if cfg.head == "cosine" else LinearClassifier
            self.classifier = head(cfg.d_model, num_classes)

    @property
    def num_classes(self) -> int:
        return self.classifier.weight.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.fusion.proj_a.weight.dtype

    def _check(self, audio: torch.Tensor, visual: torch.Tensor) -> None:
        c = self.cfg
        if audio.shape[1:] != (c.snippets, c.audio_dim) or visual.shape[1:] != (c.snippets, c.visual_dim):
            raise ContractError(
                f"feature dims {tuple(audio.shape[1:])}/{tuple(visual.shape[1:])} do not match "
                f"config ({c.snippets}, {c.audio_dim})/({c.snippets}, {c.visual_dim})"
            )

    def fuse(self, audio, visual=None) -> FusionOutputs:
        """Fuse a batch ``(B, K, D)`` pair, or a single ``ModalFeatures``."""
        if isinstance(audio, ModalFeatures):
            audio, visual = (torch.as_tensor(audio.audio, dtype=self.dtype)[None],
                             torch.as_tensor(audio.visual, dtype=self.dtype)[None])
        elif isinstance(audio, FeatureBatch):
            audio, visual = audio.audio, audio.visual
        self._check(audio, visual)
        return self.fusion(audio, visual)

    def classify(self, video: torch.Tensor) -> torch.Tensor:
        if video.shape[-1] != self.cfg.d_model:
            raise ContractError(f"video feature width {video.shape[-1]} != {self.cfg.d_model}")
        return self.classifier(video)

    def forward(self, audio, visual=None) -> torch.Tensor:
        return self.classify(self.fuse(audio, visual).video)

    def expand_classes(self, n_new: int, generator: torch.Generator | None = None) -> None:
        if n_new < 1:
            raise ContractError(f"expand_classes needs n_new >= 1, got {n_new}")
        self.classifier.expand(n_new, generator)

    def partition(self) -> ParameterPartition:
        fusion = {f"fusion.{n}": p for n, p in self.fusion.named_parameters()}
        classifier = {f"classifier.{n}": p for n, p in self.classifier.named_parameters()}
        return ParameterPartition(fusion, classifier)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)


class ModelSnapshot:
    """Frozen copy of an ``AVModel``; forwards never build a graph."""

    def __init__(self, model: AVModel):
        frozen = copy.deepcopy(model)
        frozen.requires_grad_(False)
        frozen.eval()
        self._model = frozen
        self.cfg = model.cfg
        self.num_classes = model.num_classes

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v.clone() for k, v in self._model.state_dict().items()}

    @property
    def dtype(self) -> torch.dtype:
        return self._model.dtype

    def to(self, dtype) -> "ModelSnapshot":
        self._model.to(dtype)
        return self

    @torch.no_grad()
    def fuse(self, audio, visual=None) -> FusionOutputs:
        return self._model.fuse(audio, visual)

    @torch.no_grad()
    def classify(self, video: torch.Tensor) -> torch.Tensor:
        return self._model.classify(video)

    @torch.no_grad()
    def forward(self, audio, visual=None) -> tuple[torch.Tensor, FusionOutputs]:
        out = self._model.fuse(audio, visual)
        return self._model.classify(out.video), out

    __call__ = forward


def forward_snapshot(snap: ModelSnapshot, audio, visual=None) -> tuple[torch.Tensor, FusionOutputs]:
    return snap.forward(audio, visual)


def save_checkpoint(model: AVModel, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = {}, [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.size
    meta = {"config": asdict(model.cfg), "num_classes": model.num_classes,
            "params": entries, "extra": extra or {}}
    (directory / "params.f32").write_bytes(b"".join(chunks))
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_checkpoint(directory) -> tuple[AVModel, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
    blob = np.frombuffer((directory / "params.f32").read_bytes(), dtype="<f4")
    model = AVModel(FusionConfig(**meta["config"]), num_classes=meta["num_classes"])
    state = {}
    for name, entry in meta["params"].items():
        size = int(np.prod(entry["shape"]))
        chunk = blob[entry["offset"]:entry["offset"] + size].reshape(entry["shape"])
        state[name] = torch.from_numpy(chunk.astype(np.float32))
    model.load_state_dict(state)
    return model, meta.get("extra", {})
