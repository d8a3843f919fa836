"""Segmental feature augmentation with split gradient routing.

Low-level (snippet feature) augmentation trains only the fusion network;
high-level (video feature) augmentation trains only the classifier. With
``routing=False`` both stop-gradients are removed (the HAD-N ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.func import functional_call

from .model import AVModel, FeatureBatch


@dataclass
class AugmentationConfig:
    lam: float = 0.05
    generator: torch.Generator = field(default_factory=torch.Generator)

    def __post_init__(self):
        if not (self.lam >= 0 and self.lam != float("inf")):
            raise ValueError(f"augmentation intensity must be finite and >= 0, got {self.lam}")

    @classmethod
    def seeded(cls, lam: float, seed: int) -> "AugmentationConfig":
        gen = torch.Generator()
        gen.manual_seed(seed)
        return cls(lam, gen)


def _noise_like(x: torch.Tensor, cfg: AugmentationConfig) -> torch.Tensor:
    return torch.randn(x.shape, generator=cfg.generator, dtype=x.dtype)


def augment_low(batch: FeatureBatch, cfg: AugmentationConfig) -> FeatureBatch:
    """f + lam * z with independent draws per element and per modality."""
    if cfg.lam == 0:
        return FeatureBatch(batch.audio.clone(), batch.visual.clone(), batch.labels)
    return FeatureBatch(batch.audio + cfg.lam * _noise_like(batch.audio, cfg),
                        batch.visual + cfg.lam * _noise_like(batch.visual, cfg),
                        batch.labels)


def augment_high(video: torch.Tensor, cfg: AugmentationConfig) -> torch.Tensor:
    if cfg.lam == 0:
        return video.clone()
    return video + cfg.lam * _noise_like(video, cfg)


def _frozen_classifier(model: AVModel, video: torch.Tensor) -> torch.Tensor:
    params = {n: p.detach() for n, p in model.classifier.named_parameters()}
    return functional_call(model.classifier, params, (video,))


def _zero(model: AVModel) -> torch.Tensor:
    return torch.zeros((), dtype=model.dtype)


def loss_lsm(model: AVModel, memory: FeatureBatch, cfg: AugmentationConfig, *,
             augmented: FeatureBatch | None = None, routing: bool = True,
             skipped: set | None = None) -> torch.Tensor:
    """Cross-entropy of low-level augmented exemplars through a constant classifier.

    ``augmented`` lets callers reuse one noise draw across losses.
    """
    if len(memory) == 0:
        if skipped is not None:
            skipped.add("lsm")
        return _zero(model)
    if augmented is None:
        augmented = augment_low(memory, cfg)
    video = model.fuse(augmented).video
    logits = _frozen_classifier(model, video) if routing else model.classify(video)
    return F.cross_entropy(logits, memory.labels)


def loss_hsm(model: AVModel, memory: FeatureBatch, cfg: AugmentationConfig, *,
             routing: bool = True, skipped: set | None = None) -> torch.Tensor:
    if len(memory) == 0:
        if skipped is not None:
            skipped.add("hsm")
        return _zero(model)
    video = model.fuse(memory).video
    if routing:
        video = video.detach()
    return F.cross_entropy(model.classify(augment_high(video, cfg)), memory.labels)


def loss_ham(model: AVModel, memory: FeatureBatch, cfg: AugmentationConfig, *,
             low_level: bool = True, high_level: bool = True, routing: bool = True,
             augmented: FeatureBatch | None = None,
             skipped: set | None = None) -> torch.Tensor:
    lsm = hsm = _zero(model)
    if low_level:
        lsm = loss_lsm(model, memory, cfg, augmented=augmented, routing=routing, skipped=skipped)
    elif skipped is not None:
        skipped.add("lsm")
    if high_level:
        hsm = loss_hsm(model, memory, cfg, routing=routing, skipped=skipped)
    elif skipped is not None:
        skipped.add("hsm")
    return lsm + hsm
