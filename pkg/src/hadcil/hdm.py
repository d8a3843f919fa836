"""Hierarchical distillation against a frozen previous-phase snapshot.

Logical terms (``sl``, ``dl``) match class probabilities restricted to the
snapshot's classes. Correlative terms (``ss``, ``ns``) match row-softmax
similarity matrices built per modality. Every KL is taken as
KL(teacher || student) and averaged over rows.
"""

from __future__ import annotations

import torch

from .model import AVModel, FeatureBatch, FusionOutputs, ModelSnapshot

MODALITIES = ("a", "v")


def kl_from_logits(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Mean over rows of KL(softmax(teacher) || softmax(student))."""
    t = torch.log_softmax(teacher_logits, dim=-1)
    s = torch.log_softmax(student_logits, dim=-1)
    return (t.exp() * (t - s)).sum(dim=-1).mean()


def _zero(model: AVModel) -> torch.Tensor:
    return torch.zeros((), dtype=model.dtype)


def _flag(skipped: set | None, *names: str) -> None:
    if skipped is not None:
        skipped.update(names)


def _logical_kl(model: AVModel, snapshot: ModelSnapshot, batch: FeatureBatch) -> torch.Tensor:
    n_old = snapshot.num_classes
    teacher, _ = snapshot(batch)
    student = model(batch)[:, :n_old]
    return kl_from_logits(teacher, student)


def loss_sl(model: AVModel, snapshot: ModelSnapshot, memory: FeatureBatch,
            current: FeatureBatch, *, skipped: set | None = None) -> torch.Tensor:
    terms = [_logical_kl(model, snapshot, b) for b in (memory, current) if len(b)]
    if not terms:
        _flag(skipped, "sl")
        return _zero(model)
    return sum(terms)


def convex_weights(n_draws: int, batch_size: int, generator: torch.Generator | None = None,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(n_draws, batch_size)`` rows of |N(0,1)| normalised to sum to one."""
    w = torch.randn(n_draws, batch_size, generator=generator, dtype=dtype).abs()
    return w / w.sum(dim=1, keepdim=True)


def sample_convex_hull(batch: FeatureBatch, generator: torch.Generator | None = None,
                       n_draws: int = 1, alpha: torch.Tensor | None = None) -> FeatureBatch:
    """Draw points of the batch's convex hull, one shared weight vector per draw."""
    if len(batch) == 0:
        raise ValueError("cannot sample the hull of an empty batch")
    if alpha is None:
        alpha = convex_weights(n_draws, len(batch), generator, batch.audio.dtype)
    alpha = alpha.to(batch.audio.dtype)
    return FeatureBatch(torch.einsum("nb,bkd->nkd", alpha, batch.audio),
                        torch.einsum("nb,bkd->nkd", alpha, batch.visual))


def loss_dl(model: AVModel, snapshot: ModelSnapshot, memory: FeatureBatch,
            current: FeatureBatch, *, n_draws: int | None = None,
            generator: torch.Generator | None = None,
            skipped: set | None = None) -> torch.Tensor:
    if n_draws is not None and n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    terms = []
    for source in (memory, current):
        if len(source):
            hull = sample_convex_hull(source, generator, n_draws or len(source))
            terms.append(_logical_kl(model, snapshot, hull))
    if not terms:
        _flag(skipped, "dl")
        return _zero(model)
    return sum(terms)


def loss_hld(model: AVModel, snapshot: ModelSnapshot, memory: FeatureBatch,
             current: FeatureBatch, *, sld: bool = True, dld: bool = True,
             n_draws: int | None = None, generator: torch.Generator | None = None,
             skipped: set | None = None) -> torch.Tensor:
    total = _zero(model)
    if sld:
        total = total + loss_sl(model, snapshot, memory, current, skipped=skipped)
    else:
        _flag(skipped, "sl")
    if dld:
        total = total + loss_dl(model, snapshot, memory, current, n_draws=n_draws,
                                generator=generator, skipped=skipped)
    else:
        _flag(skipped, "dl")
    return total


def similarity_logits(augmented: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Dot products of augmented rows against reference rows (batched over leading dims)."""
    return augmented @ reference.transpose(-1, -2)


def video_similarity(net, augmented_memory: FeatureBatch, reference_pool: FeatureBatch,
                     modality: str) -> torch.Tensor:
    """Row-stochastic ``(|aug|, |pool|)`` matrix for a live model or a snapshot."""
    _, aug = net.fuse(augmented_memory).modality(modality)
    _, ref = net.fuse(reference_pool).modality(modality)
    return torch.softmax(similarity_logits(aug, ref), dim=-1)


def snippet_similarity(net, memory: FeatureBatch, augmented_memory: FeatureBatch,
                       modality: str) -> torch.Tensor:
    """Per-sample ``(K, K)`` matrices of augmented vs unaugmented snippet features."""
    aug, _ = net.fuse(augmented_memory).modality(modality)
    ref, _ = net.fuse(memory).modality(modality)
    return torch.softmax(similarity_logits(aug, ref), dim=-1)


def _ss_from_outputs(t_aug: FusionOutputs, t_pool: FusionOutputs, s_aug: FusionOutputs,
                     s_pool: FusionOutputs, modality: str) -> torch.Tensor:
    teacher = similarity_logits(t_aug.modality(modality)[1], t_pool.modality(modality)[1])
    student = similarity_logits(s_aug.modality(modality)[1], s_pool.modality(modality)[1])
    return kl_from_logits(teacher, student)


def _ns_from_outputs(t_aug: FusionOutputs, t_mem: torch.Tensor, s_aug: FusionOutputs,
                     s_mem: torch.Tensor, modality: str) -> torch.Tensor:
    # t_mem/s_mem: unaugmented snippet features of the memory samples, (B, K, d)
    teacher = similarity_logits(t_aug.modality(modality)[0], t_mem)
    student = similarity_logits(s_aug.modality(modality)[0], s_mem)
    return kl_from_logits(teacher.flatten(0, 1), student.flatten(0, 1))


def loss_ss(model: AVModel, snapshot: ModelSnapshot, augmented_memory: FeatureBatch,
            reference_pool: FeatureBatch, modality: str, *,
            skipped: set | None = None) -> torch.Tensor:
    if len(reference_pool) < 2 or len(augmented_memory) == 0:
        _flag(skipped, f"ss_{modality}")
        return _zero(model)
    return _ss_from_outputs(snapshot.fuse(augmented_memory), snapshot.fuse(reference_pool),
                            model.fuse(augmented_memory), model.fuse(reference_pool), modality)


def loss_ns(model: AVModel, snapshot: ModelSnapshot, memory: FeatureBatch,
            augmented_memory: FeatureBatch, modality: str, *,
            skipped: set | None = None) -> torch.Tensor:
    if len(memory) == 0 or model.cfg.snippets < 2:
        _flag(skipped, f"ns_{modality}")
        return _zero(model)
    t_mem = snapshot.fuse(memory).modality(modality)[0]
    s_mem = model.fuse(memory).modality(modality)[0]
    return _ns_from_outputs(snapshot.fuse(augmented_memory), t_mem,
                            model.fuse(augmented_memory), s_mem, modality)


def hcd_terms(model: AVModel, snapshot: ModelSnapshot, memory: FeatureBatch,
              augmented_memory: FeatureBatch, current: FeatureBatch, *,
              scd: bool = True, vcd: bool = True,
              skipped: set | None = None) -> dict[str, torch.Tensor]:
    """The four correlative terms ``ss_a, ns_a, ss_v, ns_v``.

    ``augmented_memory`` must be the same draw for teacher and student; the
    pool is ``memory`` followed by ``current``. Forward passes are shared
    across terms.
    """
    names = [f"{kind}_{m}" for m in MODALITIES for kind in ("ss", "ns")]
    terms = {n: _zero(model) for n in names}
    if len(memory) == 0:
        _flag(skipped, *names)
        return terms
    if not vcd:
        _flag(skipped, "ss_a", "ss_v")
    if not scd:
        _flag(skipped, "ns_a", "ns_v")
    if not (scd or vcd):
        return terms

    pool = memory.cat(current) if len(current) else memory
    n_mem = len(memory)
    t_aug, t_pool = snapshot.fuse(augmented_memory), snapshot.fuse(pool)
    s_aug, s_pool = model.fuse(augmented_memory), model.fuse(pool)
    for m in MODALITIES:
        if vcd:
            if len(pool) < 2:
                _flag(skipped, f"ss_{m}")
            else:
                terms[f"ss_{m}"] = _ss_from_outputs(t_aug, t_pool, s_aug, s_pool, m)
        if scd:
            if model.cfg.snippets < 2:
                _flag(skipped, f"ns_{m}")
            else:
                terms[f"ns_{m}"] = _ns_from_outputs(
                    t_aug, t_pool.modality(m)[0][:n_mem], s_aug, s_pool.modality(m)[0][:n_mem], m)
    return terms


def loss_hcd(model: AVModel, snapshot: ModelSnapshot, memory: FeatureBatch,
             augmented_memory: FeatureBatch, current: FeatureBatch, *,
             scd: bool = True, vcd: bool = True, skipped: set | None = None) -> torch.Tensor:
    terms = hcd_terms(model, snapshot, memory, augmented_memory, current,
                      scd=scd, vcd=vcd, skipped=skipped)
    return terms["ss_a"] + terms["ns_a"] + terms["ss_v"] + terms["ns_v"]
