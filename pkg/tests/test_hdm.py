import math

import numpy as np
import pytest
import torch

from hadcil import hdm
from hadcil.ham import AugmentationConfig, augment_low
from hadcil.hdm import (convex_weights, hcd_terms, kl_from_logits, loss_dl, loss_hcd, loss_hld,
                        loss_ns, loss_sl, loss_ss, sample_convex_hull, snippet_similarity,
                        video_similarity)
from hadcil.model import FeatureBatch
from hadcil.testkit.oracle import (fd_gradient, relative_error, similarity_oracle,
                                   softmax_kl_oracle)

from _support import (analytic_grad, distill_setup, flat_params, loss_of_params, random_batch,
                      tiny_model)


def _log(p):
    return torch.log(torch.tensor(p, dtype=torch.float64))


def test_closed_form_logical_kl():
    got = kl_from_logits(_log([[0.7, 0.3]]), _log([[0.6, 0.4]])).item()
    assert got == pytest.approx(0.7 * math.log(0.7 / 0.6) + 0.3 * math.log(0.3 / 0.4), abs=1e-12)
    assert got == pytest.approx(0.0216, abs=1e-4)


def test_closed_form_similarity_kl():
    got = kl_from_logits(_log([[0.5, 0.5]]), _log([[0.9, 0.1]])).item()
    assert got == pytest.approx(0.5108, abs=1e-4)


def test_kl_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.dirichlet(np.ones(4), size=4)
        q = rng.dirichlet(np.ones(4), size=4)
        got = kl_from_logits(torch.log(torch.tensor(p)), torch.log(torch.tensor(q))).item()
        assert abs(got - softmax_kl_oracle(p, q)) < 1e-6


def test_logical_kl_through_models_closed_form():
    model = tiny_model(0, num_classes=2, head="linear")
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.copy_(_log([0.7, 0.3]))
    snap = model.snapshot()
    model.expand_classes(1)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.copy_(torch.cat([_log([0.6, 0.4]), torch.tensor([5.0],
                                                                            dtype=torch.float64)]))
    one = random_batch(0, 1, [0])
    empty = FeatureBatch(one.audio[:0], one.visual[:0], one.labels[:0])
    # new-class logit must not leak into the old-class distribution
    assert loss_sl(model, snap, one, empty).item() == pytest.approx(0.0216, abs=1e-4)


def _identity_setup(seed):
    model = tiny_model(seed, num_classes=3)
    snap = model.snapshot()
    memory = random_batch(seed + 1, 5, [0, 1, 2])
    current = random_batch(seed + 2, 4, [1, 2])
    augmented = augment_low(memory, AugmentationConfig.seeded(0.05, seed))
    return model, snap, memory, current, augmented


@pytest.mark.parametrize("seed", range(5))
def test_all_terms_vanish_at_snapshot(seed):
    model, snap, memory, current, augmented = _identity_setup(seed)
    assert loss_sl(model, snap, memory, current).item() < 1e-9
    g = torch.Generator().manual_seed(seed)
    assert loss_dl(model, snap, memory, current, generator=g).item() < 1e-9
    pool = memory.cat(current)
    for m in ("a", "v"):
        assert loss_ss(model, snap, augmented, pool, m).item() < 1e-9
        assert loss_ns(model, snap, memory, augmented, m).item() < 1e-9
    assert loss_hcd(model, snap, memory, augmented, current).item() < 1e-9


def test_losses_positive_after_drift():
    model, snap, memory, current = distill_setup(0)
    augmented = augment_low(memory, AugmentationConfig.seeded(0.05, 0))
    assert loss_sl(model, snap, memory, current).item() > 0
    assert loss_dl(model, snap, memory, current, generator=torch.Generator()).item() > 0
    terms = hcd_terms(model, snap, memory, augmented, current)
    assert all(v.item() > 0 for v in terms.values())


def test_no_gradient_reaches_snapshot():
    model, snap, memory, current = distill_setup(1)
    augmented = augment_low(memory, AugmentationConfig.seeded(0.05, 1))
    total = (loss_hld(model, snap, memory, current, generator=torch.Generator().manual_seed(0))
             + loss_hcd(model, snap, memory, augmented, current))
    total.backward()
    assert all(p.grad is None and not p.requires_grad for p in snap._model.parameters())
    assert any(p.grad is not None and p.grad.abs().max() > 0 for p in model.parameters())


@pytest.mark.parametrize("batch_size", [2, 4, 16])
def test_hull_weights_are_convex(batch_size):
    alpha = convex_weights(10_000, batch_size, torch.Generator().manual_seed(batch_size),
                           torch.float64)
    assert alpha.min() >= 0 and alpha.max() <= 1
    assert (alpha.sum(1) - 1).abs().max() < 1e-6


def test_hull_samples_inside_box():
    batch = random_batch(0, 4, [0])
    hull = sample_convex_hull(batch, torch.Generator().manual_seed(0), n_draws=10_000)
    for name in ("audio", "visual"):
        src, out = getattr(batch, name), getattr(hull, name)
        assert (out >= src.min(0).values - 1e-12).all()
        assert (out <= src.max(0).values + 1e-12).all()


def test_hull_vertex_and_midpoint():
    batch = random_batch(0, 2, [0])
    vertex = sample_convex_hull(batch, alpha=torch.tensor([[0.0, 1.0]]))
    assert torch.equal(vertex.audio[0], batch.audio[1])
    assert torch.equal(vertex.visual[0], batch.visual[1])
    mid = sample_convex_hull(batch, alpha=torch.tensor([[0.5, 0.5]]))
    assert torch.allclose(mid.audio[0], batch.audio.mean(0), atol=1e-15)


def test_hull_uses_one_alpha_for_both_modalities(monkeypatch):
    batch = FeatureBatch(torch.eye(3, dtype=torch.float64)[:, None, :],
                         2 * torch.eye(3, dtype=torch.float64)[:, None, :])
    hull = sample_convex_hull(batch, torch.Generator().manual_seed(0), n_draws=5)
    assert torch.allclose(hull.visual, 2 * hull.audio)


def test_dl_with_vertex_stub_equals_sl(monkeypatch):
    model, snap, memory, current = distill_setup(2)
    empty = FeatureBatch(memory.audio[:0], memory.visual[:0], memory.labels[:0])
    pick = 2

    def one_hot(n_draws, batch_size, generator=None, dtype=torch.float32):
        w = torch.zeros(n_draws, batch_size, dtype=dtype)
        w[:, pick] = 1.0
        return w

    monkeypatch.setattr(hdm, "convex_weights", one_hot)
    dl = loss_dl(model, snap, memory, empty, n_draws=1)
    single = FeatureBatch(memory.audio[pick:pick + 1], memory.visual[pick:pick + 1])
    sl = loss_sl(model, snap, single, empty)
    assert dl.item() == pytest.approx(sl.item(), abs=1e-12)


def test_hld_flags():
    model, snap, memory, current = distill_setup(3)
    skipped = set()
    assert loss_hld(model, snap, memory, current, sld=False, dld=False,
                    skipped=skipped).item() == 0.0
    assert skipped == {"sl", "dl"}
    g1, g2 = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    both = loss_hld(model, snap, memory, current, generator=g1)
    parts = loss_sl(model, snap, memory, current) + loss_dl(model, snap, memory, current,
                                                            generator=g2)
    assert both.item() == pytest.approx(parts.item(), abs=1e-12)
    only_sl = loss_hld(model, snap, memory, current, dld=False)
    assert only_sl.item() == pytest.approx(loss_sl(model, snap, memory, current).item())


def test_distillation_empty_batches_flagged():
    model, snap, memory, _ = distill_setup(3)
    empty = FeatureBatch(memory.audio[:0], memory.visual[:0], memory.labels[:0])
    skipped = set()
    assert loss_sl(model, snap, empty, empty, skipped=skipped).item() == 0.0
    assert loss_dl(model, snap, empty, empty, skipped=skipped).item() == 0.0
    assert loss_hcd(model, snap, empty, empty, empty, skipped=skipped).item() == 0.0
    assert skipped == {"sl", "dl", "ss_a", "ns_a", "ss_v", "ns_v"}
    with pytest.raises(ValueError):
        loss_dl(model, snap, memory, empty, n_draws=0)


def test_similarity_pool_of_identical_features():
    model = tiny_model(0)
    memory = random_batch(0, 2, [0])
    pool = FeatureBatch(memory.audio[[0, 0]], memory.visual[[0, 0]])
    for m in ("a", "v"):
        s = video_similarity(model, memory, pool, m)
        assert torch.allclose(s, torch.full((2, 2), 0.5, dtype=torch.float64))


def test_similarity_matches_oracle():
    model = tiny_model(5)
    memory = random_batch(1, 3, [0])
    pool = random_batch(2, 3, [0])
    augmented = augment_low(memory, AugmentationConfig.seeded(0.1, 0))
    out_aug, out_pool, out_mem = model.fuse(augmented), model.fuse(pool), model.fuse(memory)
    for m in ("a", "v"):
        s = video_similarity(model, augmented, pool, m).detach().numpy()
        expected = similarity_oracle(out_aug.modality(m)[1].detach().numpy(),
                                     out_pool.modality(m)[1].detach().numpy())
        assert np.abs(s - expected).max() < 1e-6
        q = snippet_similarity(model, memory, augmented, m).detach().numpy()
        assert q.shape == (3, 3, 3)
        for i in range(3):
            expected = similarity_oracle(out_aug.modality(m)[0][i].detach().numpy(),
                                         out_mem.modality(m)[0][i].detach().numpy())
            assert np.abs(q[i] - expected).max() < 1e-6


def test_identical_snippets_give_uniform_rows():
    model = tiny_model(0, positional=False)
    memory = random_batch(0, 2, [0])
    flat = FeatureBatch(memory.audio[:, :1].expand(-1, 3, -1), memory.visual[:, :1].expand(-1, 3, -1))
    q = snippet_similarity(model, flat, flat, "a")
    assert torch.allclose(q, torch.full_like(q, 1 / 3), atol=1e-12)


def test_single_snippet_and_small_pool_are_flagged():
    model = tiny_model(0, num_classes=2, snippets=1)
    snap = model.snapshot()
    memory = random_batch(0, 1, [0], model.cfg)
    skipped = set()
    assert loss_ns(model, snap, memory, memory, "a", skipped=skipped).item() == 0.0
    assert loss_ss(model, snap, memory, memory, "v", skipped=skipped).item() == 0.0
    assert skipped == {"ns_a", "ss_v"}


def test_hcd_sum_and_ablation_flags():
    model, snap, memory, current = distill_setup(4)
    augmented = augment_low(memory, AugmentationConfig.seeded(0.05, 4))
    terms = hcd_terms(model, snap, memory, augmented, current)
    pool = memory.cat(current)
    for m in ("a", "v"):
        assert terms[f"ss_{m}"].item() == pytest.approx(
            loss_ss(model, snap, augmented, pool, m).item(), abs=1e-12)
        assert terms[f"ns_{m}"].item() == pytest.approx(
            loss_ns(model, snap, memory, augmented, m).item(), abs=1e-12)
    total = loss_hcd(model, snap, memory, augmented, current)
    assert total.item() == pytest.approx(sum(v.item() for v in terms.values()), abs=1e-12)

    skipped = set()
    no_vcd = hcd_terms(model, snap, memory, augmented, current, vcd=False, skipped=skipped)
    assert no_vcd["ss_a"].item() == no_vcd["ss_v"].item() == 0.0 and no_vcd["ns_a"].item() > 0
    assert skipped == {"ss_a", "ss_v"}
    skipped = set()
    no_scd = hcd_terms(model, snap, memory, augmented, current, scd=False, skipped=skipped)
    assert no_scd["ns_a"].item() == no_scd["ns_v"].item() == 0.0 and no_scd["ss_v"].item() > 0
    assert skipped == {"ns_a", "ns_v"}
    assert loss_hcd(model, snap, memory, augmented, current, scd=False, vcd=False).item() == 0.0


def _fd_check(model, build):
    analytic = analytic_grad(model, build())
    numeric = fd_gradient(loss_of_params(model, build), flat_params(model).numpy())
    return relative_error(analytic, numeric)


@pytest.mark.slow
@pytest.mark.parametrize("term", ["sl", "dl", "ss", "ns", "hld"])
def test_distillation_gradients_match_finite_differences(term):
    model, snap, memory, current = distill_setup(7, perturb=0.1)
    augmented = augment_low(memory, AugmentationConfig.seeded(0.05, 7))
    pool = memory.cat(current)

    def build():
        g = torch.Generator().manual_seed(8)
        if term == "sl":
            return loss_sl(model, snap, memory, current)
        if term == "dl":
            return loss_dl(model, snap, memory, current, generator=g)
        if term == "ss":
            return loss_ss(model, snap, augmented, pool, "a") + loss_ss(model, snap, augmented,
                                                                        pool, "v")
        if term == "ns":
            return loss_ns(model, snap, memory, augmented, "a") + loss_ns(model, snap, memory,
                                                                          augmented, "v")
        return loss_hld(model, snap, memory, current, generator=g)

    assert _fd_check(model, build) < 1e-3
