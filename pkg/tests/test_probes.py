import csv
import json

import numpy as np
import pytest
import torch

from hadcil.config import ConfigError
from hadcil.model import AVModel, FusionConfig
from hadcil.probes import expand_grid, probe_lipschitz, sweep

from conftest import small_config


def isometric_model() -> AVModel:
    """K=1, no positional term, zero attention outputs, orthonormal joint projection."""
    cfg = FusionConfig(audio_dim=3, visual_dim=4, snippets=1, d_model=8, num_heads=2,
                       positional=False)
    model = AVModel(cfg, num_classes=2, seed=0).double()
    q, _ = torch.linalg.qr(torch.randn(8, 7, generator=torch.Generator().manual_seed(1),
                                       dtype=torch.float64))
    with torch.no_grad():
        model.fusion.proj_a.weight.copy_(q[:, :3])
        model.fusion.proj_v.weight.copy_(q[:, 3:])
        model.fusion.proj_a.bias.zero_()
        model.fusion.proj_v.bias.zero_()
        for name in ("self_a", "self_v", "cross_a", "cross_v"):
            getattr(model.fusion, name).out.weight.zero_()
            getattr(model.fusion, name).out.bias.zero_()
    return model


def _features(n, k, da, dv, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, k, da)), rng.standard_normal((n, k, dv))


def test_isometry_fixture_preserves_distance():
    audio, visual = _features(20, 1, 3, 4)
    report = probe_lipschitz(isometric_model(), audio, visual, 1e-2, 10, np.random.default_rng(0))
    assert np.allclose(report.distances, 1e-2, atol=1e-5)
    assert report.n_samples == 10


def test_perturbation_norm_is_exact():
    model = AVModel(FusionConfig(4, 5, 3, d_model=8, num_heads=2), num_classes=2, seed=0)
    audio, visual = _features(30, 3, 4, 5)
    report = probe_lipschitz(model, audio, visual, 1e-2, 10, np.random.default_rng(1))
    assert all(abs(n - 1e-2) <= 1e-9 for n in report.input_norms)
    assert all(np.isfinite(d) and d > 0 for d in report.distances)
    assert report.mean == pytest.approx(np.mean(report.distances))
    assert report.fraction_exceeding == pytest.approx(np.mean(np.array(report.distances) > 1e-2))
    assert set(report.to_json()) >= {"epsilon", "n_samples", "distances", "mean",
                                     "fraction_exceeding"}


def test_zero_epsilon_gives_zero_distance():
    model = AVModel(FusionConfig(4, 5, 3, d_model=8, num_heads=2), num_classes=2, seed=0)
    audio, visual = _features(5, 3, 4, 5)
    report = probe_lipschitz(model, audio, visual, 0.0, 5, np.random.default_rng(0))
    assert report.distances == [0.0] * 5 and report.fraction_exceeding == 0.0


def test_probe_rejects_nan_model_and_negative_epsilon():
    model = AVModel(FusionConfig(4, 5, 3, d_model=8, num_heads=2), num_classes=2, seed=0)
    audio, visual = _features(5, 3, 4, 5)
    with pytest.raises(ValueError):
        probe_lipschitz(model, audio, visual, -1.0, 5, np.random.default_rng(0))
    with torch.no_grad():
        model.fusion.proj_a.weight[0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        probe_lipschitz(model, audio, visual, 1e-2, 5, np.random.default_rng(0))


def test_probe_does_not_touch_model():
    model = AVModel(FusionConfig(4, 5, 3, d_model=8, num_heads=2), num_classes=2, seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    audio, visual = _features(5, 3, 4, 5)
    probe_lipschitz(model, audio, visual, 1e-2, 5, np.random.default_rng(0))
    assert model.dtype == torch.float32
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_grid_expansion():
    points = expand_grid({"lambda": [0, 0.05], "beta": [1, 5, 10]})
    assert len(points) == 6 and points[0] == {"lambda": 0, "beta": 1}
    with pytest.raises(ConfigError, match="empty"):
        expand_grid({})
    with pytest.raises(ConfigError, match="unknown"):
        expand_grid({"lamda": [0.1]})
    with pytest.raises(ConfigError):
        expand_grid({"lambda": []})


def test_sweep_rows_and_outputs(small_dataset, tmp_path):
    base = small_config(small_dataset, **{"train.epochs": 1})
    rows = sweep(base, {"lambda": [0, 0.05, 0.2]}, seeds=[0, 1], out_dir=tmp_path)
    assert len(rows) == 6
    assert len({r["fingerprint"] for r in rows}) == 6
    with open(tmp_path / "sweep.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 6 and table[0].keys() >= {"point", "seed", "lambda", "aia", "fia"}
    assert (tmp_path / "sweep_lambda.svg").read_text().startswith("<svg")
    assert json.loads((tmp_path / "grid.json").read_text())["seeds"] == [0, 1]
    for r in rows:
        assert (tmp_path / f"point{r['point']:03d}_seed{r['seed']}" / "summary.json").exists()


def test_sweep_parallel_matches_serial(small_dataset, monkeypatch):
    base = small_config(small_dataset, **{"train.epochs": 1})
    serial = sweep(base, {"beta": [0.0, 5.0]}, seeds=[2], workers=1)
    monkeypatch.setenv("HAD_NUM_WORKERS", "2")
    parallel = sweep(base, {"beta": [0.0, 5.0]}, seeds=[2])
    assert [(r["aia"], r["fia"]) for r in serial] == [(r["aia"], r["fia"]) for r in parallel]


def test_sweep_rejects_unknown_key_before_running(small_dataset, monkeypatch):
    import hadcil.probes as probes

    monkeypatch.setattr(probes, "_run_point", lambda job: pytest.fail("ran a point"))
    with pytest.raises(ConfigError):
        sweep(small_config(small_dataset), {"nope": [1]})
