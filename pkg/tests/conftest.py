import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hadcil.features import SyntheticSpec, generate_synthetic, write_dataset  # noqa: E402

SMALL_SPEC = SyntheticSpec(num_classes=6, train_per_class=12, valid_per_class=2,
                           test_per_class=6, snippets=3, audio_dim=4, visual_dim=5,
                           class_separation=2.0, seed=0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> Path:
    """6 classes, K=3; trains in about a second."""
    out = tmp_path_factory.mktemp("small") / "data"
    manifest, samples = generate_synthetic(SMALL_SPEC)
    write_dataset(manifest, samples, out)
    return out


def small_config(data: Path, **overrides) -> dict:
    from hadcil.config import make_config

    base = {"data": str(data), "schedule.base_classes": 2, "schedule.num_increments": 2,
            "schedule.classes_per_increment": 2, "schedule.memory_size": 8,
            "model.d_model": 8, "model.num_heads": 2, "train.lr": 1e-2, "train.epochs": 2,
            "train.batch_size": 8}
    base.update(overrides)
    return make_config(None, base)


# -- acceptance summary -------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"[{status}] criterion {number:2d}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
