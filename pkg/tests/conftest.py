import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advwb.kernels import tune_allocator

sys.path.insert(0, os.path.dirname(__file__))

tune_allocator()

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    from advwb.data_io import SynthConfig, generate_synthetic

    return generate_synthetic(SynthConfig(n=64, size=8, seed=3))


@pytest.fixture(scope="session")
def micro_model():
    """Quickly trained 8x8 baseline model and its blob/ring data."""
    from advwb.data_io import SynthConfig, generate_synthetic
    from advwb.model import ModelConfig, build_model
    from advwb.trainer import TrainConfig, train

    data = generate_synthetic(SynthConfig(n=96, size=16, seed=5, ring_radius=(4, 6), blob_sigma=(1.5, 2.5)))
    model = build_model(ModelConfig(input_shape=(1, 16, 16), stage_channels=(4, 8, 8), blocks_per_stage=1), seed=0)
    model, _ = train(model, data, TrainConfig(max_epochs=8, batch_size=16, seed=0))
    return model, data


# ---------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL line each in the terminal summary

_CRITERIA = {}  # number -> {"title", "ok", "notes"}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and rep.passed and not rep.skipped
    if rep.when == "call":
        entry["notes"].extend(f"{k}: {v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {entry['title']}: {'PASS' if entry['ok'] else 'FAIL'}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")
