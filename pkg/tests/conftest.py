import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vpnet import synthdata

settings.register_profile(
    "default",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    """60 + 60 synthetic samples for fast end-to-end tests."""
    cfg = synthdata.SynthConfig(samples_per_class=20, seed=3)
    return cfg, synthdata.generate(cfg)


@pytest.fixture(scope="session")
def medium_synth():
    cfg = synthdata.SynthConfig(samples_per_class=300, seed=1)
    return cfg, synthdata.generate(cfg)
