import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from forgekey.config import ModelDims, TrainConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ModelDims(image_size=8, channels=1, patch=4, hidden=8, depth=2, heads=2, mlp_ratio=2,
                 value_dim=4, key_dim=8, classes=3)


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def tiny_config():
    return TrainConfig(dims=TINY, epochs=1, batch_size=8, probe_size=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
