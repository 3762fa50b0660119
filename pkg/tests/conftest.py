import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def tiny_config():
    """Smallest architecture that still has projections and stride-2 units."""
    from latentcore.network import ArchConfig

    return ArchConfig(channels=(2, 3, 4), units_per_module=2, blocks_per_unit=2,
                      num_classes=3, input_resolution=8, init_std=0.3)


@pytest.fixture
def tiny_model(tiny_config):
    from latentcore.network import build

    return build(tiny_config, seed=5)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
