import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mercnn.datasets import SynthConfig, synth_dataset  # noqa: E402
from mercnn.network import NetConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_splits():
    return synth_dataset(SynthConfig(n_train=24, n_test=8, seed=3))


@pytest.fixture(scope="session")
def default_splits():
    return synth_dataset(SynthConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Minimised network for gradient checks: 2 classes, 8x8 input, 2x2 pooling."""
    return NetConfig(
        n_classes=2,
        image_size=(8, 8),
        conv1_channels=2,
        conv2_channels=3,
        pool_size=2,
        fc_width=5,
        hidden_init_std=None,
    )


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
