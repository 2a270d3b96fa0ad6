import time

import numpy as np
import pytest

from fera.datagen import SyntheticSpec, generate_many
from fera.objective import TrainConfig, train

PRETRAIN_STEPS = 3000


@pytest.fixture(scope="session")
def pretrained():
    """Base denoiser pretrained on gamma=2 fields, shared by the slow tests.

    Returns (base params, pretraining wall time in seconds, report).
    """
    spec = SyntheticSpec(gamma=2.0)
    train_x = generate_many(spec, range(0, 512))
    val_x = generate_many(spec, range(1_000_000, 1_000_064))
    started = time.perf_counter()
    model, report = train(TrainConfig(stage="pretrain", steps=PRETRAIN_STEPS), train_x, val_x)
    return model.base, time.perf_counter() - started, report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
