import numpy as np
import pytest

from likeland import tensor as T
from likeland.models import ArchitectureConfig, build

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _high_precision():
    with T.precision("high"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_model(w, b):
    """One dense layer with the given weights, as a package model."""
    w = np.asarray(w, dtype=np.float64)
    model = build(ArchitectureConfig("mlp", (w.shape[1], w.shape[0])), seed=0)
    model.params["0.weight"].data[...] = w
    model.params["0.bias"].data[...] = b
    return model


@pytest.fixture
def small_mlp():
    return build(ArchitectureConfig("mlp", (4, 6, 3)), seed=7)
