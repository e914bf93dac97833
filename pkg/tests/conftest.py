import os
import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "clsm", max_examples=1000, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("clsm")

warnings.filterwarnings("ignore", module="numba")

from clsm.core import BehaviorData, Graph, Hyperparams  # noqa: E402
from clsm.generative import SimConfig, generate_dataset  # noqa: E402


@pytest.fixture
def small_data():
    """A 30-node, 3-topic synthetic instance with selections."""
    hyper = Hyperparams.symmetric(3, 12, 1.0)
    graph, behaviors, truth = generate_dataset(
        SimConfig(30, hyper, selections_mean=4, seed=7, beta=0.6))
    return graph, behaviors, truth


@pytest.fixture
def path3():
    graph = Graph(3, [(0, 1), (1, 2)])
    behaviors = BehaviorData.from_token_lists(3, 2, [[0], [1], [0]])
    return graph, behaviors


def random_simplex(rng, shape):
    x = rng.gamma(1.0, size=shape) + 1e-12
    return x / x.sum(axis=-1, keepdims=True)


np.set_printoptions(precision=6)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
