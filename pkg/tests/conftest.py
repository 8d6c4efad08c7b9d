import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from graspadapt.collect import collect_dataset  # noqa: E402
from graspadapt.estimator import RetrievalConfig, build_retrieval  # noqa: E402
from graspadapt.se3 import SampleRange  # noqa: E402
from graspadapt.world import default_world, make_object  # noqa: E402

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def bar():
    return make_object("bar", 256, 0)


@pytest.fixture(scope="session")
def clean_world(bar):
    """Reference world, noise and dropout off, gripper occlusion on."""
    return default_world(bar)


@pytest.fixture(scope="session")
def clean_dataset(clean_world):
    return collect_dataset(clean_world, SampleRange(0.30, 60.0), 2000, seed=7)


@pytest.fixture(scope="session")
def raw_retrieval(clean_dataset):
    return build_retrieval(clean_dataset, RetrievalConfig(refine_icp=False))


@pytest.fixture(scope="session")
def refined_retrieval(clean_dataset):
    return build_retrieval(clean_dataset, RetrievalConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
