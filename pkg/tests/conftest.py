import numpy as np
import pytest
from hypothesis import settings

from capgrasp.oracle import GripperSpec, curate_dataset, random_shapes

settings.register_profile("capgrasp", max_examples=60, deadline=None)
settings.load_profile("capgrasp")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """4 objects x 2 cameras x (40 + 40) grasps; one object held out."""
    r = np.random.default_rng(3)
    return curate_dataset(random_shapes(4, r), 2, 40, 40, GripperSpec(), r, n_points=128)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
