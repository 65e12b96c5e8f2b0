import numpy as np
import pytest

from hse.data import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small synthetic dataset (4 coarse x 2 x 2, 32x32 images) shared by slow-ish tests."""
    out = tmp_path_factory.mktemp("tiny")
    spec = SyntheticSpec(branching=(2, 2, 2), image_size=32, counts=(3, 1, 2), noise=16, seed=7)
    return generate_synthetic(spec, out)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 10):
        if number in results:
            passed, detail = results[number]
            terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {number}: NOT RUN")
