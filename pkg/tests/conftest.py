import numpy as np
import pytest

from spanid.inputs import load_bridge_model, load_train


@pytest.fixture(scope="session")
def model2d():
    return load_bridge_model("reference-2d")


@pytest.fixture(scope="session")
def model3d():
    return load_bridge_model("reference-3d")


@pytest.fixture(scope="session")
def train50():
    return load_train("train-50mph")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
