import numpy as np
import pytest
from hypothesis import settings

from binmap import synth

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    """Small PPAM with broad regions and moderate noise, for enumeration oracles."""
    model = synth.random_model(K=3, L=2, D=4, seed=7, noise=0.8, spread=3.0)
    return model


# one summary line per acceptance criterion, printed after the run
CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
