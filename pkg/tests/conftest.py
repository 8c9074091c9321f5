import numpy as np
import pytest

from solitonq import core, lsm


@pytest.fixture(scope="session")
def basis5():
    """n = 5 soliton, 8 Lanczos supermodes on the default grid."""
    return lsm.soliton_supermodes(5.0, 8)


@pytest.fixture(scope="session")
def tensors5(basis5):
    return lsm.coupling_tensors(basis5)


@pytest.fixture(scope="session")
def terms5_3():
    b = lsm.soliton_supermodes(5.0, 3)
    return lsm.assemble_terms(lsm.coupling_tensors(b), 5.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
