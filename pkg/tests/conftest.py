import numpy as np
import pytest

from nora.fit import FitSpec, fit_rational


@pytest.fixture(scope="session")
def gelu_fit():
    return fit_rational(FitSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


def record_criterion(line: str) -> None:
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
