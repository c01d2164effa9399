import pytest

from covflow import InputPair, sample_unit_pair


@pytest.fixture(scope="session")
def unit_pair():
    # unit diagonal, c0 = 0.5
    return InputPair.from_correlation(0.5)


@pytest.fixture(scope="session")
def gauss_pair():
    # d = 30 Gaussian inputs normalized to the unit sphere
    return sample_unit_pair(30, 42)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
