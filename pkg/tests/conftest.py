import numpy as np
import pytest

from nafons.io import builtin_system
from nafons.spin_model import restrict_to_species

# Reference parameters of the benchmark molecule, kept here as plain literals so tests do
# not depend on the shipped data file they are checking.
TABLE_SHIFTS = {"H1": -1770.0, "H2": -149.0, "H3": 172.0, "H4": -234.0, "F5": -885.0, "F6": 948.0}
TABLE_D = {
    ("H1", "H2"): -424.0, ("H1", "H3"): -144.0, ("H1", "H4"): -154.0, ("H1", "F5"): -1505.0,
    ("H1", "F6"): -232.0, ("H2", "H3"): -2166.0, ("H2", "H4"): -368.0, ("H2", "F5"): -42.0,
    ("H2", "F6"): -106.0, ("H3", "H4"): -931.0, ("H3", "F5"): -62.0, ("H3", "F6"): -46.0,
    ("H4", "F5"): -236.0, ("H4", "F6"): -384.0, ("F5", "F6"): -1589.0,
}
TABLE_J = {
    ("H1", "H2"): 0.38, ("H1", "H3"): -0.05, ("H1", "H4"): 0.36, ("H1", "F5"): -0.04,
    ("H1", "F6"): -0.73, ("H2", "H3"): 7.88, ("H2", "H4"): 1.75, ("H2", "F5"): 5.56,
    ("H2", "F6"): 1.45, ("H3", "H4"): 7.70, ("H3", "F5"): 1.43, ("H3", "F6"): 4.35,
    ("H4", "F5"): 8.14, ("H4", "F6"): 9.82, ("F5", "F6"): 20.75,
}
T2STAR_MS = [80.2, 65.8, 60.4, 62.4, 11.6, 15.9]


@pytest.fixture(scope="session")
def dfba():
    m = builtin_system("23dfba")
    return m.system, m.params


@pytest.fixture(scope="session")
def fluorine(dfba):
    return restrict_to_species(*dfba, {"19F"})


@pytest.fixture(scope="session")
def protons(dfba):
    return restrict_to_species(*dfba, {"1H"})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
