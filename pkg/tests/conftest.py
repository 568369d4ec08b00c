import numpy as np
import pytest

from osrk.asc import RadarParams, build_kernel_bank, make_radar_grid, table_iii_spec


@pytest.fixture(scope="session")
def radar():
    return RadarParams()


@pytest.fixture(scope="session")
def grid(radar):
    return make_radar_grid(radar)


@pytest.fixture(scope="session")
def bank11(radar):
    return build_kernel_bank(table_iii_spec(11), radar)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
