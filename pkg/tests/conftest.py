import numpy as np
import pytest

from speckle_lab.optics import OpticalConfig, make_diffuser


@pytest.fixture(scope="session")
def desk_config():
    return OpticalConfig.desk()


@pytest.fixture(scope="session")
def desk_screen(desk_config):
    return make_diffuser(desk_config, 42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def record_criterion(request):
    """``record(n, passed, detail)`` files one summary line for acceptance criterion ``n``."""

    def record(number: int, passed: bool, detail: str) -> bool:
        verdict = "PASS" if passed else "FAIL"
        request.config.stash[_CRITERIA][number] = f"criterion {number}: {verdict}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
