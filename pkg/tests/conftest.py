import pytest

from rewdist.bouncing_balls import BallWorldConfig
from rewdist.datasets import collect


@pytest.fixture(scope="session")
def ball_config():
    return BallWorldConfig()


@pytest.fixture(scope="session")
def uniform_data(ball_config):
    return collect(ball_config, "uniform", 20_000, 11)


@pytest.fixture(scope="session")
def expert_data(ball_config):
    return collect(ball_config, "expert", 8_000, 12)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """``report(number, title, ok, detail)`` records one criterion line and asserts ``ok``."""

    def _report(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        request.config.stash[_ACCEPTANCE].append((number, line))
        assert ok, line

    return _report
