import pytest

from mia_bench.presets import get_preset
from mia_bench.world import build_world

SEED = 2024


@pytest.fixture(scope="session")
def overfit_world():
    return build_world(get_preset("overfit"), 0, SEED)


@pytest.fixture(scope="session")
def cifar100_world():
    return build_world(get_preset("CIFAR100"), 0, SEED)


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
