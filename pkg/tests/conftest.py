import time

import pytest

from mca_forge.denoiser import TrainConfig, train_default


@pytest.fixture(scope="session")
def trained_default():
    """The default desk-scale recipe, trained once per session (a few minutes on one core)."""
    t0 = time.perf_counter()
    res = train_default(TrainConfig())
    res.seconds = time.perf_counter() - t0
    return res


def pytest_terminal_summary(terminalreporter, config):
    from test_acceptance import ACCEPTANCE_KEY

    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
