import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gaze_align.regions import load_atlas  # noqa: E402

_acceptance_lines = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL"}.get(rep.outcome, rep.outcome.upper())
        _acceptance_lines.append(f"{status}  {marker.args[0]}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def atlas():
    return load_atlas()


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)
