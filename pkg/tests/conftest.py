import numpy as np
import pytest
import torch

from synergy.training import set_reference_mode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def reference_mode():
    set_reference_mode(True)
    yield
    set_reference_mode(False)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# --- acceptance criteria summary ---------------------------------------------------

_CRITERIA = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _CRITERIA.append((marker.args[0], status, f"{rep.duration:.1f}s"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for label, status, duration in _CRITERIA:
        terminalreporter.write_line(f"{status}  {label}  ({duration})")
