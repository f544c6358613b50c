import numpy as np
import pytest

from facialflow.morphable_model import synthetic_basis


@pytest.fixture(scope="session")
def basis():
    return synthetic_basis()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance tests carry @pytest.mark.criterion("label"); their outcomes are
# listed one per line at the end of the run.
_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = ""
        if report.failed:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _CRITERIA.append((marker.args[0], report.passed, report.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, duration, detail in _CRITERIA:
        line = f"{'PASS' if passed else 'FAIL'}  {label}  ({duration:.2f} s)"
        terminalreporter.write_line(line + (f"  -- {detail}" if detail else ""))
    n_pass = sum(p for _, p, _, _ in _CRITERIA)
    terminalreporter.write_line(f"{n_pass}/{len(_CRITERIA)} criteria passed")
