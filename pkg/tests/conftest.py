import numpy as np
import pytest

from subgeom import models, rates

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[number] = (title, report.passed, detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail, duration = _CRITERIA[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status}  {title} [{duration:.1f} s]"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)


@pytest.fixture(scope="session")
def sqrt_profile():
    return rates.make_profile({"kind": "polynomial", "alpha": 0.5})


@pytest.fixture(scope="session")
def log_profile():
    return rates.make_profile({"kind": "log_smoothed"})


@pytest.fixture(scope="session")
def two_state():
    return models.two_state_symmetric()


@pytest.fixture(scope="session")
def absorbing():
    return models.absorbing()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
