import numpy as np
import pytest

from physimg.imgcore import new_image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def rgb_image(rng):
    return new_image(rng.uniform(0, 1, (40, 60, 3)), 0.6, 0.4, origin=(0.1, 0.2), timestamp=10.0)


@pytest.fixture
def gray_image(rng):
    return new_image(rng.uniform(0, 1, (32, 48)), 0.48, 0.32)


# -- acceptance report ------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = mark.args
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE[number] = (title, status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, seconds = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {title} ({seconds:.1f} s)")
