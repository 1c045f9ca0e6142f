import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loadanon.panel import HALF_HOUR, ProfilePanel, TimeIndex

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_panel(values, ids=None, start="2013-01-01T00:00:00"):
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if ids is None:
        ids = [f"s{i:03d}" for i in range(values.shape[0])]
    return ProfilePanel(tuple(ids), TimeIndex(start, values.shape[1], HALF_HOUR), values)


@pytest.fixture
def small_panel():
    return make_panel([[1.0, 2.0], [3.0, 4.0]], ids=["a", "b"])


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_addoption(parser):
    parser.addoption("--lcl-input", default=None,
                     help="real LCL extract for the optional decay-fit check in the acceptance suite")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")
    config.stash[_ACCEPTANCE] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    line = f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    item.config.stash[_ACCEPTANCE].append((number, line))
    print("\n" + line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
