import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance report --------------------------------------------------------
# Acceptance tests attach ("acceptance", "<criterion>: <measurement>") with
# record_property; the verdict is taken from the test outcome.

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key, text in report.user_properties:
        if key != "acceptance":
            continue
        if hasattr(report, "wasxfail"):
            verdict = "FAIL (expected, see notes)" if report.skipped else "PASS (unexpected)"
        else:
            verdict = {"passed": "PASS", "failed": "FAIL"}.get(report.outcome, report.outcome.upper())
        _ACCEPTANCE.append((report.nodeid, verdict, text))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, verdict, text in _ACCEPTANCE:
        terminalreporter.write_line(f"{verdict:<28} {text}")
