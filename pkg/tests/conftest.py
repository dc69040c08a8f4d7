import gc
import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def collected():
    """Run a full collection before and after the test so registry counts are stable."""
    gc.collect()
    yield
    gc.collect()


# -- acceptance summary: one PASS/FAIL line per criterion at the end of the run

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    entry = _criteria.setdefault(props["criterion"], {"title": props["title"], "ok": True, "details": []})
    entry["ok"] = entry["ok"] and report.passed
    if "detail" in props:
        entry["details"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        line = f"criterion {number:2d} {status}  {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
