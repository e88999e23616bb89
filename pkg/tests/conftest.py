import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_acceptance = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        props = dict(report.user_properties)
        if "criterion" in props:
            _acceptance.append((props["criterion"], report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in sorted(_acceptance):
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{mark}] {name}  {detail}".rstrip())
