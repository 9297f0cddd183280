import os
from pathlib import Path

import numpy as np
import pytest

from mrcnet.synthetic import write_drive_layout

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory) -> Path:
    """Full synthetic DRIVE tree: 20 training + 20 test images at 584 x 565."""
    return write_drive_layout(tmp_path_factory.mktemp("drive_full"), 20, 20, seed=0)


@pytest.fixture(scope="session")
def drive_small(tmp_path_factory) -> Path:
    return write_drive_layout(tmp_path_factory.mktemp("drive_small"), 2, 2, seed=3)


@pytest.fixture(scope="session")
def real_drive_root():
    root = os.environ.get("MRCNET_DRIVE_ROOT")
    return Path(root) if root else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        line = f"[{status}] criterion {number}: {title} ({report.duration:.1f}s)"
        ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
