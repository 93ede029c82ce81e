import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for number, title in getattr(report, "criterion", ()):
        _, outcomes = _criteria.setdefault(number, (title, []))
        outcomes.append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criterion = [(m.args[0], m.args[1]) for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")


@pytest.fixture(scope="session")
def dataset_dir():
    """Directory with the published message log and yearbook tables, from WORKFLUX_DATA_DIR."""
    path = os.environ.get("WORKFLUX_DATA_DIR")
    if not path or not (Path(path) / "messages.csv").exists():
        pytest.skip("published dataset not available (set WORKFLUX_DATA_DIR)")
    return Path(path)
