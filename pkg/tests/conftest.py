import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

# acceptance criterion outcomes, keyed by test name, printed at the end of the run
_CRITERIA: dict[str, dict] = {}


@pytest.fixture
def measured(request):
    """Dict for a criterion test to stash the numbers it measured."""
    entry = _CRITERIA.setdefault(request.node.name, {"outcome": None, "values": {}})
    return entry["values"]


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    entry = _CRITERIA.setdefault(name, {"outcome": None, "values": {}})
    if report.when == "call" or report.outcome != "passed":
        entry["outcome"] = report.outcome
    entry["duration"] = entry.get("duration", 0.0) + report.duration


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        e = _CRITERIA[name]
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(e["outcome"], "????")
        vals = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in e["values"].items())
        terminalreporter.write_line(f"{verdict} {name} ({e.get('duration', 0.0):.1f}s) {vals}".rstrip())
