import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_results: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.fixture
def measured(request):
    """Record measured values shown next to the criterion's pass/fail line."""
    entry = _results.setdefault(request.node.nodeid, {"details": []})
    return lambda text: entry["details"].append(text)


_markers: dict[str, str] = {}


def pytest_runtest_logreport(report):
    label = _markers.get(report.nodeid)
    if label is None:
        return
    entry = _results.setdefault(report.nodeid, {"details": []})
    entry["label"] = label
    if (report.when == "call" or report.failed) and entry.get("outcome") != "failed":
        entry["outcome"] = report.outcome


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _markers[item.nodeid] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    rows = [(nodeid, r) for nodeid, r in _results.items() if "label" in r]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for _, r in sorted(rows, key=lambda kv: _order(kv[1]["label"])):
        status = "PASS" if r.get("outcome") == "passed" else "FAIL"
        detail = "; ".join(r["details"])
        terminalreporter.write_line(f"{status}  {r['label']}" + (f"  [{detail}]" if detail else ""))


def _order(label: str):
    head = label.split()[0]
    return int(head[2:]) if head.startswith("AC") and head[2:].isdigit() else 99
