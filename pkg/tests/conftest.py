import os
import re
import sys

sys.path.insert(0, os.path.dirname(__file__))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    results = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            match = _CRITERION.search(nodeid)
            if match:
                num, slug = int(match.group(1)), match.group(2)
                status = "PASS" if outcome == "passed" else "FAIL"
                results.setdefault((num, slug), status)
                if status == "FAIL":
                    results[(num, slug)] = "FAIL"
    if results:
        terminalreporter.section("acceptance criteria")
        for (num, slug), status in sorted(results.items()):
            terminalreporter.write_line(f"criterion {num:2d} ({slug.replace('_', ' ')}): {status}")
