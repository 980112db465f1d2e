import os
import sys

sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" in getattr(rep, "nodeid", "") and rep.when == "call":
                name = rep.nodeid.split("::", 1)[1]
                detail = dict(rep.user_properties).get("measured", "")
                rows.append((int(name.split("_")[2]), name, outcome, detail))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, outcome, detail in sorted(rows):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {name}  {detail}".rstrip())
