import os
import sys

import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[1]
    if report.when == "call" or report.failed or report.skipped:
        detail = dict(report.user_properties).get("detail", "")
        prev = _ACCEPTANCE.get(name)
        if prev is None or prev[0] == "passed":
            _ACCEPTANCE[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _ACCEPTANCE[name]
        number, _, label = name[len("test_criterion_"):].partition("_")
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number} ({label.replace('_', ' ')}): {verdict}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
