import re

import torch

torch.set_num_threads(1)

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(report.user_properties).get("detail", "")
    outcome = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
    _CRITERIA[int(m.group(1))] = (m.group(2).replace("_", " "), outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        name, outcome, detail = _CRITERIA[n]
        line = f"criterion {n:2d} [{outcome}] {name}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
