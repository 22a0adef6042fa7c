import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    num, name = int(m.group(1)), m.group(2)
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        # a failing setup or teardown overrides an earlier pass
        if num not in _outcomes or status != "PASS":
            _outcomes[num] = (name, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        name, status, detail = _outcomes[num]
        line = f"criterion {num:2d} {name.replace('_', ' ')}: {status}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
