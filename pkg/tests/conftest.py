import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}  # criterion number -> [(passed, detail)]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        last = str(rep.longrepr).strip().splitlines()[-1:] or [""]
        detail = f"{item.name}: {last[0][:160]}"
    _CRITERIA.setdefault(mark.args[0], []).append((rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        ok = all(p for p, _ in runs)
        details = [d for p, d in runs if d and (ok or not p)]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line} ({'; '.join(details)})" if details else line)
