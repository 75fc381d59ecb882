from __future__ import annotations

import re
import time

SUITE_BUDGET = 300.0  # seconds for the whole test suite
_results: dict[int, list[str]] = {}
_names: dict[int, str] = {}
_start = time.perf_counter()
_files: set[str] = set()


def pytest_collection_modifyitems(items):
    for item in items:
        _files.add(item.path.name)


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    _names[n] = m.group(2)
    if report.when == "call" or report.outcome != "passed":
        _results.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    elapsed = time.perf_counter() - _start
    full_suite = len(_files) > 1
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        ok = all(o == "passed" for o in _results[n])
        note = ""
        if n == 10 and full_suite:
            ok = ok and elapsed < SUITE_BUDGET
            note = f" (suite runtime {elapsed:.0f} s, budget {SUITE_BUDGET:.0f} s)"
        tr.write_line(f"criterion {n:2d} {_names[n]}: {'PASS' if ok else 'FAIL'}{note}")
