from collections import defaultdict

_RESULTS = defaultdict(list)
_TITLES = {
    1: "mesh exactness",
    2: "graph oracle equivalence",
    3: "gradient correctness",
    4: "persistence identity",
    5: "learning beats persistence",
    6: "forcing sensitivity ordering",
    7: "spectrum correctness",
    8: "loop oracles",
    9: "region tables",
    10: "determinism and stability",
}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _RESULTS[crit].append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_TITLES):
        outcomes = [o for _, o in _RESULTS.get(n, [])]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {_TITLES[n]:<30s} {status}")
