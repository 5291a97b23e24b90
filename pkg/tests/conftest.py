"""Per-criterion PASS/FAIL summary for the acceptance suite."""

from collections import defaultdict

CRITERIA = {
    1: "loss oracles",
    2: "pipeline arithmetic",
    3: "stitching",
    4: "metric oracle equivalence",
    5: "architecture contracts",
    6: "gradient checks",
    7: "training protocol",
    8: "full DRIVE run (AUC >= 0.97)",
}

_outcomes = defaultdict(list)
_criterion_of = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _criterion_of[item.nodeid] = int(marker.args[0])


def pytest_runtest_logreport(report):
    n = _criterion_of.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes[n].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criterion_of:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            continue
        if any(r == "failed" for r in results):
            status = "FAIL"
        elif all(r == "skipped" for r in results):
            status = "SKIP"
        else:
            status = "PASS"
        passed = results.count("passed")
        terminalreporter.write_line(f"criterion {n} ({name}): {status} [{passed}/{len(results)} tests passed]")
