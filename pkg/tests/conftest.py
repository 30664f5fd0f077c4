"""Per-criterion pass/fail report for the acceptance suite.

Tests in test_acceptance.py carry ``@pytest.mark.criterion(n)``. A criterion
passes when every test tagged with it passes; details recorded with
``record_property("detail", ...)`` are echoed next to the verdict.
"""
import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "shape contracts",
    3: "MSCM decomposition oracle",
    4: "attention degeneracies",
    5: "graph-builder oracle",
    6: "GNN permutation equivariance",
    7: "metric oracles",
    8: "training trend",
    9: "fusion-benefit trend",
    10: "freeze contract",
    11: "determinism",
    12: "format round-trips",
}

_results = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by the test")
    config.stash[_results] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = item.config.stash[_results].setdefault(marker.args[0], {"ok": True, "details": []})
    if not rep.passed:
        entry["ok"] = False
    if rep.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_results]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in results:
            terminalreporter.write_line(f"criterion {n}: NOT RUN - {title}")
            continue
        verdict = "PASS" if results[n]["ok"] else "FAIL"
        details = "; ".join(results[n]["details"])
        terminalreporter.write_line(f"criterion {n}: {verdict} - {title}" + (f" ({details})" if details else ""))
