import pytest

CRITERIA = {
    "A1": "slab exit-time identity for Brownian motion",
    "A2": "one-dimensional exact odds, quenched MC and log-odds identity",
    "A3": "chain formula against tridiagonal solve",
    "A4": "slab Green kernel suite",
    "A5": "deterministic variance sums",
    "A6": "perturbation identity",
    "A7": "slab-step formula and odds cap",
    "A8": "effective criterion direction and mirror duality",
    "A9": "slab-decay scan",
    "A10": "one-dimensional transience dichotomy",
    "A11": "delta condition",
    "A12": "determinism under worker count",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        cid = mark.args[0]
        ok = rep.outcome == "passed"
        _outcomes.setdefault(cid, []).append((item.name, ok))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, desc in CRITERIA.items():
        res = _outcomes.get(cid)
        if res is None:
            tr.write_line(f"{cid:>4}  NOT RUN  {desc}")
            continue
        ok = all(r[1] for r in res)
        failed = [n for n, r in res if not r]
        tail = f"  (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"{cid:>4}  {'PASS' if ok else 'FAIL'}     {desc}{tail}")
