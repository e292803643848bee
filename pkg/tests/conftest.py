import numpy as np
import pytest

from dgconv.layer import DGConv2d

CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: long-running training check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = ""
        if report.failed:
            detail = str(report.longrepr.reprcrash.message) if hasattr(report.longrepr, "reprcrash") else "failed"
        prev = CRITERIA.get(n)
        ok = report.passed and (prev is None or prev[0])
        CRITERIA[n] = (ok, detail or (prev[1] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}"
        if detail:
            line += " - " + detail.splitlines()[0][:200]
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_layer(gates, rng, in_channels=None, out_channels=None, k=3, stride=1, dtype=np.float64):
    """DGConv layer with the given binary gates and random weights."""
    gates = np.asarray(gates)
    c = 1 << gates.size
    layer = DGConv2d(in_channels or c, out_channels or c, k, stride=stride, dtype=dtype)
    layer.weight.data = rng.normal(size=layer.weight.shape).astype(dtype)
    layer.gates.data = np.where(gates == 1, 1e-8, -1e-8).astype(np.float64)
    return layer
