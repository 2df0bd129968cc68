import os

from hypothesis import HealthCheck, settings

settings.register_profile("fast", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))

CRITERIA = {
    1: "nested BP equals the dense Gaussian oracle",
    2: "depth-last ordering has zero fill and linear flops",
    3: "BP messages equal Cholesky blocks",
    4: "circulant designs: bounded fill and Cost(SLA)/(N nbar)",
    5: "worst-case design: quadratic fill and cubic Cost(SLA)",
    6: "MCAR scenario (a) cost slopes",
    7: "relaxation-time sandwich and empirical decay",
    8: "IAT versus data size",
    9: "MH kernel correctness",
    10: "thresholded factor accuracy",
    11: "IAT calibration",
    12: "CLI determinism",
}
_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    ok = call.excinfo is None
    props = dict(item.user_properties)
    _outcomes.setdefault(n, []).append((item.name, ok, props.get("measured", "")))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        checks = _outcomes[n]
        status = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        tr.write_line(f"criterion {n:2d} {status}  {CRITERIA.get(n, '')}")
        for name, ok, measured in checks:
            tr.write_line(f"    {'ok  ' if ok else 'FAIL'} {name}  {measured}")
