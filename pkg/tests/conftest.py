import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dmd.generators import reference_instance
from dmd.oracle import solve_utp
from dmd.utp import UtpMechanism

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance bookkeeping: criterion number -> (title, [outcomes])
_CRITERIA: dict[int, tuple[str, list[bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        n, title = mark.args
        _CRITERIA.setdefault(n, (title, []))[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, results = _CRITERIA[n]
        verdict = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}  ({sum(results)}/{len(results)} checks)")


@pytest.fixture
def reference():
    inst, tree, phi = reference_instance()
    return inst, tree, phi


@pytest.fixture
def reference_mech(reference):
    inst, tree, phi = reference
    return UtpMechanism(inst, tree, phi)


@pytest.fixture
def reference_solution(reference):
    return solve_utp(reference[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
