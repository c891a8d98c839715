import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rniprune.models import build_vgg16
from rniprune.norm import SIGMA

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_vgg():
    return build_vgg16(num_classes=10, norm_kind=SIGMA, width_scale=0.125, seed=3)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per numbered criterion
# --------------------------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")
    config._criteria = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            config._criteria.setdefault(mark.args[0], {"title": mark.args[1], "ok": True, "ran": False})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    entry = item.config._criteria[mark.args[0]]
    entry["ran"] = entry["ran"] or rep.when == "call"
    if not rep.passed:
        entry["ok"] = False
        entry.setdefault("why", rep.longreprtext.strip().splitlines()[-1] if rep.longreprtext else "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    crit = getattr(config, "_criteria", {})
    if not crit:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(crit):
        e = crit[n]
        status = "FAIL" if not e["ok"] else "PASS" if e["ran"] else "NOT RUN"
        line = f"criterion {n:>2} {status:<7} {e['title']}"
        if status == "FAIL" and e.get("why"):
            line += f"  ({e['why'][:160]})"
        terminalreporter.write_line(line)
