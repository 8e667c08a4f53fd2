import numpy as np
import pytest

from hybridpush.dynamics import PusherSlider, case_a_params, case_b_params
from hybridpush.mpc import MpcProblem, build_nominal_figure8, case_a_config, case_b_config


@pytest.fixture(scope="session")
def model_a():
    return PusherSlider(case_a_params())


@pytest.fixture(scope="session")
def model_b():
    return PusherSlider(case_b_params())


@pytest.fixture(scope="session")
def traj_a(model_a):
    return build_nominal_figure8(model_a)


@pytest.fixture(scope="session")
def traj_b(model_b):
    return build_nominal_figure8(model_b)


@pytest.fixture(scope="session")
def prob_a(model_a, traj_a):
    return MpcProblem(model_a, traj_a, 0.0, case_a_config())


@pytest.fixture(scope="session")
def prob_b(model_b, traj_b):
    return MpcProblem(model_b, traj_b, 0.0, case_b_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance criteria reporting -------------------------------------------------
# Tests marked ``criterion(number, title)`` are aggregated into one pass/fail
# line per criterion at the end of the run; ``note`` adds detail lines.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "notes": [], "failed": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["failed"].append(item.name)


@pytest.fixture
def note(request):
    mark = request.node.get_closest_marker("criterion")
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "notes": [], "failed": []})
    return entry["notes"].append


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        tr.write_line(f"criterion {num:2d} {'PASS' if e['ok'] else 'FAIL'}: {e['title']}")
        for line in e["notes"]:
            tr.write_line(f"    {line}")
        for name in e["failed"]:
            tr.write_line(f"    failed check: {name}")
