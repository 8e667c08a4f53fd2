import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridpush.qp import (QpProblem, QpProblemError, QpStatus, bounds_as_problem, check_kkt,
                           dump_problem, load_problem, solve_bounded_qp, solve_qp)

from oracles import exhaustive_active_set


def random_qp(rng, n=None, mi=None, me=None):
    n = n or int(rng.integers(1, 11))
    mi = int(rng.integers(0, 7)) if mi is None else mi
    me = int(rng.integers(0, min(n, 3))) if me is None else me
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    f = rng.normal(size=n) * 3
    z0 = rng.normal(size=n)
    E = rng.normal(size=(me, n))
    G = rng.normal(size=(mi, n))
    g = G @ z0 + rng.uniform(0, 1, mi)
    return QpProblem(H, f, E, E @ z0, G, g)


def test_clipped_scalar():
    s = solve_qp(QpProblem([[2.0]], [-2.0], G=[[1.0]], g=[0.5]))
    assert s.optimal and s.z[0] == pytest.approx(0.5) and s.objective + 1 == pytest.approx(0.25)
    assert check_kkt(QpProblem([[2.0]], [-2.0], G=[[1.0]], g=[0.5]), s).max <= 1e-10


def test_equality_symmetric():
    s = solve_qp(QpProblem(2 * np.eye(2), np.zeros(2), E=[[1.0, 1.0]], e=[1.0]))
    assert np.allclose(s.z, [0.5, 0.5])


def test_kkt_detects_perturbation():
    p = QpProblem([[2.0]], [-2.0], G=[[1.0]], g=[0.5])
    s = solve_qp(p)
    s.z = s.z - 1e-3
    assert check_kkt(p, s).stationarity > 1e-4
    p2 = QpProblem(np.eye(2), np.array([-1.0, -1.0]))
    sub = solve_qp(p2)
    sub.z = np.array([0.5, 0.5])
    assert check_kkt(p2, sub).stationarity > 0


def test_infeasible():
    s = solve_qp(QpProblem([[1.0]], [0.0], G=[[1.0], [-1.0]], g=[-1.0, -1.0]))
    assert s.status is QpStatus.INFEASIBLE
    b = solve_bounded_qp(np.eye(1), np.zeros(1), np.array([1.0]), np.array([0.0]))
    assert b.status is QpStatus.INFEASIBLE


def test_not_psd():
    with pytest.raises(QpProblemError):
        solve_qp(QpProblem([[-1.0]], [0.0]))
    with pytest.raises(QpProblemError):
        solve_qp(QpProblem([[1.0, 2.0], [0.0, 1.0]], [0.0, 0.0]))
    with pytest.raises(QpProblemError):
        QpProblem(np.eye(2), [0.0, 0.0], G=np.ones((2, 2)), g=[1.0])


def test_max_iter():
    n = 8
    # start at the vertex z = 1; reaching the interior optimum releases every row
    p = QpProblem(np.eye(n), 10 * np.ones(n), G=np.eye(n), g=np.ones(n))
    s = solve_qp(p, warm_start=range(n), max_iter=2)
    assert s.status is QpStatus.MAX_ITER
    assert np.all(p.G @ s.z - p.g <= 1e-9)  # best iterate stays feasible
    full = solve_qp(p, warm_start=range(n))
    assert full.optimal and np.allclose(full.z, -10)


def test_matches_exhaustive_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        p = random_qp(rng)
        s = solve_qp(p)
        ref = exhaustive_active_set(p.H, p.f, p.E, p.e, p.G, p.g)
        assert s.optimal
        assert s.objective == pytest.approx(ref[0], abs=1e-6)
        rep = check_kkt(p, s)
        assert rep.stationarity <= 1e-6 and rep.primal <= 1e-8 and rep.complementarity <= 1e-8
        assert np.all(s.mu_ineq >= -1e-8)
        assert s.objective == pytest.approx(p.objective(s.z), abs=1e-10)


def test_deterministic_and_warm_start():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = random_qp(rng, mi=6)
        a, b = solve_qp(p), solve_qp(p)
        assert a.z.tobytes() == b.z.tobytes() and a.objective == b.objective
        w = solve_qp(p, warm_start=a.active)
        assert abs(w.objective - a.objective) <= 1e-8
        bad = solve_qp(p, warm_start=list(range(len(p.g))))
        assert abs(bad.objective - a.objective) <= 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_bounded_matches_general(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.05 * np.eye(n)
    f = rng.normal(size=n) * 2
    lo = np.where(rng.random(n) < 0.3, -np.inf, rng.normal(size=n) - 0.5)
    hi = np.where(rng.random(n) < 0.3, np.inf, lo + rng.uniform(0, 1.5, n))
    hi = np.where(np.isfinite(lo), hi, rng.normal(size=n))
    fixed = rng.random(n) < 0.15
    hi = np.where(fixed & np.isfinite(lo), lo, hi)
    b = solve_bounded_qp(H, f, lo, hi)
    g = solve_qp(bounds_as_problem(H, f, lo, hi))
    assert b.optimal and g.optimal
    assert b.objective == pytest.approx(g.objective, abs=1e-8 * (1 + abs(g.objective)))
    assert np.all(b.z >= lo - 1e-12) and np.all(b.z <= hi + 1e-12)
    assert b.kkt_residual <= 1e-6
    w = solve_bounded_qp(H, f, lo, hi, warm_start=rng.normal(size=n))
    assert abs(w.objective - b.objective) <= 1e-8 * (1 + abs(b.objective))


def test_dump_round_trip():
    rng = np.random.default_rng(9)
    p = random_qp(rng, n=4, mi=3, me=1)
    buf = io.StringIO()
    text = dump_problem(p, buf)
    assert buf.getvalue() == text and text.splitlines()[0] == "H 4 4"
    q = load_problem(text)
    for name in "HfEeGg":
        assert np.array_equal(getattr(p, name), getattr(q, name))


def test_inequality_duplicating_an_equality():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = 6
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
        f = rng.normal(size=n) * 3
        E = rng.normal(size=(2, n))
        # each equality row reappears as an inequality, plus a few ordinary rows
        G = np.vstack([E, -E[:1], rng.normal(size=(3, n))])
        z0 = rng.normal(size=n)
        g = G @ z0 + np.r_[0, 0, 0, rng.uniform(0, 1, 3)]
        p = QpProblem(H, f, E, E @ z0, G, g)
        s = solve_qp(p)
        ref = exhaustive_active_set(H, f, E, E @ z0, G, g)
        assert s.optimal and s.objective == pytest.approx(ref[0], abs=1e-6)
        assert check_kkt(p, s).max <= 1e-6
