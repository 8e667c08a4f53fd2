import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from hybridpush.dynamics import PusherSlider, case_a_params, case_b_params
from hybridpush.modes import (ContactMode, LinearConstraintSet, ModeSchedule, enumerate_schedules,
                              force_transform, mode_bounds, mode_constraints,
                              mode_independent_constraints, step_constraints)

S, L, R = ContactMode.STICKING, ContactMode.SLIDING_LEFT, ContactMode.SLIDING_RIGHT
MA = PusherSlider(case_a_params())
MB = PusherSlider(case_b_params())


def test_cone_examples():
    c0 = mode_independent_constraints(0, MA)
    assert c0.contains([1.0, 0.0, 0.0])
    assert not c0.contains([1.0, 0.31, 0.0])
    assert not c0.contains([-0.01, 0.0, 0.0])
    assert c0.max_violation([1.0, 0.31, 0.0]) == pytest.approx(0.01)


def test_mode_examples():
    c0 = mode_independent_constraints(0, MA)
    stick = c0 & mode_constraints(S, 0, MA)
    assert stick.contains([1.0, 0.2, 0.0])
    left = c0 & mode_constraints(L, 0, MA)
    assert left.contains([1.0, 0.3, 0.1])
    assert not left.contains([1.0, 0.0, 0.1])
    right = c0 & mode_constraints(R, 0, MA)
    assert right.contains([1.0, -0.3, -0.1]) and not right.contains([1.0, -0.3, 0.1])


@pytest.mark.parametrize("model", [MA, MB])
@pytest.mark.parametrize("mode", list(ContactMode))
def test_mode_with_cone_nonempty(model, mode):
    assert step_constraints(model, mode).contains(np.zeros(model.n_u))


def test_all_modes_intersection_forces_zero_normal():
    cs = mode_independent_constraints(0, MA)
    for m in ContactMode:
        cs = cs & mode_constraints(m, 0, MA)
    # maximize f_n over the closed intersection, with f_n capped to keep the LP bounded
    res = linprog(c=[-1, 0, 0], A_ub=cs.G, b_ub=cs.g, A_eq=cs.E, b_eq=cs.e,
                  bounds=[(None, 10), (None, None), (None, None)], method="highs")
    assert res.status == 0 and abs(res.x[0]) < 1e-9


def test_line_pusher_shares_velocity_row():
    cs = step_constraints(MB, S)
    # one phi_dot equality, not one per contact
    assert cs.E.shape[0] == 1
    assert step_constraints(MB, L).E.shape[0] == 2 and step_constraints(MB, L).G.shape[0] == 7


def test_shifted_constraints():
    cs = step_constraints(MA, L)
    u_nom = np.array([0.2, 0.01, 0.0])
    u = np.array([1.0, 0.3, 0.2])
    assert cs.shifted(u_nom).contains(u - u_nom) == cs.contains(u)


@pytest.mark.parametrize("model", [MA, MB])
@pytest.mark.parametrize("mode", [None, *ContactMode])
def test_bound_form_equivalent_to_rows(model, mode):
    rng = np.random.default_rng(3)
    T = force_transform(model)
    lo, hi = mode_bounds(model, mode)
    cs = step_constraints(model, mode)
    for _ in range(300):
        z = rng.normal(0, 1, model.n_u)
        inside = bool(np.all(z >= lo) and np.all(z <= hi))
        assert cs.contains(T @ z, tol=1e-12) == inside
        zc = np.clip(z, lo, hi)
        assert cs.contains(T @ zc, tol=1e-12)


def test_schedule_strings_and_mirroring():
    s = ModeSchedule.from_string("S,L,L,R,S,S,S,S", (1, 5, 5, 5, 5, 5, 5, 4))
    assert s.to_string() == "S,L,L,R,S,S,S,S" and s.N == 35 and s.M == 8
    assert ModeSchedule.from_string("SLLRSSSS", s.segment_lengths) == s
    assert s.mirrored().to_string() == "S,R,R,L,S,S,S,S"
    assert len(s.per_step()) == 35 and s.per_step()[1] == L
    assert list(s.sliding_mask()) == [False, True, True, True, False, False, False, False]
    with pytest.raises(ValueError):
        ModeSchedule.from_string("S,X", (1, 1))
    with pytest.raises(ValueError):
        ModeSchedule((S,), (1, 2))


def test_enumeration_order():
    scheds = [s.modes for s in enumerate_schedules((1, 1))]
    assert len(scheds) == 9 and scheds == sorted(scheds) and scheds[0] == (S, S)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(list(ContactMode)), min_size=1, max_size=8))
def test_schedule_round_trip(modes):
    s = ModeSchedule(tuple(modes), (1,) * len(modes))
    assert ModeSchedule.from_string(s.to_string(), s.segment_lengths) == s
    assert s.mirrored().mirrored() == s


def test_empty_constraint_set():
    e = LinearConstraintSet.empty(3)
    assert e.contains(np.ones(3)) and e.max_violation(np.ones(3)) == 0.0
    with pytest.raises(IndexError):
        mode_independent_constraints(1, MA)
