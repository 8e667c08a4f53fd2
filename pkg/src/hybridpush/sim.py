"""Closed-loop simulation of the pusher-slider under the hybrid MPC controllers."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .dynamics import PhysicalParams, PusherSlider
from .modes import ContactMode, ModeSchedule, enumerate_schedules
from .mpc import (MpcConfig, MpcInfeasibleError, MpcProblem, NominalTrajectory, branch_and_bound,
                  solve_mpc_learned, solve_mpc_miqp)

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    def __init__(self, message: str, log_: "TrackingLog | None" = None):
        super().__init__(message)
        self.log = log_


@dataclass(frozen=True)
class Perturbation:
    """Instantaneous world-frame displacement ``(dx, dy, dtheta)`` of the object."""

    time: float
    displacement: tuple[float, float, float]


@dataclass(frozen=True)
class SimConfig:
    plant_step: float = 0.001
    controller_period: float = 0.01
    duration: float | None = None
    laps: float = 1.0
    perturbations: tuple[Perturbation, ...] = ()
    sensor_noise: float = 0.0
    seed: int = 0
    mu_g_offset: float = 0.10
    initial_error: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    recovery_threshold: float = 0.01

    def resolved_duration(self, traj: NominalTrajectory) -> float:
        return self.duration if self.duration is not None else self.laps * traj.lap_time

    def validate(self, traj: NominalTrajectory) -> None:
        if not 0 < self.plant_step <= self.controller_period:
            raise ValueError("plant step must be positive and not exceed the controller period")
        ratio = self.controller_period / self.plant_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("controller period must be a multiple of the plant step")
        dur = self.resolved_duration(traj)
        if not dur > 0:
            raise ValueError("duration must be positive")
        for p in self.perturbations:
            if not 0 <= p.time <= dur:
                raise ValueError(f"perturbation at t={p.time} outside [0, {dur}]")


def lateral_perturbation(traj: NominalTrajectory, t: float, magnitude: float) -> Perturbation:
    """Displacement of ``magnitude`` to the left of the nominal direction of travel."""
    xd = traj.state_dot(t)
    heading = math.atan2(xd[1], xd[0])
    return Perturbation(t, (-magnitude * math.sin(heading), magnitude * math.cos(heading), 0.0))


def wrap_angle(a: float) -> float:
    return math.remainder(a, 2 * math.pi)


def tracking_error(traj: NominalTrajectory, t: float, x: np.ndarray) -> np.ndarray:
    e = np.asarray(x, dtype=float) - traj.state(t)
    e[2] = wrap_angle(e[2])
    return e


def canonical_error(traj: NominalTrajectory, t: float, err: np.ndarray) -> tuple[np.ndarray, bool]:
    """Error rotated into the nominal body frame, reflected on clockwise arcs.

    The MPC cost is isotropic in position and every arc of the figure-8 is a
    rotated (and, for clockwise arcs, mirrored) copy of the arc the classifier
    was trained on, so the classifier is queried in this canonical frame.
    """
    th = traj.state(t)[2]
    c, s = math.cos(th), math.sin(th)
    ex, ey = c * err[0] + s * err[1], -s * err[0] + c * err[1]
    mirrored = traj.mirrored(t)
    if mirrored:
        return np.array([ex, -ey, -err[2], -err[3]]), True
    return np.array([ex, ey, err[2], err[3]]), False


def project_to_cone(model: PusherSlider, u: np.ndarray) -> np.ndarray:
    u = np.array(u, dtype=float)
    nc, mu = model.n_c, model.params.mu_p
    fn = np.maximum(u[:nc], 0.0)
    u[:nc] = fn
    u[nc:2 * nc] = np.clip(u[nc:2 * nc], -mu * fn, mu * fn)
    return u


def cone_violation(model: PusherSlider, u: np.ndarray) -> float:
    nc, mu = model.n_c, model.params.mu_p
    fn, ft = u[:nc], u[nc:2 * nc]
    return float(max(0.0, np.max(-fn), np.max(np.abs(ft) - mu * fn)))


# --------------------------------------------------------------------------
# controllers

@dataclass
class ControlAction:
    u: np.ndarray
    schedule: str = ""
    solver: str = ""
    solve_time: float = 0.0
    infeasible: bool = False


class Controller(Protocol):
    name: str

    def __call__(self, t: float, x: np.ndarray) -> ControlAction: ...


class OpenLoopController:
    name = "open_loop"

    def __init__(self, traj: NominalTrajectory):
        self.traj = traj

    def __call__(self, t, x):
        return ControlAction(self.traj.input(t), "", self.name, 0.0)


class _MpcController:
    name = "mpc"

    def __init__(self, model: PusherSlider, traj: NominalTrajectory, config: MpcConfig):
        self.model, self.traj, self.config = model, traj, config
        self._warm = None

    def problem(self, t: float) -> MpcProblem:
        return MpcProblem(self.model, self.traj, t, self.config)


class MiqpController(_MpcController):
    def __init__(self, model, traj, config, method: str = "bnb"):
        super().__init__(model, traj, config)
        if method not in ("bnb", "enumerate"):
            raise ValueError(f"unknown MIQP method {method!r}")
        self.method = method
        self.name = "miqp" if method == "enumerate" else "miqp_bnb"

    def __call__(self, t, x):
        start = time.perf_counter()
        err = tracking_error(self.traj, t, x)
        prob = self.problem(t)
        try:
            res = branch_and_bound(prob, err) if self.method == "bnb" else solve_mpc_miqp(prob, err)
        except MpcInfeasibleError:
            return ControlAction(self.traj.input(t), "", self.name, time.perf_counter() - start, True)
        return ControlAction(res.u0, res.schedule.to_string(), self.name, time.perf_counter() - start)


class FixedScheduleController(_MpcController):
    """Learned-modes QP with a constant schedule (all-Sticking by default)."""

    def __init__(self, model, traj, config, schedule: ModeSchedule | None = None):
        super().__init__(model, traj, config)
        self.schedule = schedule or ModeSchedule.all_sticking(config.segments)
        self.name = "fixed"

    def __call__(self, t, x):
        start = time.perf_counter()
        err = tracking_error(self.traj, t, x)
        try:
            res = solve_mpc_learned(self.problem(t), self.schedule, err, self._warm)
        except MpcInfeasibleError:
            return ControlAction(self.traj.input(t), "", self.name, time.perf_counter() - start, True)
        self._warm = res.z
        return ControlAction(res.u0, res.schedule.to_string(), self.name, time.perf_counter() - start)


class LearnedController(_MpcController):
    name = "learned"

    def __init__(self, model, traj, config, classifier):
        super().__init__(model, traj, config)
        self.classifier = classifier
        if tuple(classifier.segment_lengths) != tuple(config.segments):
            raise ValueError("classifier segment structure does not match the controller")

    def schedule_for(self, t: float, err: np.ndarray) -> ModeSchedule:
        feats, mirrored = canonical_error(self.traj, t, err)
        sched = self.classifier.predict_schedule(feats)
        return sched.mirrored() if mirrored else sched

    def __call__(self, t, x):
        start = time.perf_counter()
        err = tracking_error(self.traj, t, x)
        sched = self.schedule_for(t, err)
        prob = self.problem(t)
        try:
            res = solve_mpc_learned(prob, sched, err, self._warm)
        except MpcInfeasibleError:
            log.info("learned schedule %s failed at t=%.3f; falling back to all-Sticking", sched, t)
            try:
                res = solve_mpc_learned(prob, ModeSchedule.all_sticking(self.config.segments), err)
            except MpcInfeasibleError:
                return ControlAction(self.traj.input(t), "", self.name, time.perf_counter() - start, True)
        self._warm = res.z
        return ControlAction(res.u0, res.schedule.to_string(), self.name, time.perf_counter() - start)


# --------------------------------------------------------------------------
# plant and loop

def plant_params(params: PhysicalParams, mu_g_offset: float) -> PhysicalParams:
    return params.with_updates(mu_g=params.mu_g * (1.0 + mu_g_offset))


class Plant:
    """RK4 integration of the nonlinear model with zero-order-hold inputs."""

    def __init__(self, model: PusherSlider):
        self.model = model
        self.limit = model.phi_limit()

    def _f(self, x, u):
        phi = min(max(x[3], -self.limit), self.limit)
        xs = np.array([x[0], x[1], x[2], phi])
        out = self.model.f(xs, u)
        if abs(x[3]) >= self.limit and out[3] * x[3] > 0:
            out[3] = 0.0
        return out

    def step(self, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
        k1 = self._f(x, u)
        k2 = self._f(x + 0.5 * dt * k1, u)
        k3 = self._f(x + 0.5 * dt * k2, u)
        k4 = self._f(x + dt * k3, u)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if math.isfinite(self.limit):
            x[3] = min(max(x[3], -self.limit), self.limit)
        return x


@dataclass
class TrackingLog:
    t: np.ndarray
    x: np.ndarray
    x_ref: np.ndarray
    err: np.ndarray
    u: np.ndarray
    schedule: list[str]
    solver: list[str]
    solve_time: np.ndarray
    perturbation_times: tuple[float, ...] = ()
    recovery_threshold: float = 0.01
    terminated: str = ""

    @property
    def position_error(self) -> np.ndarray:
        return np.hypot(self.err[:, 0], self.err[:, 1])

    def recovery_times(self) -> list[float | None]:
        out: list[float | None] = []
        pe = self.position_error
        for tp in self.perturbation_times:
            after = np.flatnonzero(self.t > tp + 1e-12)
            rec = None
            for i in after:
                if pe[i] < self.recovery_threshold:
                    rec = float(self.t[i] - tp)
                    break
            out.append(rec)
        return out

    def summary(self) -> dict:
        pe = self.position_error
        return {
            "rms_position_error": float(np.sqrt(np.mean(pe**2))) if len(pe) else float("nan"),
            "max_position_error": float(pe.max()) if len(pe) else float("nan"),
            "final_position_error": float(pe[-1]) if len(pe) else float("nan"),
            "recovery_times": self.recovery_times(),
            "mean_solve_time": float(self.solve_time.mean()) if len(pe) else float("nan"),
            "max_solve_time": float(self.solve_time.max()) if len(pe) else float("nan"),
            "samples": int(len(pe)),
            "terminated": self.terminated,
        }

    def to_csv(self, n_contacts: int, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fn = [f"fn{i + 1}" for i in range(n_contacts)]
        ft = [f"ft{i + 1}" for i in range(n_contacts)]
        w.writerow(["t", "x", "y", "theta", "phi", "x_ref", "y_ref", "theta_ref",
                    "ex", "ey", "etheta", "ephi", *fn, *ft, "phidot", "schedule", "solver", "solve_us"])
        for k in range(len(self.t)):
            us = f"{self.solve_time[k] * 1e6:.1f}" if timing else "0"
            w.writerow([_fmt(self.t[k]), *map(_fmt, self.x[k]), *map(_fmt, self.x_ref[k, :3]),
                        *map(_fmt, self.err[k]), *map(_fmt, self.u[k]),
                        self.schedule[k], self.solver[k], us])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return repr(float(v))


def run_closed_loop(params: PhysicalParams, traj: NominalTrajectory, controller: Controller,
                    sim: SimConfig) -> TrackingLog:
    sim.validate(traj)
    plant = Plant(PusherSlider(plant_params(params, sim.mu_g_offset)))
    ctrl_model = PusherSlider(params)
    rng = np.random.default_rng(sim.seed)
    duration = sim.resolved_duration(traj)
    n_sub = int(round(sim.controller_period / sim.plant_step))
    n_steps = int(math.floor(duration / sim.controller_period + 1e-9))
    pending = sorted(sim.perturbations, key=lambda p: p.time)

    x = traj.state(0.0) + np.asarray(sim.initial_error, dtype=float)
    rows_t, rows_x, rows_ref, rows_e, rows_u = [], [], [], [], []
    scheds, solvers, times = [], [], []
    strikes = 0
    terminated = ""
    for k in range(n_steps):
        t = k * sim.controller_period
        while pending and pending[0].time <= t + 1e-12:
            d = pending.pop(0).displacement
            x = x + np.array([d[0], d[1], d[2], 0.0])
        x_meas = x.copy()
        if sim.sensor_noise > 0:
            x_meas[:3] += rng.normal(0.0, sim.sensor_noise, 3)
        act = controller(t, x_meas)
        strikes = strikes + 1 if act.infeasible else 0
        u = project_to_cone(ctrl_model, act.u)
        viol = cone_violation(ctrl_model, u)
        if viol > 1e-8:
            raise SimulationError(f"applied input violates the friction cone by {viol:g}")
        rows_t.append(t)
        rows_x.append(x.copy())
        rows_ref.append(traj.state(t))
        rows_e.append(tracking_error(traj, t, x))
        rows_u.append(u)
        scheds.append(act.schedule)
        solvers.append(act.solver)
        times.append(act.solve_time)
        if strikes >= 2:
            terminated = f"controller infeasible twice in a row at t={t:.3f}"
            break
        for _ in range(n_sub):
            x = plant.step(x, u, sim.plant_step)
        if not np.all(np.isfinite(x)):
            terminated = f"state diverged at t={t:.3f}"
            break

    out = TrackingLog(np.array(rows_t), np.array(rows_x), np.array(rows_ref), np.array(rows_e),
                      np.array(rows_u), scheds, solvers, np.array(times),
                      tuple(p.time for p in sim.perturbations), sim.recovery_threshold, terminated)
    if terminated.startswith("controller"):
        raise SimulationError(terminated, out)
    return out


# --------------------------------------------------------------------------
# mode maps and timing

def grid_states(ex: Sequence[float], ey: Sequence[float], etheta: float, ephi: float) -> np.ndarray:
    X, Y = np.meshgrid(np.asarray(ex, float), np.asarray(ey, float), indexing="ij")
    n = X.size
    return np.column_stack([X.ravel(), Y.ravel(), np.full(n, etheta), np.full(n, ephi)])


def mode_region_map(source, ex: Sequence[float], ey: Sequence[float],
                    etheta: float = math.radians(5.0), ephi: float = 0.0) -> np.ndarray:
    """First-segment mode per (ex, ey) cell, shape ``(len(ex), len(ey))``.

    ``source`` is either an :class:`MpcProblem` (exact MIQP) or a classifier
    with ``predict_schedule``.
    """
    states = grid_states(ex, ey, etheta, ephi)
    if isinstance(source, MpcProblem):
        modes = [int(branch_and_bound(source, s).schedule.modes[0]) for s in states]
    else:
        modes = [int(m) for m in source.predict_first_modes(states)]
    return np.array(modes, dtype=int).reshape(len(ex), len(ey))


def mode_map_csv(grid: np.ndarray, ex: Sequence[float], ey: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ex", "ey", "mode"])
    for i, a in enumerate(ex):
        for j, b in enumerate(ey):
            w.writerow([_fmt(a), _fmt(b), ContactMode(int(grid[i, j])).letter])
    return buf.getvalue()


def region_contiguity(grid: np.ndarray) -> float:
    """Fraction of interior cells sharing their mode with at least 2 of 4 neighbours."""
    g = np.asarray(grid)
    c = g[1:-1, 1:-1]
    same = ((g[:-2, 1:-1] == c).astype(int) + (g[2:, 1:-1] == c) + (g[1:-1, :-2] == c) + (g[1:-1, 2:] == c))
    return float(np.mean(same >= 2)) if c.size else float("nan")


@dataclass
class TimingReport:
    trials: int
    stats: dict
    ratio: float
    schedules_identical: bool | None
    rows: list = field(default_factory=list, repr=False)
    ratio_enumeration: float | None = None

    def to_json(self) -> str:
        return json.dumps({"trials": self.trials, "controllers": self.stats,
                           "ratio_median_miqp_over_learned": self.ratio,
                           "ratio_median_enumeration_over_learned": self.ratio_enumeration,
                           "schedules_identical": self.schedules_identical}, indent=2, sort_keys=True)


def _stats(ts: Sequence[float]) -> dict:
    a = np.asarray(ts, dtype=float)
    return {"median_s": float(np.median(a)), "p95_s": float(np.percentile(a, 95)),
            "mean_s": float(a.mean()), "n": int(a.size)}


def bandwidth_benchmark(model: PusherSlider, traj: NominalTrajectory, config: MpcConfig, classifier,
                        trials: int = 100, std: Sequence[float] = (0.03, 0.03, 0.4, 0.025),
                        seed: int = 0, enumerate_checks: int = 0, warmup: int = 5) -> TimingReport:
    """Time learned-modes and MIQP solves on identical (time, error) inputs.

    Each timed call includes building the condensed window.  The main MIQP
    timing uses branch-and-bound, the faster of the two exact solvers; on the
    first ``enumerate_checks`` trials exhaustive enumeration is also timed and
    its schedule compared, and ``ratio_enumeration`` compares it with the
    learned solves on those same inputs.
    """
    rng = np.random.default_rng(seed)
    inputs = [(float(rng.uniform(0.0, traj.lap_time)), rng.normal(0.0, std)) for _ in range(trials + warmup)]
    learned = LearnedController(model, traj, config, classifier)

    def learned_call(t, err):
        s = time.perf_counter()
        sched = learned.schedule_for(t, err)
        res = solve_mpc_learned(MpcProblem(model, traj, t, config), sched, err)
        return time.perf_counter() - s, res

    def miqp_call(t, err):
        s = time.perf_counter()
        res = branch_and_bound(MpcProblem(model, traj, t, config), err)
        return time.perf_counter() - s, res

    for t, err in inputs[:warmup]:
        learned_call(t, err)
        miqp_call(t, err)
    tl, tm, te, rows = [], [], [], []
    identical = None
    for i, (t, err) in enumerate(inputs[warmup:]):
        dl, rl = learned_call(t, err)
        dm, rm = miqp_call(t, err)
        tl.append(dl)
        tm.append(dm)
        enum_sched = ""
        if i < enumerate_checks:
            s = time.perf_counter()
            re = solve_mpc_miqp(MpcProblem(model, traj, t, config), err)
            te.append(time.perf_counter() - s)
            enum_sched = re.schedule.to_string()
            same = enum_sched == rm.schedule.to_string()
            identical = same if identical is None else (identical and same)
        rows.append((t, *err, rl.schedule.to_string(), rm.schedule.to_string(), enum_sched, rm.objective))
    stats = {"learned": _stats(tl), "miqp_bnb": _stats(tm)}
    ratio_enum = None
    if te:
        stats["miqp_enumeration"] = _stats(te)
        ratio_enum = stats["miqp_enumeration"]["median_s"] / float(np.median(tl[:len(te)]))
    return TimingReport(trials, stats, stats["miqp_bnb"]["median_s"] / stats["learned"]["median_s"],
                        identical, rows, ratio_enum)
