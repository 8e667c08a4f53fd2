"""Hybrid MPC about a nominal pushing trajectory.

Two controllers share one condensed quadratic program: the mixed-integer
variant searches over contact-mode schedules (exhaustively or by
branch-and-bound), the learned-modes variant receives the schedule from
outside and solves a single convex QP.
"""
from __future__ import annotations

import bisect
import cmath
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import PusherSlider, rotation
from .modes import (ContactMode, ModeSchedule, force_transform, mode_bounds,
                    step_constraints)
from .qp import QpProblem, QpSolution, QpStatus, solve_bounded_qp

TIE_TOL = 1e-9


class NominalInfeasibleError(ValueError):
    """Inverse dynamics of the requested path leaves the friction cone."""


class MpcInfeasibleError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# nominal trajectory

@dataclass(frozen=True)
class Arc:
    """Constant body twist held for ``duration`` seconds."""

    duration: float
    twist: np.ndarray
    u: np.ndarray
    start: np.ndarray  # state at the beginning of the arc

    def state(self, tau: float) -> np.ndarray:
        vx, vy, om = self.twist
        x0, y0, th0, phi = self.start
        v = complex(vx, vy) * cmath.exp(1j * th0)
        if abs(om) < 1e-14:
            dp = v * tau
        else:
            dp = v * (cmath.exp(1j * om * tau) - 1.0) / (1j * om)
        return np.array([x0 + dp.real, y0 + dp.imag, th0 + om * tau, phi])

    @property
    def end(self) -> np.ndarray:
        return self.state(self.duration)


@dataclass(frozen=True)
class NominalSample:
    time: float
    x: np.ndarray
    u: np.ndarray
    A: np.ndarray
    B: np.ndarray


class NominalTrajectory:
    """Piecewise constant-twist nominal, periodic with period ``lap_time``."""

    def __init__(self, model: PusherSlider, arcs: Sequence[Arc], name: str = "custom",
                 periodic: bool = True, meta: dict | None = None):
        self.model = model
        self.arcs = list(arcs)
        self.name = name
        self.periodic = periodic
        self.meta = dict(meta or {})
        self._starts = np.cumsum([0.0] + [a.duration for a in self.arcs[:-1]]).tolist()
        self.lap_time = float(sum(a.duration for a in self.arcs))
        self._lin_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def _locate(self, t: float) -> tuple[int, float]:
        if self.periodic:
            t = math.fmod(t, self.lap_time)
            if t < 0:
                t += self.lap_time
        k = max(0, bisect.bisect_right(self._starts, t) - 1)
        return k, t - self._starts[k]

    def lap_offset(self, t: float) -> float:
        """Heading accumulated by whole laps before ``t`` (zero for closed laps)."""
        if not self.periodic:
            return 0.0
        laps = math.floor(t / self.lap_time)
        return laps * (self.arcs[-1].end[2] - self.arcs[0].start[2])

    def state(self, t: float) -> np.ndarray:
        k, tau = self._locate(t)
        x = self.arcs[k].state(tau)
        x[2] += self.lap_offset(t)
        return x

    def input(self, t: float) -> np.ndarray:
        k, _ = self._locate(t)
        return self.arcs[k].u.copy()

    def state_dot(self, t: float) -> np.ndarray:
        """Analytic time derivative of :meth:`state`."""
        x = self.state(t)
        k, _ = self._locate(t)
        out = np.zeros(4)
        out[:3] = rotation(x[2]) @ self.arcs[k].twist
        return out

    def mirrored(self, t: float) -> bool:
        """True on clockwise arcs (mirror images of the training arc)."""
        k, _ = self._locate(t)
        return bool(self.arcs[k].twist[2] < 0)

    def linearization(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        k, tau = self._locate(t)
        key = round(self._starts[k] + tau, 9)
        hit = self._lin_cache.get(key)
        if hit is None:
            x = self.state(t)
            hit = self.model.linearize(x, self.input(t))
            if len(self._lin_cache) > 20000:
                self._lin_cache.clear()
            self._lin_cache[key] = hit
        return hit

    def samples(self, period: float, duration: float | None = None) -> list[NominalSample]:
        if period <= 0:
            raise ValueError("period must be positive")
        duration = self.lap_time if duration is None else duration
        n = int(math.floor(duration / period + 1e-9))
        out = []
        for i in range(n):
            t = i * period
            A, B = self.linearization(t)
            out.append(NominalSample(t, self.state(t), self.input(t), A, B))
        return out


def achievable_twist(model: PusherSlider, speed: float, omega: float, phi: float = 0.0) -> np.ndarray:
    """Body twist of the given speed and yaw rate reachable at placement ``phi``.

    When the contact geometry cannot produce every twist (the point pusher),
    the body sideslip angle is chosen as the smallest one that makes the
    twist reachable.
    """
    AW = model.ls.A @ model.wrench_matrix(phi)
    U, s, _ = np.linalg.svd(AW)
    if np.sum(s > 1e-12 * s[0]) >= 3:
        return np.array([speed, 0.0, omega])
    nv = U[:, -1]
    rho = math.hypot(nv[0], nv[1])
    rhs = -nv[2] * omega / (speed * rho)
    if abs(rhs) > 1:
        raise NominalInfeasibleError("no sideslip angle reaches the requested twist")
    gamma = math.atan2(nv[1], nv[0])
    cands = [gamma + math.acos(rhs), gamma - math.acos(rhs)]
    cands = [math.remainder(b, 2 * math.pi) for b in cands]
    beta = min(cands, key=abs)
    return np.array([speed * math.cos(beta), speed * math.sin(beta), omega])


def nominal_input(model: PusherSlider, twist: np.ndarray, phi: float = 0.0, margin: float = 1e-6) -> np.ndarray:
    """Inverse dynamics: twist -> wrench -> minimum-norm contact forces."""
    w = model.ls.A_inv @ twist
    W = model.wrench_matrix(phi)
    forces, *_ = np.linalg.lstsq(W, w, rcond=None)
    if np.linalg.norm(W @ forces - w) > 1e-9 * max(1.0, np.linalg.norm(w)):
        raise NominalInfeasibleError("requested twist is not producible at this contact placement")
    nc, mu = model.n_c, model.params.mu_p
    fn, ft = forces[:nc], forces[nc:]
    if np.any(fn <= margin) or np.any(np.abs(ft) >= mu * fn - margin):
        raise NominalInfeasibleError(
            f"nominal forces f_n={fn}, f_t={ft} are not strictly inside the friction cone (mu_p={mu})")
    return np.concatenate([forces, [0.0]])


def build_nominal_figure8(model: PusherSlider, radius: float = 0.15, speed: float = 0.05,
                          theta0: float = 0.0) -> NominalTrajectory:
    """Figure-8 made of a counter-clockwise then a clockwise circle through the origin."""
    if not (radius > 0 and speed > 0):
        raise ValueError("radius and speed must be positive")
    duration = 2 * math.pi * radius / speed
    arcs = []
    start = np.array([0.0, 0.0, theta0, 0.0])
    for sign in (1.0, -1.0):
        tw = achievable_twist(model, speed, sign * speed / radius)
        arc = Arc(duration, tw, nominal_input(model, tw), start.copy())
        arcs.append(arc)
        start = arc.end
    return NominalTrajectory(model, arcs, name="figure8",
                             meta={"radius": radius, "speed": speed, "theta0": theta0})


def build_nominal_line(model: PusherSlider, speed: float = 0.05, duration: float = 20.0) -> NominalTrajectory:
    tw = achievable_twist(model, speed, 0.0)
    arc = Arc(duration, tw, nominal_input(model, tw), np.zeros(4))
    return NominalTrajectory(model, [arc], name="line", periodic=False,
                             meta={"speed": speed, "duration": duration})


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class MpcConfig:
    h: float
    q: tuple[float, ...]
    q_n: tuple[float, ...]
    r: tuple[float, ...]
    w: tuple[float, ...]
    segments: tuple[int, ...]

    def __post_init__(self):
        for name in ("q", "q_n", "r", "w", "segments"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.h > 0:
            raise ValueError("h must be positive")
        if any(s <= 0 for s in self.segments):
            raise ValueError("segment lengths must be positive")
        if len(self.w) != len(self.segments):
            raise ValueError("one mode weight per segment required")
        if min(self.q) < 0 or min(self.q_n) < 0 or min(self.w) < 0:
            raise ValueError("Q, Q_N and W must be non-negative")
        if min(self.r) <= 0:
            raise ValueError("R must be positive definite")

    @property
    def N(self) -> int:
        return sum(self.segments)

    @property
    def M(self) -> int:
        return len(self.segments)

    def with_segments(self, segments: Sequence[int], w: Sequence[float] | None = None) -> "MpcConfig":
        w = tuple(w) if w is not None else tuple(self.w[:len(segments)]) + (0.0,) * max(0, len(segments) - len(self.w))
        return MpcConfig(self.h, self.q, self.q_n, self.r, w, tuple(segments))


PAPER_SEGMENTS = (1, 5, 5, 5, 5, 5, 5, 4)
PAPER_W = tuple(0.1 * v for v in (0, 3, 1, 1, 1, 0, 0, 0))


def case_a_config() -> MpcConfig:
    return MpcConfig(h=0.3, q=tuple(10 * v for v in (3, 3, 0.1, 0)),
                     q_n=tuple(2000 * v for v in (3, 3, 0.1, 0)),
                     r=tuple(0.5 * v for v in (1, 1, 0.01)), w=PAPER_W, segments=PAPER_SEGMENTS)


def case_b_config() -> MpcConfig:
    return MpcConfig(h=0.3, q=tuple(10 * v for v in (1, 1, 1, 0.1)),
                     q_n=tuple(2000 * v for v in (1, 1, 1, 0.1)),
                     r=(1, 1, 1, 1, 0.01), w=PAPER_W, segments=PAPER_SEGMENTS)


# --------------------------------------------------------------------------
# condensed problem

class MpcProblem:
    """Condensed MPC for one nominal window, reusable across error states.

    Decision variables are the stacked input deviations; internally the QP is
    kept in force-cone coordinates ``z`` (see :func:`modes.force_transform`)
    where every mode schedule is a set of simple bounds.
    """

    def __init__(self, model: PusherSlider, traj: NominalTrajectory, t0: float, config: MpcConfig):
        self.model, self.traj, self.t0, self.config = model, traj, t0, config
        N, nx, nu, h = config.N, model.n_x, model.n_u, config.h
        self.N, self.nx, self.nu = N, nx, nu
        self.times = t0 + h * np.arange(N)
        self.u_nom = np.array([traj.input(t) for t in self.times])
        As, Bs = zip(*(traj.linearization(t) for t in self.times))
        self.A = np.array(As)
        self.B = np.array(Bs)

        Ad = np.eye(nx)[None] + h * self.A
        Bd = h * self.B
        Sx = np.zeros((N * nx, nx))
        Su = np.zeros((N * nx, N * nu))
        prev_x, prev_u = np.eye(nx), np.zeros((nx, N * nu))
        for i in range(N):
            rx = Ad[i] @ prev_x
            ru = Ad[i] @ prev_u
            ru[:, i * nu:(i + 1) * nu] += Bd[i]
            Sx[i * nx:(i + 1) * nx] = rx
            Su[i * nx:(i + 1) * nx] = ru
            prev_x, prev_u = rx, ru
        self.Sx, self.Su = Sx, Su
        qbar = np.tile(np.asarray(config.q, dtype=float), N)
        qbar[-nx:] += np.asarray(config.q_n, dtype=float)
        rbar = np.tile(np.asarray(config.r, dtype=float), N)
        self.qbar, self.rbar = qbar, rbar

        T = force_transform(model)
        self.T = T
        Suz = (Su.reshape(N * nx, N, nu) @ T).reshape(N * nx, N * nu)
        Rz = T.T @ np.diag(config.r) @ T
        QSu = Suz * qbar[:, None]
        self.Hz = 2.0 * (Suz.T @ QSu + np.kron(np.eye(N), Rz))
        self.Hz = 0.5 * (self.Hz + self.Hz.T)
        self.Fz = 2.0 * (QSu.T @ Sx)
        self.P0 = Sx.T @ (Sx * qbar[:, None])
        self.Suz = Suz
        self.z_nom = np.linalg.solve(T, self.u_nom.T).T

        self.step_of_segment = np.repeat(np.arange(config.M), config.segments)
        self._bounds = {}
        for mode in (None, *ContactMode):
            lo, hi = mode_bounds(model, mode)
            self._bounds[mode] = (lo[None] - self.z_nom, hi[None] - self.z_nom)
        self._seg_slices = []
        k = 0
        for n in config.segments:
            self._seg_slices.append(slice(k * nu, (k + n) * nu))
            k += n

    # -- coordinates -------------------------------------------------------
    def z_to_u(self, z: np.ndarray) -> np.ndarray:
        return (z.reshape(self.N, self.nu) @ self.T.T).reshape(-1)

    def constant(self, x0) -> float:
        x0 = np.asarray(x0, dtype=float)
        return float(x0 @ self.P0 @ x0)

    def bounds(self, modes: Sequence[ContactMode | None]) -> tuple[np.ndarray, np.ndarray]:
        """Deviation bounds for a (possibly partial) schedule; missing segments are relaxed."""
        lo = np.empty(self.N * self.nu)
        hi = np.empty(self.N * self.nu)
        for m in range(self.config.M):
            mode = modes[m] if m < len(modes) else None
            blo, bhi = self._bounds[mode]
            sl = self._seg_slices[m]
            steps = slice(sl.start // self.nu, sl.stop // self.nu)
            lo[sl] = blo[steps].reshape(-1)
            hi[sl] = bhi[steps].reshape(-1)
        return lo, hi

    def mode_cost(self, modes: Sequence[ContactMode]) -> float:
        return float(sum(w for w, m in zip(self.config.w, modes) if m != ContactMode.STICKING))

    def solve_modes(self, modes: Sequence[ContactMode | None], x0, warm: np.ndarray | None = None) -> QpSolution:
        lo, hi = self.bounds(modes)
        return solve_bounded_qp(self.Hz, self.Fz @ np.asarray(x0, dtype=float), lo, hi, warm_start=warm)

    def predicted_states(self, x0, u_bar: np.ndarray) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        xs = (self.Sx @ x0 + self.Su @ u_bar).reshape(self.N, self.nx)
        return np.vstack([x0, xs])

    def rollout(self, x0, u_bar: np.ndarray) -> np.ndarray:
        """Forward-Euler recursion, independent of the condensed matrices."""
        xs = [np.asarray(x0, dtype=float)]
        ub = u_bar.reshape(self.N, self.nu)
        for i in range(self.N):
            x = xs[-1]
            xs.append(x + self.config.h * (self.A[i] @ x + self.B[i] @ ub[i]))
        return np.array(xs)

    def cost(self, x0, u_bar: np.ndarray) -> float:
        xs = self.rollout(x0, u_bar)[1:]
        ub = u_bar.reshape(self.N, self.nu)
        q, qn, r = (np.asarray(v, dtype=float) for v in (self.config.q, self.config.q_n, self.config.r))
        J = float(np.sum(xs**2 * q) + np.sum(ub**2 * r))
        return J + float(xs[-1] ** 2 @ qn)

    # -- general-form view -------------------------------------------------
    def qp(self, schedule: ModeSchedule | Sequence[ContactMode | None] | None, x0) -> QpProblem:
        """Condensed QP on the stacked input deviations with explicit constraint rows."""
        x0 = np.asarray(x0, dtype=float)
        N, nu = self.N, self.nu
        QSu = self.Su * self.qbar[:, None]
        H = 2.0 * (self.Su.T @ QSu + np.diag(self.rbar))
        H = 0.5 * (H + H.T)
        f = 2.0 * (QSu.T @ (self.Sx @ x0))
        if schedule is None:
            modes: Sequence[ContactMode | None] = [None] * self.config.M
        elif isinstance(schedule, ModeSchedule):
            modes = schedule.modes
        else:
            modes = list(schedule)
        Es, es, Gs, gs = [], [], [], []
        for i in range(N):
            mode = modes[self.step_of_segment[i]] if self.step_of_segment[i] < len(modes) else None
            cs = step_constraints(self.model, mode).shifted(self.u_nom[i])
            blk_E = np.zeros((cs.E.shape[0], N * nu))
            blk_E[:, i * nu:(i + 1) * nu] = cs.E
            blk_G = np.zeros((cs.G.shape[0], N * nu))
            blk_G[:, i * nu:(i + 1) * nu] = cs.G
            Es.append(blk_E); es.append(cs.e); Gs.append(blk_G); gs.append(cs.g)
        return QpProblem(H, f, np.vstack(Es), np.concatenate(es), np.vstack(Gs), np.concatenate(gs))


def condense(model: PusherSlider, traj: NominalTrajectory, t0: float, config: MpcConfig,
             schedule: ModeSchedule | None, x0) -> QpProblem:
    return MpcProblem(model, traj, t0, config).qp(schedule, x0)


# --------------------------------------------------------------------------
# solvers

@dataclass
class MpcResult:
    u0: np.ndarray
    u_bar: np.ndarray
    schedule: ModeSchedule
    objective: float
    qp_objective: float
    mode_cost: float
    solve_time: float
    predicted: np.ndarray
    status: QpStatus = QpStatus.OPTIMAL
    nodes: int = 0
    leaves: int = 0
    z: np.ndarray = field(default=None, repr=False)

    @property
    def u0_bar(self) -> np.ndarray:
        return self.u_bar[: len(self.u0)]


def _tie_tol(c0: float) -> float:
    # the QP part and the constant nearly cancel near the reference, so
    # round-off scales with the constant, not with the total
    return TIE_TOL * (1.0 + abs(c0))


def _better(obj: float, modes: tuple, best, tol: float) -> bool:
    if best is None:
        return True
    return obj < best[0] - tol or (abs(obj - best[0]) <= tol and modes < best[1])


def _result(prob: MpcProblem, modes, sol: QpSolution, x0, t_start, mode_cost, nodes=0, leaves=0) -> MpcResult:
    schedule = ModeSchedule(tuple(modes), prob.config.segments)
    u_bar = prob.z_to_u(sol.z)
    qp_obj = sol.objective + prob.constant(x0)
    return MpcResult(u0=u_bar[: prob.nu] + prob.u_nom[0], u_bar=u_bar, schedule=schedule,
                     objective=qp_obj + mode_cost, qp_objective=qp_obj, mode_cost=mode_cost,
                     solve_time=time.perf_counter() - t_start,
                     predicted=prob.predicted_states(x0, u_bar), status=sol.status,
                     nodes=nodes, leaves=leaves, z=sol.z)


def solve_mpc_learned(prob: MpcProblem, schedule: ModeSchedule, x0, warm: np.ndarray | None = None) -> MpcResult:
    """Single convex QP with the schedule fixed; no mode cost."""
    t_start = time.perf_counter()
    if tuple(schedule.segment_lengths) != tuple(prob.config.segments):
        raise ValueError("schedule segment structure does not match the controller")
    sol = prob.solve_modes(schedule.modes, x0, warm)
    if not sol.optimal:
        raise MpcInfeasibleError(f"learned-mode QP returned {sol.status.value} for {schedule}")
    return _result(prob, schedule.modes, sol, x0, t_start, 0.0)


def solve_mpc_miqp(prob: MpcProblem, x0) -> MpcResult:
    """Exhaustive search over all 3^M schedules (lexicographic, Sticking first)."""
    t_start = time.perf_counter()
    x0 = np.asarray(x0, dtype=float)
    c0 = prob.constant(x0)
    tol = _tie_tol(c0)
    best = None
    warm = None
    count = 0
    for modes in itertools.product(tuple(ContactMode), repeat=prob.config.M):
        sol = prob.solve_modes(modes, x0, warm)
        count += 1
        if not sol.optimal:
            continue
        warm = sol.z
        obj = sol.objective + c0 + prob.mode_cost(modes)
        if _better(obj, modes, best, tol):
            best = (obj, modes, sol)
    if best is None:
        raise MpcInfeasibleError("no feasible mode schedule")
    _, modes, sol = best
    sol = _cold_resolve(prob, modes, x0, sol)
    return _result(prob, modes, sol, x0, t_start, prob.mode_cost(modes), nodes=count, leaves=count)


def _cold_resolve(prob: MpcProblem, modes, x0, sol: QpSolution) -> QpSolution:
    """Re-solve the winning schedule without a warm start.

    The result then depends only on (problem, x0, schedule), not on the
    search order that found it, so exact solvers agree bit for bit.
    """
    again = prob.solve_modes(modes, x0)
    return again if again.optimal else sol


def _round_relaxed(prob: MpcProblem, z: np.ndarray) -> tuple[ContactMode, ...]:
    phidot = (z.reshape(prob.N, prob.nu)[:, -1] + prob.z_nom[:, -1])
    modes = []
    k = 0
    for n in prob.config.segments:
        s = float(np.sum(phidot[k:k + n]))
        k += n
        if s > 1e-6:
            modes.append(ContactMode.SLIDING_LEFT)
        elif s < -1e-6:
            modes.append(ContactMode.SLIDING_RIGHT)
        else:
            modes.append(ContactMode.STICKING)
    return tuple(modes)


def branch_and_bound(prob: MpcProblem, x0, heuristic: bool = True) -> MpcResult:
    """Exact MIQP by depth-first branch-and-bound over schedule prefixes.

    Lower bounds relax the undecided segments to the friction cone alone.
    Ties are resolved exactly as in :func:`solve_mpc_miqp`, so both return the
    same schedule.
    """
    t_start = time.perf_counter()
    M = prob.config.M
    x0 = np.asarray(x0, dtype=float)
    c0 = prob.constant(x0)
    tol = _tie_tol(c0)
    best = None  # (objective, modes, solution)
    nodes = leaves = 0

    root = prob.solve_modes((), x0)
    nodes += 1
    if not root.optimal:
        raise MpcInfeasibleError("relaxed root problem is not solvable")

    def leaf(modes, warm):
        nonlocal best, leaves, nodes
        sol = prob.solve_modes(modes, x0, warm)
        nodes += 1
        leaves += 1
        if sol.optimal:
            obj = sol.objective + c0 + prob.mode_cost(modes)
            if _better(obj, modes, best, tol):
                best = (obj, modes, sol)

    if heuristic:
        leaf(_round_relaxed(prob, root.z), root.z)

    def prunable(lb: float, prefix: tuple) -> bool:
        if best is None:
            return False
        lb = lb - 1e-12 * (1.0 + abs(c0))
        if lb > best[0] + tol:
            return True
        return lb >= best[0] - tol and prefix > best[1][: len(prefix)]

    seen_leaves = set()
    if best is not None:
        seen_leaves.add(best[1])
    stack = [((), root.objective + c0, root.z)]
    while stack:
        prefix, lb, z = stack.pop()
        if prunable(lb, prefix):
            continue
        children = []
        for mode in ContactMode:
            modes = prefix + (mode,)
            # the parent bound plus the added mode cost bounds every completion
            parent_lb = lb + prob.mode_cost(modes) - prob.mode_cost(prefix)
            if modes in seen_leaves or prunable(parent_lb, modes):
                continue
            if len(modes) == M:
                seen_leaves.add(modes)
                leaf(modes, z)
                continue
            lo, hi = prob.bounds(modes)
            if np.all(z >= lo) and np.all(z <= hi):
                # parent's relaxed optimum already respects this mode
                child_lb, child_z = parent_lb, z
            else:
                sol = prob.solve_modes(modes, x0, z)
                nodes += 1
                if not sol.optimal:
                    continue
                child_lb, child_z = sol.objective + c0 + prob.mode_cost(modes), sol.z
            if not prunable(child_lb, modes):
                children.append((child_lb, modes, child_z))
        # depth-first, most promising child explored first
        children.sort(key=lambda c: (c[0], c[1]), reverse=True)
        stack.extend((m, lb_, z_) for lb_, m, z_ in children)

    if best is None:
        raise MpcInfeasibleError("no feasible mode schedule")
    obj, modes, sol = best
    sol = _cold_resolve(prob, modes, x0, sol)
    return _result(prob, modes, sol, x0, t_start, prob.mode_cost(modes), nodes=nodes, leaves=leaves)
