"""Dense convex QP solvers with KKT certification.

Problems are ``min 1/2 z'Hz + f'z  s.t.  E z = e,  G z <= g``.  Two primal
active-set solvers share the conventions: :func:`solve_qp` for general
polyhedral constraints and :func:`solve_bounded_qp` for simple bounds, which
is the form the MPC layer uses on-line.
"""
from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack

PSD_TOL = 1e-9
PHASE1_TOL = 1e-7
REG = 1e-9

_dposv = lapack.get_lapack_funcs("posv", dtype=np.float64)


class QpProblemError(ValueError):
    """The QP data violate the solver's preconditions."""


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    E: np.ndarray | None = None
    e: np.ndarray | None = None
    G: np.ndarray | None = None
    g: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = H.shape[0]
        f = np.asarray(self.f, dtype=float).reshape(n)
        E = np.zeros((0, n)) if self.E is None else np.asarray(self.E, dtype=float).reshape(-1, n)
        e = np.zeros(0) if self.e is None else np.asarray(self.e, dtype=float).reshape(-1)
        G = np.zeros((0, n)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, n)
        g = np.zeros(0) if self.g is None else np.asarray(self.g, dtype=float).reshape(-1)
        if H.shape != (n, n) or E.shape[0] != e.shape[0] or G.shape[0] != g.shape[0]:
            raise QpProblemError("inconsistent problem dimensions")
        for name, val in zip("HfEeGg", (H, f, E, e, G, g)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.f @ z)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.H)) or not np.all(np.isfinite(self.f)):
            raise QpProblemError("non-finite cost data")
        if not np.allclose(self.H, self.H.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(self.H).max())):
            raise QpProblemError("H is not symmetric")
        if self.n and np.linalg.eigvalsh(self.H).min() < -PSD_TOL:
            raise QpProblemError("H is not positive semidefinite")


@dataclass
class QpSolution:
    z: np.ndarray
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    objective: float
    status: QpStatus
    kkt_residual: float = float("nan")
    iterations: int = 0
    active: tuple[int, ...] = field(default=())

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass(frozen=True)
class KktReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


def check_kkt(p: QpProblem, s: QpSolution) -> KktReport:
    z = s.z
    grad = p.H @ z + p.f + p.E.T @ s.lambda_eq + p.G.T @ s.mu_ineq
    slack = p.G @ z - p.g
    primal = 0.0
    if len(p.e):
        primal = float(np.max(np.abs(p.E @ z - p.e)))
    if len(p.g):
        primal = max(primal, float(np.max(slack, initial=0.0)))
    dual = float(max(0.0, -np.min(s.mu_ineq, initial=0.0)))
    comp = float(np.max(np.abs(s.mu_ineq * slack), initial=0.0))
    return KktReport(float(np.max(np.abs(grad), initial=0.0)), primal, dual, comp)


def _phase1(p: QpProblem) -> np.ndarray | None:
    """Feasible point minimizing total constraint violation, or None."""
    n, me, mi = p.n, len(p.e), len(p.g)
    if me == 0 and mi == 0:
        return np.zeros(n)
    # variables: z (free), s_i >= 0 for G, s+ / s- >= 0 for E
    c = np.concatenate([np.zeros(n), np.ones(mi), np.ones(2 * me)])
    A_ub = np.hstack([p.G, -np.eye(mi), np.zeros((mi, 2 * me))]) if mi else None
    A_eq = np.hstack([p.E, np.zeros((me, mi)), np.eye(me), -np.eye(me)]) if me else None
    bounds = [(None, None)] * n + [(0, None)] * (mi + 2 * me)
    res = optimize.linprog(c, A_ub=A_ub, b_ub=p.g if mi else None, A_eq=A_eq,
                           b_eq=p.e if me else None, bounds=bounds, method="highs")
    if res.status != 0 or res.fun > PHASE1_TOL:
        return None
    if mi == 0:
        return res.x[:n]
    # move off the vertex: per-row slack (capped at unit distance), so only
    # rows that are tight everywhere on the feasible set start active
    norms = np.linalg.norm(p.G, axis=1)
    norms[norms == 0] = 1.0
    c = np.concatenate([np.zeros(n), -np.ones(mi)])
    A_ub = np.hstack([p.G, np.diag(norms)])
    A_eq = np.hstack([p.E, np.zeros((me, mi))]) if me else None
    bounds = [(None, None)] * n + [(0, 1)] * mi
    inner = optimize.linprog(c, A_ub=A_ub, b_ub=p.g, A_eq=A_eq, b_eq=p.e if me else None,
                             bounds=bounds, method="highs")
    return inner.x[:n] if inner.status == 0 else res.x[:n]


def _kkt_solve(H, C, rhs_top, rhs_bot):
    """Solve [[H, C'], [C, 0]] [p; lam] = [rhs_top; rhs_bot]."""
    n, m = H.shape[0], C.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = H
    K[:n, n:] = C.T
    K[n:, :n] = C
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        sol = np.linalg.solve(K, rhs)
        if np.all(np.isfinite(sol)) and np.linalg.norm(K @ sol - rhs) <= 1e-9 * (1 + np.linalg.norm(rhs)):
            return sol[:n], sol[n:]
    except np.linalg.LinAlgError:
        pass
    K[:n, :n] += REG * np.eye(n)
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _nullspace_step(H, C, grad, stationary=False):
    """Minimize the model along null(C); return the step and multipliers.

    An orthonormal null-space basis keeps ``C @ step`` at round-off level even
    when the full KKT matrix is badly conditioned.
    """
    n, m = H.shape[0], C.shape[0]
    if m == 0:
        Z, Y, Rf = np.eye(n), np.zeros((n, 0)), np.zeros((0, 0))
    else:
        Q, Rf = np.linalg.qr(C.T, mode="complete")
        Y, Z, Rf = Q[:, :m], Q[:, m:], Rf[:m]
    if Z.shape[1] and not stationary:
        Hr = Z.T @ H @ Z
        rhs = -(Z.T @ grad)
        try:
            c, low = linalg.cho_factor(Hr)
            y = linalg.cho_solve((c, low), rhs)
        except linalg.LinAlgError:
            y = np.linalg.lstsq(Hr + REG * np.eye(len(rhs)), rhs, rcond=None)[0]
        step = Z @ y
    else:
        step = np.zeros(n)
    if m:
        r = -(grad + H @ step)
        try:
            mult = linalg.solve_triangular(Rf, Y.T @ r)
        except linalg.LinAlgError:
            mult = np.linalg.lstsq(C.T, r, rcond=None)[0]
    else:
        mult = np.zeros(0)
    return step, mult


def _independent_rows(p: QpProblem, rows: Sequence[int]) -> list[int]:
    """Greedy subset of inequality ``rows`` independent of each other and of E."""
    keep: list[int] = []
    basis = p.E.copy()
    rank = np.linalg.matrix_rank(basis) if len(p.e) else 0
    for i in rows:
        if rank >= p.n:
            break
        trial = np.vstack([basis, p.G[i]])
        r = np.linalg.matrix_rank(trial)
        if r > rank:
            basis, rank = trial, r
            keep.append(int(i))
    return keep


def solve_qp(p: QpProblem, warm_start: Sequence[int] | None = None,
             max_iter: int | None = None) -> QpSolution:
    """Primal active-set method.

    ``warm_start`` is a guess of the active inequality rows; it is used when
    the corresponding equality-constrained point is feasible, otherwise the
    solver starts from a phase-1 point.
    """
    p.validate()
    n, me, mi = p.n, len(p.e), len(p.g)
    cap = max_iter if max_iter is not None else 10 * (n + mi)
    tol_feas = 1e-9

    z = None
    W: list[int] = []
    if warm_start:
        W = _independent_rows(p, sorted(set(int(i) for i in warm_start if 0 <= int(i) < mi)))
        C = np.vstack([p.E, p.G[W]])
        z0, _ = _kkt_solve(p.H, C, -p.f, np.concatenate([p.e, p.g[W]]))
        if (mi == 0 or np.all(p.G @ z0 - p.g <= tol_feas)) and (me == 0 or np.all(np.abs(p.E @ z0 - p.e) <= tol_feas)):
            z = z0
        else:
            W = []
    if z is None:
        z = _phase1(p)
        if z is None:
            return QpSolution(np.full(n, np.nan), np.zeros(me), np.zeros(mi), float("nan"),
                              QpStatus.INFEASIBLE)
        W = _independent_rows(p, np.flatnonzero(np.abs(p.G @ z - p.g) <= 1e-9).tolist())

    lam = np.zeros(me)
    mu_w = np.zeros(len(W))
    status = QpStatus.MAX_ITER
    it = 0
    # after a full unblocked step z minimizes over the working set already
    at_min = False
    for it in range(1, cap + 1):
        grad = p.H @ z + p.f
        C = np.vstack([p.E, p.G[W]]) if W else p.E
        step, mult = _nullspace_step(p.H, C, grad, stationary=at_min)
        scale = 1.0 + np.abs(z).max(initial=0.0)
        if at_min or np.abs(step).max(initial=0.0) <= 1e-10 * scale:
            at_min = False
            lam, mu_w = mult[:me], mult[me:]
            if len(W) == 0 or mu_w.min() >= -1e-10:
                status = QpStatus.OPTIMAL
                break
            W.pop(int(np.argmin(mu_w)))
            continue
        alpha, block = 1.0, None
        if mi:
            Gp = p.G @ step
            slack = p.g - p.G @ z
            # rows dependent on the working set see only round-off here
            tiny = 1e-10 * np.linalg.norm(p.G, axis=1) * np.linalg.norm(step)
            for i in np.flatnonzero(Gp > tiny):
                if i in W:
                    continue
                a = max(slack[i], 0.0) / Gp[i]
                if a < alpha:
                    alpha, block = a, int(i)
        z = z + alpha * step
        if block is not None:
            W.append(block)
        else:
            at_min = True

    mu = np.zeros(mi)
    if W and status is QpStatus.OPTIMAL:
        mu[W] = np.maximum(mu_w, 0.0)
    sol = QpSolution(z, lam, mu, p.objective(z), status, iterations=it, active=tuple(sorted(W)))
    sol.kkt_residual = check_kkt(p, sol).max
    return sol


def solve_bounded_qp(H: np.ndarray, f: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                     warm_start: np.ndarray | None = None, max_iter: int | None = None) -> QpSolution:
    """Primal active-set method for ``min 1/2 z'Hz + f'z  s.t.  lower <= z <= upper``.

    H must be positive definite on the free variables.  ``warm_start`` is a
    previous primal solution; its pattern of variables sitting at a bound seeds
    the working set.  Multipliers are returned as ``mu_ineq = [mu_lower, mu_upper]``
    matching the rows ``[-I; I]``.
    """
    n = H.shape[0]
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        return QpSolution(np.full(n, np.nan), np.zeros(0), np.zeros(2 * n), float("nan"), QpStatus.INFEASIBLE)
    cap = max_iter if max_iter is not None else 10 * (n + 2 * n)
    fixed = lower == upper

    z = np.zeros(n) if warm_start is None else np.array(warm_start, dtype=float)
    np.clip(z, lower, upper, out=z)
    # working-set state: -1 at lower, +1 at upper, 0 free
    state = np.zeros(n, dtype=np.int8)
    state[z == lower] = -1
    state[(z == upper) & ~fixed] = 1
    status = QpStatus.MAX_ITER
    it = 0
    for it in range(1, cap + 1):
        idx = np.flatnonzero(state == 0)
        g = H @ z + f
        if idx.size:
            Hff = H[np.ix_(idx, idx)]
            _, step_f, info = _dposv(Hff, -g[idx], overwrite_a=1, overwrite_b=0)
            if info != 0:
                Hff = H[np.ix_(idx, idx)] + REG * np.eye(idx.size)
                step_f = -np.linalg.lstsq(Hff, g[idx], rcond=None)[0]
            zf = z[idx]
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(step_f < 0, (lower[idx] - zf) / step_f,
                                 np.where(step_f > 0, (upper[idx] - zf) / step_f, np.inf))
            j = int(np.argmin(ratio))
            if ratio[j] < 1.0:
                a = max(ratio[j], 0.0)
                z[idx] = zf + a * step_f
                k = idx[j]
                if step_f[j] < 0:
                    z[k], state[k] = lower[k], -1
                else:
                    z[k], state[k] = upper[k], 1
                continue
            z[idx] = zf + step_f
            g = H @ z + f
        # multipliers of the bounds in the working set
        mult = np.where(state == -1, g, np.where(state == 1, -g, 0.0))
        mult[fixed] = 0.0
        worst = int(np.argmin(mult))
        if mult[worst] >= -1e-11 * (1.0 + np.abs(g).max(initial=0.0)):
            status = QpStatus.OPTIMAL
            break
        state[worst] = 0

    g = H @ z + f
    mu_lo = np.where(state == -1, np.maximum(g, 0.0), 0.0)
    mu_hi = np.where(state == 1, np.maximum(-g, 0.0), 0.0)
    # fixed variables carry whatever sign the gradient demands
    mu_lo[fixed] = np.maximum(g[fixed], 0.0)
    mu_hi[fixed] = np.maximum(-g[fixed], 0.0)
    obj = float(0.5 * z @ H @ z + f @ z)
    sol = QpSolution(z, np.zeros(0), np.concatenate([mu_lo, mu_hi]), obj, status, iterations=it,
                     active=tuple(np.flatnonzero(state != 0)))
    resid = g - mu_lo + mu_hi
    viol = max(float(np.max(lower - z, initial=0.0)), float(np.max(z - upper, initial=0.0)))
    sol.kkt_residual = max(float(np.abs(resid).max(initial=0.0)), viol)
    return sol


def bounds_as_problem(H, f, lower, upper) -> QpProblem:
    """General-form view of a bound-constrained QP (rows ``[-I; I]``, infinite bounds dropped)."""
    n = len(f)
    I = np.eye(n)
    G = np.vstack([-I, I])
    g = np.concatenate([-np.asarray(lower, float), np.asarray(upper, float)])
    keep = np.isfinite(g)
    return QpProblem(H, f, G=G[keep], g=g[keep])


def dump_problem(p: QpProblem, stream: io.TextIOBase | None = None) -> str:
    """Plain-text dump: a ``name rows cols`` header, then row-major values."""
    buf = io.StringIO()
    for name in ("H", "f", "E", "e", "G", "g"):
        arr = np.atleast_2d(getattr(p, name))
        if getattr(p, name).ndim == 1:
            arr = arr.reshape(-1, 1)
        buf.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def load_problem(text: str) -> QpProblem:
    lines = iter(text.splitlines())
    mats = {}
    for header in lines:
        if not header.strip():
            continue
        name, rows, cols = header.split()
        rows, cols = int(rows), int(cols)
        vals = [list(map(float, next(lines).split())) if cols else [] for _ in range(rows)]
        arr = np.array(vals, dtype=float).reshape(rows, cols)
        mats[name] = arr.reshape(-1) if name in "feg" else arr
    return QpProblem(**mats)
