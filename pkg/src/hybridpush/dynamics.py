"""Quasi-static pusher-slider model.

The object slides on a table under an ellipsoidal limit surface; the pusher
applies normal and tangential forces at one or more contact points whose
placement along the object boundary is itself a state (``phi``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate

GRAVITY = 9.81


class ParameterError(ValueError):
    """Physical or configuration parameters are invalid."""


class GeometryError(ValueError):
    """Contact placement is outside the pushed face."""


@dataclass(frozen=True)
class PhysicalParams:
    mu_p: float = 0.3
    mu_g: float = 0.35
    mass: float = 0.827
    shape_kind: str = "disc"
    radius: float = 0.045
    side: float = 0.09
    pusher_kind: str = "point"
    pusher_width: float = 0.03
    # limit-surface normalization; None means k = f_max
    k: float | None = None
    gravity: float = GRAVITY

    def __post_init__(self):
        for name in ("mu_p", "mu_g", "mass", "gravity"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.shape_kind not in ("disc", "square"):
            raise ParameterError(f"unknown shape kind {self.shape_kind!r}")
        if self.pusher_kind not in ("point", "line"):
            raise ParameterError(f"unknown pusher kind {self.pusher_kind!r}")
        if self.shape_kind == "disc" and not self.radius > 0:
            raise ParameterError("disc radius must be positive")
        if self.shape_kind == "square" and not self.side > 0:
            raise ParameterError("square side must be positive")
        if self.pusher_kind == "line":
            if self.shape_kind != "square":
                raise ParameterError("line pusher requires a square object")
            if not 0 < self.pusher_width < self.side:
                raise ParameterError("line pusher width must satisfy 0 < d < a")
        if self.pusher_kind == "point" and self.shape_kind != "disc":
            raise ParameterError("point pusher is modelled on a disc object")
        if self.k is not None and not self.k > 0:
            raise ParameterError("limit surface normalization k must be positive")

    @property
    def n_contacts(self) -> int:
        return 2 if self.pusher_kind == "line" else 1

    def with_updates(self, **changes) -> "PhysicalParams":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return PhysicalParams(**values)


def case_a_params() -> PhysicalParams:
    """Point pusher on a disc."""
    return PhysicalParams()


def case_b_params() -> PhysicalParams:
    """Line pusher on a square."""
    return PhysicalParams(shape_kind="square", pusher_kind="line")


def mean_contact_radius(params: PhysicalParams) -> float:
    """Area-average of ``|p|`` over the object footprint (uniform pressure)."""
    if params.shape_kind == "disc":
        r = params.radius
        val, _ = integrate.quad(lambda rho: rho * rho * 2.0 * math.pi, 0.0, r)
        return val / (math.pi * r * r)
    half = params.side / 2.0
    val, _ = integrate.dblquad(
        lambda y, x: math.hypot(x, y), -half, half, -half, half, epsabs=1e-13, epsrel=1e-11
    )
    return val / (params.side * params.side)


@dataclass(frozen=True)
class LimitSurfaceModel:
    f_max: float
    m_max: float
    k: float
    A: np.ndarray = field(repr=False)

    @property
    def A_inv(self) -> np.ndarray:
        return np.diag(1.0 / np.diag(self.A))


def build_limit_surface(params: PhysicalParams) -> LimitSurfaceModel:
    f_max = params.mu_g * params.mass * params.gravity
    m_max = f_max * mean_contact_radius(params)
    k = f_max if params.k is None else params.k
    A = k * np.diag([1.0 / f_max**2, 1.0 / f_max**2, 1.0 / m_max**2])
    A.setflags(write=False)
    return LimitSurfaceModel(f_max=f_max, m_max=m_max, k=k, A=A)


class Wrench(NamedTuple):
    f_x: float
    f_y: float
    tau: float


class Twist(NamedTuple):
    v_x: float
    v_y: float
    omega: float


def twist_from_wrench(ls: LimitSurfaceModel, w) -> Twist:
    return Twist(*(ls.A @ np.asarray(w, dtype=float)))


def cross2(p, f) -> float:
    return p[0] * f[1] - p[1] * f[0]


@dataclass(frozen=True)
class ContactPoint:
    """A contact in the body frame together with its sensitivity to ``phi``."""

    position: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    d_position: np.ndarray
    d_normal: np.ndarray
    d_tangent: np.ndarray

    @property
    def jacobian(self) -> np.ndarray:
        """3x2 map from a body-frame contact force to the wrench it applies."""
        px, py = self.position
        return np.array([[1.0, 0.0], [0.0, 1.0], [-py, px]])

    def wrench_columns(self) -> np.ndarray:
        """Wrench per unit normal force and per unit tangential force (3x2)."""
        J = self.jacobian
        return np.column_stack([J @ self.normal, J @ self.tangent])


def point_pusher_contacts(phi: float, params: PhysicalParams) -> list[ContactPoint]:
    r = params.radius
    c, s = math.cos(phi), math.sin(phi)
    n = np.array([c, s])
    d = np.array([-s, c])
    return [ContactPoint(position=-r * n, normal=n, tangent=d,
                         d_position=-r * d, d_normal=d, d_tangent=-n)]


def line_pusher_contacts(p_c: float, params: PhysicalParams, tol: float = 1e-12) -> list[ContactPoint]:
    a, width = params.side, params.pusher_width
    if abs(p_c) + width / 2 > a / 2 + tol:
        raise GeometryError(f"line pusher at p_c={p_c} leaves the face (|p_c| <= {(a - width) / 2})")
    n = np.array([1.0, 0.0])
    d = np.array([0.0, 1.0])
    zero = np.zeros(2)
    return [
        ContactPoint(position=np.array([-a / 2, p_c + off]), normal=n, tangent=d,
                     d_position=np.array([0.0, 1.0]), d_normal=zero, d_tangent=zero)
        for off in (-width / 2, width / 2)
    ]


def assemble_wrench(contacts: Sequence[ContactPoint], f_n, f_t) -> np.ndarray:
    f_n = np.atleast_1d(np.asarray(f_n, dtype=float))
    f_t = np.atleast_1d(np.asarray(f_t, dtype=float))
    if not (len(contacts) == len(f_n) == len(f_t)):
        raise ValueError(f"{len(contacts)} contacts but {len(f_n)} normal / {len(f_t)} tangential forces")
    w = np.zeros(3)
    for cp, fn, ft in zip(contacts, f_n, f_t):
        w += cp.jacobian @ (cp.normal * fn + cp.tangent * ft)
    return w


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class SystemState:
    x: float
    y: float
    theta: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.phi])

    @classmethod
    def from_array(cls, v) -> "SystemState":
        return cls(*map(float, v))


@dataclass
class ControlInput:
    f_n: np.ndarray
    f_t: np.ndarray
    phi_dot: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.atleast_1d(self.f_n), np.atleast_1d(self.f_t), [self.phi_dot]])

    @classmethod
    def from_array(cls, v, n_contacts: int) -> "ControlInput":
        v = np.asarray(v, dtype=float)
        return cls(v[:n_contacts].copy(), v[n_contacts:2 * n_contacts].copy(), float(v[2 * n_contacts]))


class PusherSlider:
    """Pusher-slider dynamics for one of the supported pusher geometries.

    State is ``[x, y, theta, phi]``; input is ``[f_n..., f_t..., phi_dot]``
    with one normal and one tangential force per contact.
    """

    n_x = 4

    def __init__(self, params: PhysicalParams):
        self.params = params
        self.ls = build_limit_surface(params)
        self.n_c = params.n_contacts
        self.n_u = 2 * self.n_c + 1

    def contacts(self, phi: float) -> list[ContactPoint]:
        if self.params.pusher_kind == "point":
            return point_pusher_contacts(phi, self.params)
        return line_pusher_contacts(phi, self.params)

    def phi_limit(self) -> float:
        """Largest admissible ``|phi|`` (inf for the point pusher on a disc)."""
        if self.params.pusher_kind == "line":
            return (self.params.side - self.params.pusher_width) / 2
        return math.inf

    def wrench_matrix(self, phi: float) -> np.ndarray:
        """3 x 2C matrix W with ``w = W @ [f_n; f_t]``."""
        cols = [cp.wrench_columns() for cp in self.contacts(phi)]
        return np.column_stack([c[:, 0] for c in cols] + [c[:, 1] for c in cols])

    def body_twist(self, x, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.ls.A @ (self.wrench_matrix(x[3]) @ u[: 2 * self.n_c])

    def f(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = np.empty(4)
        out[:3] = rotation(x[2]) @ self.body_twist(x, u)
        out[3] = u[-1]
        return out

    def linearize(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """Analytic Jacobians ``(df/dx, df/du)``."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        nc = self.n_c
        theta, phi = x[2], x[3]
        f_n, f_t = u[:nc], u[nc:2 * nc]
        contacts = self.contacts(phi)
        W = np.column_stack([cp.wrench_columns()[:, 0] for cp in contacts]
                            + [cp.wrench_columns()[:, 1] for cp in contacts])
        R = rotation(theta)
        c, s = math.cos(theta), math.sin(theta)
        dR = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
        t = self.ls.A @ (W @ u[: 2 * nc])

        dw_dphi = np.zeros(3)
        for cp, fn, ft in zip(contacts, f_n, f_t):
            F = cp.normal * fn + cp.tangent * ft
            dF = cp.d_normal * fn + cp.d_tangent * ft
            dw_dphi[:2] += dF
            dw_dphi[2] += cross2(cp.d_position, F) + cross2(cp.position, dF)

        A = np.zeros((4, 4))
        A[:3, 2] = dR @ t
        A[:3, 3] = R @ (self.ls.A @ dw_dphi)
        B = np.zeros((4, self.n_u))
        B[:3, : 2 * nc] = R @ self.ls.A @ W
        B[3, -1] = 1.0
        return A, B


def state_derivative(model: PusherSlider, x, u) -> np.ndarray:
    return model.f(x, u)


def linearize(model: PusherSlider, x, u) -> tuple[np.ndarray, np.ndarray]:
    return model.linearize(x, u)


def rk4_step(model: PusherSlider, x, u, dt: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    k1 = model.f(x, u)
    k2 = model.f(x + 0.5 * dt * k1, u)
    k3 = model.f(x + 0.5 * dt * k2, u)
    k4 = model.f(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
