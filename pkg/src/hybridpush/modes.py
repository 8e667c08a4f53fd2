"""Coulomb contact modes as polyhedral input constraints, and mode schedules."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dynamics import PusherSlider


class ContactMode(enum.IntEnum):
    # order doubles as the tie-break preference
    STICKING = 0
    SLIDING_LEFT = 1
    SLIDING_RIGHT = 2

    @property
    def letter(self) -> str:
        return "SLR"[self.value]

    @classmethod
    def from_letter(cls, ch: str) -> "ContactMode":
        try:
            return cls("SLR".index(ch.strip().upper()))
        except ValueError:
            raise ValueError(f"unknown contact mode {ch!r}") from None

    def mirrored(self) -> "ContactMode":
        return (ContactMode.STICKING, ContactMode.SLIDING_RIGHT, ContactMode.SLIDING_LEFT)[self.value]


@dataclass(frozen=True)
class ModeSchedule:
    modes: tuple[ContactMode, ...]
    segment_lengths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(ContactMode(m) for m in self.modes))
        object.__setattr__(self, "segment_lengths", tuple(int(n) for n in self.segment_lengths))
        if len(self.modes) != len(self.segment_lengths):
            raise ValueError("one mode per segment required")
        if any(n <= 0 for n in self.segment_lengths):
            raise ValueError("segment lengths must be positive")

    @property
    def M(self) -> int:
        return len(self.modes)

    @property
    def N(self) -> int:
        return sum(self.segment_lengths)

    def per_step(self) -> list[ContactMode]:
        out: list[ContactMode] = []
        for mode, n in zip(self.modes, self.segment_lengths):
            out.extend([mode] * n)
        return out

    def to_string(self) -> str:
        return ",".join(m.letter for m in self.modes)

    def __str__(self) -> str:
        return self.to_string()

    @classmethod
    def from_string(cls, text: str, segment_lengths: Sequence[int]) -> "ModeSchedule":
        letters = [s for s in text.replace(" ", "").split(",") if s] if "," in text else list(text.strip())
        return cls(tuple(ContactMode.from_letter(c) for c in letters), tuple(segment_lengths))

    @classmethod
    def all_sticking(cls, segment_lengths: Sequence[int]) -> "ModeSchedule":
        return cls((ContactMode.STICKING,) * len(segment_lengths), tuple(segment_lengths))

    def mirrored(self) -> "ModeSchedule":
        return ModeSchedule(tuple(m.mirrored() for m in self.modes), self.segment_lengths)

    def sliding_mask(self) -> np.ndarray:
        return np.array([m != ContactMode.STICKING for m in self.modes], dtype=bool)


def enumerate_schedules(segment_lengths: Sequence[int]) -> Iterator[ModeSchedule]:
    """All 3^M schedules in lexicographic (Sticking first) order."""
    for combo in itertools.product(ContactMode, repeat=len(segment_lengths)):
        yield ModeSchedule(combo, tuple(segment_lengths))


@dataclass(frozen=True)
class LinearConstraintSet:
    """``E u = e`` and ``G u <= g`` on the full per-step input vector."""

    E: np.ndarray
    e: np.ndarray
    G: np.ndarray
    g: np.ndarray

    @classmethod
    def empty(cls, n_u: int) -> "LinearConstraintSet":
        return cls(np.zeros((0, n_u)), np.zeros(0), np.zeros((0, n_u)), np.zeros(0))

    def __and__(self, other: "LinearConstraintSet") -> "LinearConstraintSet":
        return LinearConstraintSet(
            np.vstack([self.E, other.E]), np.concatenate([self.e, other.e]),
            np.vstack([self.G, other.G]), np.concatenate([self.g, other.g]),
        )

    def shifted(self, u_nominal) -> "LinearConstraintSet":
        """Same set expressed on the deviation ``u - u_nominal``."""
        u_nominal = np.asarray(u_nominal, dtype=float)
        return LinearConstraintSet(self.E, self.e - self.E @ u_nominal,
                                   self.G, self.g - self.G @ u_nominal)

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        eq_ok = np.all(np.abs(self.E @ u - self.e) <= tol) if len(self.e) else True
        in_ok = np.all(self.G @ u - self.g <= tol) if len(self.g) else True
        return bool(eq_ok and in_ok)

    def max_violation(self, u) -> float:
        u = np.asarray(u, dtype=float)
        v = [0.0]
        if len(self.e):
            v.append(float(np.max(np.abs(self.E @ u - self.e))))
        if len(self.g):
            v.append(float(np.max(self.G @ u - self.g)))
        return max(v)


def _index(model: PusherSlider, c: int) -> tuple[int, int, int]:
    if not 0 <= c < model.n_c:
        raise IndexError(f"contact index {c} out of range for {model.n_c} contacts")
    return c, model.n_c + c, model.n_u - 1


def mode_independent_constraints(c: int, model: PusherSlider) -> LinearConstraintSet:
    """Compressive normal force inside the friction cone at contact ``c``."""
    i_n, i_t, _ = _index(model, c)
    mu = model.params.mu_p
    G = np.zeros((3, model.n_u))
    G[0, i_n] = -1.0
    G[1, i_t], G[1, i_n] = 1.0, -mu
    G[2, i_t], G[2, i_n] = -1.0, -mu
    return LinearConstraintSet(np.zeros((0, model.n_u)), np.zeros(0), G, np.zeros(3))


def mode_constraints(mode: ContactMode, c: int, model: PusherSlider) -> LinearConstraintSet:
    """Mode-dependent rows at contact ``c``; strict velocity signs are closed."""
    i_n, i_t, i_phi = _index(model, c)
    mu = model.params.mu_p
    n_u = model.n_u
    mode = ContactMode(mode)
    if mode == ContactMode.STICKING:
        E = np.zeros((1, n_u))
        E[0, i_phi] = 1.0
        return LinearConstraintSet(E, np.zeros(1), np.zeros((0, n_u)), np.zeros(0))
    sign = 1.0 if mode == ContactMode.SLIDING_LEFT else -1.0
    E = np.zeros((1, n_u))
    E[0, i_t], E[0, i_n] = 1.0, -sign * mu
    G = np.zeros((1, n_u))
    G[0, i_phi] = -sign
    return LinearConstraintSet(E, np.zeros(1), G, np.zeros(1))


def step_constraints(model: PusherSlider, mode: ContactMode | None) -> LinearConstraintSet:
    """All contacts' constraints for one time step; ``mode=None`` keeps only C0.

    The line pusher shares a single mode across its contacts, so the
    placement-velocity rows are de-duplicated.
    """
    cs = LinearConstraintSet.empty(model.n_u)
    for c in range(model.n_c):
        cs = cs & mode_independent_constraints(c, model)
    if mode is None:
        return cs
    for c in range(model.n_c):
        mc = mode_constraints(mode, c, model)
        if c > 0:
            # rows touching only phi_dot are already present from contact 0
            keep_e = np.any(mc.E[:, :-1] != 0.0, axis=1)
            keep_g = np.any(mc.G[:, :-1] != 0.0, axis=1)
            mc = LinearConstraintSet(mc.E[keep_e], mc.e[keep_e], mc.G[keep_g], mc.g[keep_g])
        cs = cs & mc
    return cs


# Bound form.  Per contact, alpha = mu f_n + f_t and beta = mu f_n - f_t turn
# C0 into alpha, beta >= 0 and every mode into bounds on (alpha, beta, phi_dot).

def force_transform(model: PusherSlider) -> np.ndarray:
    """T with ``u = T @ z`` where ``z = [alpha..., beta..., phi_dot]``."""
    nc, mu = model.n_c, model.params.mu_p
    T = np.zeros((model.n_u, model.n_u))
    for c in range(nc):
        T[c, c] = T[c, nc + c] = 1.0 / (2 * mu)
        T[nc + c, c], T[nc + c, nc + c] = 0.5, -0.5
    T[-1, -1] = 1.0
    return T


def mode_bounds(model: PusherSlider, mode: ContactMode | None) -> tuple[np.ndarray, np.ndarray]:
    """Absolute bounds on ``z`` for C0 intersected with ``mode`` (None: C0 only)."""
    nc = model.n_c
    lo = np.zeros(model.n_u)
    hi = np.full(model.n_u, np.inf)
    lo[-1], hi[-1] = -np.inf, np.inf
    if mode is None:
        return lo, hi
    mode = ContactMode(mode)
    if mode == ContactMode.STICKING:
        lo[-1] = hi[-1] = 0.0
    elif mode == ContactMode.SLIDING_LEFT:
        hi[nc:2 * nc] = 0.0
        lo[-1] = 0.0
    else:
        hi[:nc] = 0.0
        hi[-1] = 0.0
    return lo, hi
