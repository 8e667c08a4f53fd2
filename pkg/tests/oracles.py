"""Independent reference computations used by the tests."""
import itertools
import math

import numpy as np


def mean_radius_monte_carlo(kind, size, n=1_000_000, seed=0):
    rng = np.random.default_rng(seed)
    if kind == "disc":
        # rejection sampling from the bounding square
        pts = rng.uniform(-size, size, (n, 2))
        pts = pts[np.hypot(pts[:, 0], pts[:, 1]) <= size]
    else:
        pts = rng.uniform(-size / 2, size / 2, (n, 2))
    return float(np.mean(np.hypot(pts[:, 0], pts[:, 1])))


def central_jacobians(f, x, u, h=1e-6):
    fx = np.column_stack([(f(x + h * e, u) - f(x - h * e, u)) / (2 * h) for e in np.eye(len(x))])
    fu = np.column_stack([(f(x, u + h * e) - f(x, u - h * e)) / (2 * h) for e in np.eye(len(u))])
    return fx, fu


def wrench_by_hand(points, normals, tangents, fn, ft):
    total = np.zeros(3)
    for p, n, d, a, b in zip(points, normals, tangents, fn, ft):
        F = np.asarray(n) * a + np.asarray(d) * b
        total += [F[0], F[1], p[0] * F[1] - p[1] * F[0]]
    return total


def exhaustive_active_set(H, f, E, e, G, g, tol=1e-9):
    """Best KKT point over every subset of active inequalities."""
    n = len(f)
    best = None
    mi = len(g)
    for k in range(mi + 1):
        for act in itertools.combinations(range(mi), k):
            C = np.vstack([E, G[list(act)]]) if len(e) or k else np.zeros((0, n))
            d = np.concatenate([e, g[list(act)]])
            m = len(d)
            K = np.block([[H, C.T], [C, np.zeros((m, m))]])
            rhs = np.concatenate([-f, d])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z = sol[:n]
            if len(g) and np.max(G @ z - g) > tol:
                continue
            if len(e) and np.max(np.abs(E @ z - e)) > tol:
                continue
            obj = 0.5 * z @ H @ z + f @ z
            if best is None or obj < best[0]:
                best = (obj, z)
    return best


def one_step_lqr(A, B, h, P, R, x0):
    """N=1 optimum of x1'P x1 + u'R u with x1 = (I + hA) x0 + hB u."""
    Ad = np.eye(len(x0)) + h * A
    Bd = h * B
    u = -np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad @ x0)
    x1 = Ad @ x0 + Bd @ u
    return u, float(x1 @ P @ x1 + u @ R @ u)


def disc_contact_by_geometry(phi, r):
    pos = np.array([-r * math.cos(phi), -r * math.sin(phi)])
    normal = -pos / r
    tangent = np.array([-normal[1], normal[0]])
    return pos, normal, tangent
