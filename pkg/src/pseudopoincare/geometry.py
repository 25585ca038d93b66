"""Poincaré-ball primitives on numpy arrays.

Every function treats the last axis as the vector axis and broadcasts over the
leading ones. Points live in the open ball of radius ``1/sqrt(c)``; all
ball-producing functions pass their result through :func:`project`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BALL_EPS = 1e-12
ARTANH_CLAMP = 1.0 - 1e-15


class BallError(ValueError):
    pass


def check_curvature(c: float) -> float:
    c = float(c)
    if not c > 0 or not math.isfinite(c):
        raise ValueError(f"curvature must be a positive finite number, got {c}")
    return c


def _norm(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=-1, keepdims=True)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1, keepdims=True)


def _same_space(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1:] != b.shape[-1:]:
        raise BallError(f"dimension mismatch: {a.shape[-1:]} vs {b.shape[-1:]}")


def project(p: np.ndarray, c: float, return_count: bool = False):
    """Pull points with sqrt(c)*||p|| >= 1 - BALL_EPS back inside the ball."""
    p = np.asarray(p, dtype=np.float64)
    sc = math.sqrt(c)
    r = sc * _norm(p)
    over = r >= 1.0 - BALL_EPS
    if np.any(over):
        p = np.where(over, p / np.where(over, r, 1.0) * (1.0 - 2 * BALL_EPS), p)
    if return_count:
        return p, int(np.count_nonzero(over))
    return p


def in_ball(p: np.ndarray, c: float) -> np.ndarray:
    return math.sqrt(c) * _norm(np.asarray(p))[..., 0] < 1.0 - BALL_EPS


def check_in_ball(p: np.ndarray, c: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not np.all(in_ball(p, c)):
        raise BallError("point outside the Poincaré ball")
    return p


def mobius_add(a: np.ndarray, b: np.ndarray, c: float) -> np.ndarray:
    c = check_curvature(c)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_space(a, b)
    ab = _dot(a, b)
    a2 = _dot(a, a)
    b2 = _dot(b, b)
    num = (1 + 2 * c * ab + c * b2) * a + (1 - c * a2) * b
    den = 1 + 2 * c * ab + c * c * a2 * b2
    return project(num / den, c)


def mobius_scalar_mul(r: float, p: np.ndarray, c: float) -> np.ndarray:
    c = check_curvature(c)
    p = np.asarray(p, dtype=np.float64)
    sc = math.sqrt(c)
    n = _norm(p)
    t = np.clip(sc * n, 0.0, ARTANH_CLAMP)
    safe = np.where(n > 0, n, 1.0)
    out = np.where(n > 0, np.tanh(r * np.arctanh(t)) / sc * p / safe, 0.0)
    return project(out, c)


def mobius_matvec(m: np.ndarray, p: np.ndarray, c: float) -> np.ndarray:
    """Möbius version of ``x -> x @ m``: exp0(log0(p) @ m)."""
    return exp_map_origin(log_map_origin(p, c) @ m, c)


def conformal_factor(v: np.ndarray, c: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return 2.0 / (1.0 - c * _dot(v, v))[..., 0]


def exp_map_origin(x: np.ndarray, c: float) -> np.ndarray:
    c = check_curvature(c)
    x = np.asarray(x, dtype=np.float64)
    t = math.sqrt(c) * _norm(x)
    ratio = np.where(t > 0, np.tanh(t) / np.where(t > 0, t, 1.0), 1.0)
    return project(ratio * x, c)


def log_map_origin(p: np.ndarray, c: float, return_saturation: bool = False):
    """Inverse of :func:`exp_map_origin`.

    With ``return_saturation`` a boolean mask marks rows whose radius hit the
    artanh clamp; those rows are no longer exact inverses.
    """
    c = check_curvature(c)
    p = np.asarray(p, dtype=np.float64)
    t = math.sqrt(c) * _norm(p)
    saturated = t >= ARTANH_CLAMP
    tc = np.minimum(t, ARTANH_CLAMP)
    ratio = np.where(t > 0, np.arctanh(tc) / np.where(t > 0, t, 1.0), 1.0)
    out = ratio * p
    if return_saturation:
        return out, saturated[..., 0]
    return out


def exp_map_at(v: np.ndarray, x: np.ndarray, c: float) -> np.ndarray:
    """Exponential map at base point ``v``; identical to the origin map when v = 0."""
    v = np.asarray(v, dtype=np.float64)
    lam = conformal_factor(v, c)[..., None]
    return mobius_add(v, exp_map_origin(lam * x / 2, c), c)


def log_map_at(v: np.ndarray, p: np.ndarray, c: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lam = conformal_factor(v, c)[..., None]
    return 2 / lam * log_map_origin(mobius_add(-v, p, c), c)


def parallel_transport_from_origin(v: np.ndarray, x: np.ndarray, c: float) -> np.ndarray:
    """Transport a tangent vector at 0 to base point ``v``.

    The gyration from the origin is the identity, so only the conformal
    rescaling lambda_0 / lambda_v remains.
    """
    v = np.asarray(v, dtype=np.float64)
    return (1.0 - c * _dot(v, v)) * np.asarray(x, dtype=np.float64)


def parallel_transport_to_origin(v: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.asarray(y, dtype=np.float64) / (1.0 - c * _dot(v, v))


def hyperbolic_distance(p1: np.ndarray, p2: np.ndarray, c: float) -> np.ndarray:
    c = check_curvature(c)
    sc = math.sqrt(c)
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    diff = mobius_add(-p1, p2, c)
    t = np.minimum(sc * _norm(diff)[..., 0], ARTANH_CLAMP)
    # identical points can leave a rounding residue in the Möbius difference
    return np.where(np.all(p1 == p2, axis=-1), 0.0, 2.0 / sc * np.arctanh(t))


@dataclass(frozen=True)
class MidpointTrial:
    x: np.ndarray
    y: np.ndarray
    alpha: float
    approx_midpoint: np.ndarray
    ideal_midpoint: np.ndarray
    error: float


def midpoint_experiment(arc_angle: float, alpha_grid) -> list[MidpointTrial]:
    """Midpoint error on a unit circle when the tangent line is tilted by alpha.

    ``x`` and ``y`` sit symmetrically about the top of the circle, ``arc_angle``
    apart. The ideal midpoint is where the perpendicular bisector of the chord
    meets the arc. For a tangent line tilted by ``alpha`` against the chord,
    both points are projected onto the line, their projected midpoint is taken
    and pushed back onto the arc along the line's normal. Because projection is
    affine, that normal passes through the chord midpoint. The error is the arc
    length between the result and the ideal midpoint.
    """
    if not 0.0 < arc_angle < math.pi:
        raise ValueError("arc_angle must lie in (0, pi); a zero angle gives a degenerate chord")
    half = arc_angle / 2
    x = np.array([-math.sin(half), math.cos(half)])
    y = np.array([math.sin(half), math.cos(half)])
    if np.allclose(x, y):
        raise ValueError("degenerate chord")
    ideal = np.array([0.0, 1.0])
    chord_mid = (x + y) / 2
    trials = []
    for alpha in alpha_grid:
        alpha = float(alpha)
        if abs(alpha) >= math.pi / 2:
            raise ValueError("tilt angle must satisfy |alpha| < pi/2")
        normal = np.array([-math.sin(alpha), math.cos(alpha)])
        b = float(chord_mid @ normal)
        k = float(chord_mid @ chord_mid) - 1.0
        t = -b + math.sqrt(b * b - k)
        approx = chord_mid + t * normal
        error = abs(math.atan2(approx[0] * ideal[1] - approx[1] * ideal[0], float(approx @ ideal)))
        trials.append(MidpointTrial(x, y, alpha, approx, ideal, error))
    return trials
