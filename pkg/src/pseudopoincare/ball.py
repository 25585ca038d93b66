"""Differentiable Poincaré-ball operations on autodiff tensors.

These mirror :mod:`pseudopoincare.geometry` (which works on plain arrays) and
are used by the hyperbolic baseline layer and the MuRP scorer.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .geometry import BALL_EPS
from .hypnorm import omega_inv_t, omega_t
from .tensor import Tensor


LAYER_MARGIN = 1e-5


class ProjectionCounter:
    """Counts rows pulled back into the ball.

    ``margin`` sets how far inside the boundary rows are kept; learned layers
    use a wider margin than the geometry kernels so that Möbius denominators
    stay well away from zero.
    """

    def __init__(self, margin: float = BALL_EPS):
        self.count = 0
        self.margin = margin

    def reset(self):
        self.count = 0


def project(p: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    sc = math.sqrt(c)
    eps = counter.margin if counter is not None else BALL_EPS
    n = np.linalg.norm(p.data, axis=-1, keepdims=True)
    over = sc * n >= 1.0 - eps
    if not np.any(over):
        return p
    if counter is not None:
        counter.count += int(np.count_nonzero(over))
    target = (1.0 - 2 * eps) / sc
    safe = np.where(over, n, 1.0)
    factor = np.where(over, target / safe, 1.0)
    out = p.data * factor
    unit = p.data / safe

    def bwd(g):
        # clipped rows: d(target * x/|x|) = target/|x| (I - u u^T)
        radial = np.sum(g * unit, axis=-1, keepdims=True)
        clipped = factor * (g - radial * unit)
        return (np.where(over, clipped, g),)

    return T.make_op("project", out, (p,), bwd)


def sqnorm(x: Tensor) -> Tensor:
    return T.sum(x * x, axis=-1, keepdims=True)


def conformal_factor(v: Tensor, c: float) -> Tensor:
    return 2.0 / (1.0 - T.scale(sqnorm(v), c))


def expmap0(x: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    return project(omega_t(x, c) * x, c, counter)


def logmap0(p: Tensor, c: float) -> Tensor:
    return omega_inv_t(p, c) * p


def mobius_add(a: Tensor, b: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    ab = T.sum(a * b, axis=-1, keepdims=True)
    a2 = sqnorm(a)
    b2 = sqnorm(b)
    num = (1.0 + T.scale(ab, 2 * c) + T.scale(b2, c)) * a + (1.0 - T.scale(a2, c)) * b
    den = 1.0 + T.scale(ab, 2 * c) + T.scale(a2 * b2, c * c)
    return project(num / den, c, counter)


def mobius_matvec(x: Tensor, w: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    """exp0(log0(x) @ w) for row points ``x``."""
    return expmap0(logmap0(x, c) @ w, c, counter)


def mobius_diag(x: Tensor, diag: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    """Möbius version of elementwise scaling by a diagonal matrix."""
    return expmap0(logmap0(x, c) * diag, c, counter)


def expmap(v: Tensor, x: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    lam = conformal_factor(v, c)
    return mobius_add(v, expmap0(T.scale(lam * x, 0.5), c, counter), c, counter)


def logmap(v: Tensor, p: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    lam = conformal_factor(v, c)
    return (2.0 / lam) * logmap0(mobius_add(-v, p, c, counter), c)


def distance(p1: Tensor, p2: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    """Geodesic distance per row, shape (..., 1)."""
    sc = math.sqrt(c)
    diff = mobius_add(-p1, p2, c, counter)
    return T.scale(T.artanh(T.scale(T.norm(diff), sc)), 2.0 / sc)


def sqdistance(p1: Tensor, p2: Tensor, c: float, counter: ProjectionCounter | None = None) -> Tensor:
    """Squared geodesic distance as 4 |log0(-p1 (+) p2)|^2, smooth where p1 == p2."""
    diff = mobius_add(-p1, p2, c, counter)
    half = logmap0(diff, c)
    return T.scale(sqnorm(half), 4.0)
