"""Hyperbolic normalization: omega(x) = tanh(sqrt(c)|x|) / (sqrt(c)|x|).

Scaling a Euclidean vector by omega is the same as exp-mapping it onto the
ball from the origin, so a stack of Euclidean layers followed by this
normalization behaves as a hyperbolic network whose parameters stay Euclidean.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .tensor import ARTANH_CLAMP, Tensor, make_op, mul, scale

# below this radius the closed-form derivative loses digits to cancellation
_SERIES_T = 1e-3


class Placement(str, enum.Enum):
    PER_LAYER = "per_layer"
    FINAL = "final"
    MIDDLE = "middle"


def default_scale(c: float) -> float:
    """Output scale used for a curvature when none is given (5 up to c=1, 3 above)."""
    return 5.0 if c <= 1.0 else 3.0


@dataclass(frozen=True)
class NormConfig:
    c: float = 1.0
    scale: float | None = None
    placement: Placement = Placement.PER_LAYER

    def __post_init__(self):
        geometry.check_curvature(self.c)
        if self.scale is None:
            object.__setattr__(self, "scale", default_scale(self.c))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "placement", Placement(self.placement))

    @property
    def bound(self) -> float:
        """Upper bound (exclusive) on the norm of a normalized vector."""
        return self.scale / math.sqrt(self.c)


def _omega_terms(n: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    """omega(n) and omega'(n)/n for row norms ``n``."""
    a = math.sqrt(c)
    t = a * n
    small = t < _SERIES_T
    ts = np.where(small, 1.0, t)
    th = np.tanh(ts)
    # the series keeps omega monotone where tanh(t)/t would wobble by an ulp
    w = np.where(small, 1.0 - t * t * (1.0 / 3.0 - 2.0 * t * t / 15.0), th / ts)
    exact = a * a * (ts * (1.0 - th * th) - th) / ts**3
    series = a * a * (-2.0 / 3.0 + 8.0 * t * t / 15.0)
    return w, np.where(small, series, exact)


def _omega_inv_terms(n: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    """artanh(sqrt(c) n)/(sqrt(c) n) and its derivative over n."""
    a = math.sqrt(c)
    t = np.minimum(a * n, ARTANH_CLAMP)
    small = t < _SERIES_T
    ts = np.where(small, 0.5, t)
    at = np.arctanh(ts)
    tpos = np.where(t > 0, t, 0.5)
    w = np.where(t > 0, np.arctanh(tpos) / tpos, 1.0)
    exact = a * a * (ts / (1.0 - ts * ts) - at) / ts**3
    series = a * a * (2.0 / 3.0 + 4.0 * t * t / 5.0)
    return w, np.where(small, series, exact)


def _rowwise_scalar(op: str, x: Tensor, c: float, terms) -> Tensor:
    n = np.linalg.norm(x.data, axis=-1, keepdims=True)
    w, dw_over_n = terms(n, c)
    return make_op(op, w, (x,), lambda g: (g * dw_over_n * x.data,))


def omega_t(x: Tensor, c: float) -> Tensor:
    """Row-wise omega as a differentiable (..., 1) tensor."""
    return _rowwise_scalar("omega", x, c, _omega_terms)


def omega_inv_t(p: Tensor, c: float) -> Tensor:
    """Row-wise log-map ratio artanh(sqrt(c)|p|)/(sqrt(c)|p|)."""
    return _rowwise_scalar("omega_inv", p, c, _omega_inv_terms)


def omega(x, c: float):
    """omega of a vector (float) or of each row of a matrix (array)."""
    geometry.check_curvature(c)
    x = np.asarray(x, dtype=np.float64)
    w, _ = _omega_terms(np.linalg.norm(x, axis=-1, keepdims=True), c)
    w = w[..., 0]
    return float(w) if w.ndim == 0 else w


def apply_norm(x, cfg: NormConfig):
    """scale * omega(x) * x, row-wise. Accepts Tensors (differentiable) or arrays."""
    if isinstance(x, Tensor):
        return scale(mul(omega_t(x, cfg.c), x), cfg.scale)
    x = np.asarray(x, dtype=np.float64)
    w, _ = _omega_terms(np.linalg.norm(x, axis=-1, keepdims=True), cfg.c)
    return cfg.scale * (w * x)


def omega_cascade(layer_outputs: Sequence, c: float) -> float:
    """Product of per-layer omega factors."""
    if len(layer_outputs) == 0:
        raise ValueError("omega_cascade needs at least one layer output")
    return float(np.prod([omega(np.asarray(o), c) for o in layer_outputs]))


Layer = Callable[[np.ndarray], np.ndarray]


def _as_callable(layer) -> Layer:
    if callable(layer):
        return layer
    m = np.asarray(layer, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"layer matrix must be 2-D, got shape {m.shape}")
    return lambda v: v @ m


@dataclass
class CascadeReport:
    max_deviation: float
    deviations: np.ndarray
    passed: bool
    tolerance: float


def verify_cascade_collapse(layers: Sequence, points, c: float, tolerance: float = 1e-9) -> CascadeReport:
    """Chained exp0 . f_i . log0 versus a single exp0 . F_n . log0.

    ``points`` are ball points (one per row); matrices in ``layers`` act as
    ``v @ M``, callables are applied as given.
    """
    fs = [_as_callable(l) for l in layers]
    _check_composable(layers)
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    chained = p
    for f in fs:
        chained = geometry.exp_map_origin(f(geometry.log_map_origin(chained, c)), c)
    x = geometry.log_map_origin(p, c)
    for f in fs:
        x = f(x)
    collapsed = geometry.exp_map_origin(x, c)
    dev = np.max(np.abs(chained - collapsed), axis=-1)
    worst = float(dev.max()) if dev.size else 0.0
    return CascadeReport(worst, dev, worst <= tolerance, tolerance)


def _check_composable(layers: Sequence) -> None:
    dims = [np.asarray(l).shape for l in layers if not callable(l)]
    for (_, out_dim), (in_dim, _) in zip(dims, dims[1:]):
        if out_dim != in_dim:
            raise ValueError(f"incompatible layer shapes: output {out_dim} feeds input {in_dim}")


def _is_linear(f: Layer, dim: int, rng: np.random.Generator) -> bool:
    u, v = rng.standard_normal(dim), rng.standard_normal(dim)
    a, b = 1.7, -0.6
    lhs = f(a * u + b * v)
    rhs = a * f(u) + b * f(v)
    return bool(np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12))


@dataclass
class OmegaProductReport:
    algorithm_output: np.ndarray
    cascade_output: np.ndarray
    exact_output: np.ndarray
    cascade_omega: np.ndarray
    max_gap: float
    max_gap_vs_exact: float
    details: dict = field(default_factory=dict)


def verify_omega_product(layers: Sequence, x, c: float) -> OmegaProductReport:
    """Compare three readings of a normalized cascade of linear layers.

    * ``algorithm_output``: each layer's output rescaled by its own omega and
      fed straight into the next layer (no intermediate log map).
    * ``cascade_output``: Omega * F_n(x) with Omega the product of omega over
      the Euclidean partial cascades F_1(x), ..., F_n(x).
    * ``exact_output``: exp0(F_n(x)), the stacked hyperbolic layers.

    Only the n=1 case is an identity; the gaps are reported, not asserted.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rng = np.random.default_rng(0)
    fs = []
    for layer in layers:
        if callable(layer):
            if not _is_linear(layer, x.shape[-1] if not fs else _out_dim(fs, x), rng):
                raise ValueError("verify_omega_product requires linear layers (f(a x) = a f(x))")
        fs.append(_as_callable(layer))
    _check_composable(layers)

    algo = x
    for f in fs:
        h = f(algo)
        algo = omega(h, c)[..., None] * h

    partials = []
    h = x
    for f in fs:
        h = f(h)
        partials.append(h)
    big_omega = np.prod([omega(p, c) for p in partials], axis=0)
    cascade = big_omega[..., None] * partials[-1]
    exact = geometry.exp_map_origin(partials[-1], c)
    return OmegaProductReport(
        algorithm_output=algo,
        cascade_output=cascade,
        exact_output=exact,
        cascade_omega=big_omega,
        max_gap=float(np.max(np.abs(algo - cascade))),
        max_gap_vs_exact=float(np.max(np.abs(algo - exact))),
    )


def _out_dim(fs: list[Layer], x: np.ndarray) -> int:
    h = x[:1]
    for f in fs:
        h = f(h)
    return h.shape[-1]
