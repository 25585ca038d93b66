"""SGD, Adam and Riemannian Adam over named parameters.

The step functions work on plain ``dict[str, np.ndarray]`` so they can be
checked by hand; the optimizer classes drive them from autodiff tensors.
Riemannian Adam treats Euclidean-tagged parameters with exactly the Adam code
path and handles ``PoincareBall``-tagged ones (each row a ball point) by
rescaling the gradient with the inverse metric and retracting with the
exponential map. Moments of ball parameters are kept in ambient coordinates
without parallel transport.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import geometry
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class Euclidean:
    pass


@dataclass(frozen=True)
class PoincareBall:
    c: float

    def __post_init__(self):
        geometry.check_curvature(self.c)


Manifold = Union[Euclidean, PoincareBall]
EUCLIDEAN = Euclidean()


@dataclass
class OptimState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def _checked_grad(name: str, param: np.ndarray, grad: np.ndarray, weight_decay: float) -> np.ndarray:
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {name} {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    return grad + weight_decay * param if weight_decay else grad


def _adam_direction(name: str, grad: np.ndarray, state: OptimState) -> np.ndarray:
    m = state.m.get(name)
    v = state.v.get(name)
    if m is None:
        m = np.zeros_like(grad)
        v = np.zeros_like(grad)
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    state.m[name], state.v[name] = m, v
    m_hat = m / (1 - state.beta1**state.t)
    v_hat = v / (1 - state.beta2**state.t)
    return m_hat / (np.sqrt(v_hat) + state.eps)


def _adam_update(name: str, param: np.ndarray, grad: np.ndarray, state: OptimState) -> np.ndarray:
    grad = _checked_grad(name, param, grad, state.weight_decay)
    return param - state.lr * _adam_direction(name, grad, state)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> dict[str, np.ndarray]:
    state.t += 1
    return {k: _adam_update(k, p, grads[k], state) for k, p in params.items()}


def riemannian_grad_scale(p: np.ndarray, c: float) -> np.ndarray:
    """Inverse-metric factor (1 - c|p|^2)^2 / 4 per row, shape (..., 1)."""
    p2 = np.sum(p * p, axis=-1, keepdims=True)
    return (1.0 - c * p2) ** 2 / 4.0


def _ball_update(name: str, param: np.ndarray, grad: np.ndarray, state: OptimState, c: float) -> np.ndarray:
    grad = _checked_grad(name, param, grad, state.weight_decay)
    rgrad = grad * riemannian_grad_scale(param, c)
    direction = _adam_direction(name, rgrad, state)
    return geometry.exp_map_at(param, -state.lr * direction, c)


def riemannian_adam_step(params, grads, state: OptimState, tags: dict[str, Manifold]) -> dict[str, np.ndarray]:
    missing = set(params) - set(tags)
    if missing:
        raise KeyError(f"no manifold tag for parameters {sorted(missing)}")
    state.t += 1
    out = {}
    for k, p in params.items():
        tag = tags[k]
        if isinstance(tag, PoincareBall):
            out[k] = _ball_update(k, p, grads[k], state, tag.c)
        else:
            out[k] = _adam_update(k, p, grads[k], state)
    return out


def sgd_step(params, grads, state: OptimState) -> dict[str, np.ndarray]:
    state.t += 1
    return {k: p - state.lr * _checked_grad(k, p, grads[k], state.weight_decay) for k, p in params.items()}


class Optimizer:
    """Base driver: collects ``.grad`` from tensors and writes updated values back."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, tags: dict[str, Manifold] | None = None,
                 clip_norm: float | None = None):
        self.params = dict(params)
        self.tags = {k: EUCLIDEAN for k in self.params} | dict(tags or {})
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _grads(self) -> dict[str, np.ndarray]:
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        if self.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        return grads

    def _apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def step(self) -> None:
        values = {k: t.data for k, t in self.params.items()}
        new = self._apply(values, self._grads())
        for k, t in self.params.items():
            t.data = new[k]


class SGD(Optimizer):
    def _apply(self, params, grads):
        return sgd_step(params, grads, self.state)


class Adam(Optimizer):
    def _apply(self, params, grads):
        return adam_step(params, grads, self.state)


class RiemannianAdam(Optimizer):
    def _apply(self, params, grads):
        return riemannian_adam_step(params, grads, self.state, self.tags)


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "radam": RiemannianAdam}


def make_optimizer(name: str, params: dict[str, Tensor], tags=None, **kwargs) -> Optimizer:
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    return cls(params, tags=tags, **kwargs)
