"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors are built eagerly: every primitive computes its value immediately and
records its parents plus a closure mapping the output gradient to parent
gradients. ``backward`` walks the recorded graph in reverse topological order.
``ComputeGraph`` wraps a Python function so the recorded nodes can be
inspected, re-run on new bindings, and differentiated by name.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

ARTANH_CLAMP = 1.0 - 1e-15
NORM_EPS = 1e-300


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class GraphStateError(TensorError):
    pass


_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_recorder: contextvars.ContextVar[list | None] = contextvars.ContextVar("recorder", default=None)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{label}, shape={self.shape})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a computed value as a graph node.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    """
    recorder = _recorder.get()
    if not np.all(np.isfinite(data)):
        where = f"node {len(recorder)} " if recorder is not None else ""
        raise NonFiniteError(f"{where}({op}) produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    if recorder is not None:
        out._parents = tuple(parents)
        recorder.append(out)
    return out


def _shape_error(op: str, *shapes) -> ShapeError:
    recorder = _recorder.get()
    where = f"node {len(recorder)} " if recorder is not None else ""
    return ShapeError(f"{where}({op}) incompatible shapes {', '.join(str(s) for s in shapes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, a, b, fwd):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None
    return a, b, fwd(a.data, b.data)


def add(a, b) -> Tensor:
    a, b, out = _binary("add", a, b, np.add)
    return make_op("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, out = _binary("sub", a, b, np.subtract)
    return make_op("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, out = _binary("mul", a, b, np.multiply)
    return make_op(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b, out = _binary("div", a, b, np.divide)
    return make_op(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, factor: float) -> Tensor:
    """Multiply by a non-trainable scalar constant."""
    a = as_tensor(a)
    factor = float(factor)
    return make_op("scale", a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bwd(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_op("matmul", out, (a, b), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def artanh(a) -> Tensor:
    a = as_tensor(a)
    x = np.clip(a.data, -ARTANH_CLAMP, ARTANH_CLAMP)
    inside = np.abs(a.data) < ARTANH_CLAMP
    return make_op("artanh", np.arctanh(x), (a,), lambda g: (g * inside / (1.0 - x * x),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise _nonfinite("log")
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def _nonfinite(op: str) -> NonFiniteError:
    recorder = _recorder.get()
    where = f"node {len(recorder)} " if recorder is not None else ""
    return NonFiniteError(f"{where}({op}) produced non-finite values")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return make_op("softplus", out, (a,), lambda g: (g * _sigmoid(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return make_op("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def norm(a, axis: int = -1, keepdims: bool = True, ord: int = 2) -> Tensor:
    """L2 (``ord=2``) or L1 (``ord=1``) norm along ``axis``; gradient is 0 at the zero vector."""
    a = as_tensor(a)
    if ord == 2:
        out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

        def bwd(g):
            g = g if keepdims else np.expand_dims(g, axis)
            safe = np.where(out > 0, out, 1.0)
            return (g * np.where(out > 0, a.data / safe, 0.0),)

        op = "l2norm"
    elif ord == 1:
        out = np.sum(np.abs(a.data), axis=axis, keepdims=True)

        def bwd(g):
            g = g if keepdims else np.expand_dims(g, axis)
            return (g * np.sign(a.data),)

        op = "l1norm"
    else:
        raise ValueError(f"unsupported norm order {ord}")
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return make_op(op, out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_op("softmax", out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return make_op("log_softmax", out, (a,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op("concat", out, tensors, bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx) -> Tensor:
    """Gather ``a[idx]`` (integer arrays, masks or slices); repeated indices accumulate."""
    a = as_tensor(a)
    if not isinstance(idx, (slice, tuple)):
        idx = np.asarray(idx)
    out = a.data[idx]

    def bwd(g):
        grad = np.zeros_like(a.data)
        if isinstance(idx, np.ndarray) and idx.dtype == bool:
            grad[idx] = g
        else:
            np.add.at(grad, idx, g)
        return (grad,)

    return make_op("take", out, (a,), bwd)


def dropout(a, keep: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout. Identity in eval mode or when ``keep == 1``."""
    a = as_tensor(a)
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep}")
    if not training or keep == 1.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded rng")
    mask = (rng.random(a.shape) < keep) / keep
    return make_op("dropout", a.data * mask, (a,), lambda g: (g * mask,))


def spmm(adj: sp.spmatrix, a) -> Tensor:
    """Sparse (constant) matrix times dense tensor."""
    a = as_tensor(a)
    if adj.shape[1] != a.shape[0]:
        raise _shape_error("spmm", adj.shape, a.shape)
    adj = adj.tocsr()
    out = np.asarray(adj @ a.data)
    return make_op("spmm", out, (a,), lambda g: (np.asarray(adj.T @ g),))


def _segment_matrix(segments: np.ndarray, n: int) -> sp.csr_matrix:
    e = len(segments)
    return sp.csr_matrix((np.ones(e), (segments, np.arange(e))), shape=(n, e))


def segment_sum(a, segments, n: int) -> Tensor:
    """Sum rows of ``a`` into ``n`` buckets given by ``segments``."""
    a = as_tensor(a)
    segments = np.asarray(segments)
    if len(segments) != a.shape[0]:
        raise _shape_error("segment_sum", a.shape, segments.shape)
    mat = _segment_matrix(segments, n)
    flat = a.data.reshape(a.shape[0], -1)
    out = np.asarray(mat @ flat).reshape((n,) + a.shape[1:])
    return make_op("segment_sum", out, (a,), lambda g: (g[segments],))


def segment_softmax(a, segments, n: int) -> Tensor:
    """Softmax over the rows sharing a segment id (per remaining column)."""
    a = as_tensor(a)
    segments = np.asarray(segments)
    if len(segments) != a.shape[0]:
        raise _shape_error("segment_softmax", a.shape, segments.shape)
    seg_max = np.full((n,) + a.shape[1:], -np.inf)
    np.maximum.at(seg_max, segments, a.data)
    e = np.exp(a.data - seg_max[segments])
    mat = _segment_matrix(segments, n)
    flat_shape = (a.shape[0], -1)
    denom = np.asarray(mat @ e.reshape(flat_shape)).reshape((n,) + a.shape[1:])
    out = e / denom[segments]

    def bwd(g):
        dot = np.asarray(mat @ (g * out).reshape(flat_shape)).reshape((n,) + a.shape[1:])
        return (out * (g - dot[segments]),)

    return make_op("segment_softmax", out, (a,), bwd)


def backward(seed: Tensor) -> None:
    """Accumulate d(seed)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if seed.data.size != 1:
        raise GraphStateError(f"backward seed must be scalar, got shape {seed.shape}")
    if not seed.requires_grad:
        return
    order = _topological(seed)
    grads: dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def _topological(seed: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(seed, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass
class Node:
    index: int
    op: str
    inputs: tuple[int, ...]
    output: Tensor


class ComputeGraph:
    """A function over named tensors whose primitive calls are recorded as nodes.

    ``fn`` receives keyword Tensors and returns a Tensor or a dict of Tensors.
    Nodes are stored in creation order, which is a valid topological order.
    """

    def __init__(self, fn: Callable[..., Tensor | dict[str, Tensor]]):
        self.fn = fn
        self.nodes: list[Node] = []
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] | None = None

    def forward(self, inputs: dict, trainable: Iterable[str] = ()) -> dict[str, np.ndarray]:
        trainable = set(trainable)
        missing = trainable - set(inputs)
        if missing:
            raise GraphStateError(f"unbound trainable inputs: {sorted(missing)}")
        self.inputs = {
            k: Tensor(np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64),
                      requires_grad=k in trainable, name=k)
            for k, v in inputs.items()
        }
        recorded: list[Tensor] = []
        token = _recorder.set(recorded)
        try:
            result = self.fn(**self.inputs)
        finally:
            _recorder.reset(token)
        self.outputs = result if isinstance(result, dict) else {"out": result}
        index = {id(t): i for i, t in enumerate(self.inputs.values())}
        offset = len(index)
        self.nodes = []
        for i, t in enumerate(recorded):
            index[id(t)] = offset + i
        for i, t in enumerate(recorded):
            ins = tuple(index[id(p)] for p in t._parents if id(p) in index)
            self.nodes.append(Node(offset + i, t.op, ins, t))
        return {k: v.data for k, v in self.outputs.items()}

    def backward(self, seed_output: str = "out") -> dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphStateError("backward called before forward")
        if seed_output not in self.outputs:
            raise GraphStateError(f"unknown output {seed_output!r}")
        for t in self.inputs.values():
            t.grad = None
        seed = self.outputs[seed_output]
        backward(seed)
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self.inputs.items() if t.requires_grad
        }


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    failed_index: tuple[int, ...] | None = None
    message: str = ""
    details: dict = field(default_factory=dict)


def finite_diff_check(
    fn: Callable[..., Tensor] | ComputeGraph,
    inputs: dict,
    wrt: str,
    epsilon: float = 1e-6,
    tolerance: float = 1e-5,
    floor: float = 1e-3,
    seed_output: str = "out",
) -> GradCheckReport:
    """Compare autodiff gradients of a scalar output against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is ~0 from dividing round-off
    by zero.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    graph = fn if isinstance(fn, ComputeGraph) else ComputeGraph(fn)
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    graph.forward(base, trainable=[wrt])
    analytic = graph.backward(seed_output)[wrt]

    x = base[wrt]
    numeric = np.zeros_like(x)
    with no_grad():
        for i in np.ndindex(x.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = dict(base)
                xp = x.copy()
                xp[i] += sign * epsilon
                pert[wrt] = xp
                try:
                    out = graph.forward(pert)[seed_output]
                except NonFiniteError:
                    out = np.nan
                vals.append(float(out))
            if not np.all(np.isfinite(vals)):
                return GradCheckReport(False, np.inf, np.full(x.shape, np.inf), analytic, numeric,
                                       failed_index=i, message=f"non-finite evaluation at coordinate {i}")
            numeric[i] = (vals[0] - vals[1]) / (2 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = tuple(int(j) for j in np.unravel_index(np.argmax(rel), rel.shape)) if rel.size else None
    max_rel = float(rel.max()) if rel.size else 0.0
    passed = max_rel <= tolerance
    return GradCheckReport(passed, max_rel, rel, analytic, numeric,
                           failed_index=None if passed else worst)
