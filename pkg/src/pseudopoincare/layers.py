"""Graph layers: Euclidean GCN/GAT, their normalized variants, and a tangent-space
hyperbolic convolution baseline."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import ball
from . import tensor as T
from .hypnorm import NormConfig, apply_norm
from .optim import EUCLIDEAN, Manifold
from .tensor import Tensor


class Activation(str, enum.Enum):
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    NONE = "none"


def activate(x: Tensor, act: Activation | str, slope: float = 0.2) -> Tensor:
    act = Activation(act)
    if act is Activation.RELU:
        return T.relu(x)
    if act is Activation.LEAKY_RELU:
        return T.leaky_relu(x, slope)
    return x


class Module:
    """Minimal parameter container: named Tensors plus a manifold tag each."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._tags: dict[str, Manifold] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray, manifold: Manifold = EUCLIDEAN) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._tags[name] = manifold
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def manifold_tags(self, prefix: str = "") -> dict[str, Manifold]:
        out = {prefix + k: v for k, v in self._tags.items()}
        for cname, child in self._children.items():
            out.update(child.manifold_tags(f"{prefix}{cname}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)}")
        for k, t in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class NormalizedAdjacency:
    """D^-1/2 (A + I) D^-1/2 as a row-sorted coordinate list."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    n: int

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=(self.n, self.n))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _symmetrize(edges, n: int) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ValueError(f"edge endpoint out of range [0, {n})")
    e = e[e[:, 0] != e[:, 1]]
    both = np.concatenate([e, e[:, ::-1]])
    return np.unique(both, axis=0) if both.size else both.reshape(0, 2)


def normalize_adjacency(edges, n: int) -> NormalizedAdjacency:
    directed = _symmetrize(edges, n)
    loops = np.stack([np.arange(n), np.arange(n)], axis=1)
    allpairs = np.concatenate([directed, loops])
    order = np.lexsort((allpairs[:, 1], allpairs[:, 0]))
    allpairs = allpairs[order]
    deg = np.bincount(allpairs[:, 0], minlength=n).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[allpairs[:, 0]] * deg[allpairs[:, 1]])
    return NormalizedAdjacency(allpairs[:, 0], allpairs[:, 1], vals, n)


class GraphContext:
    """Per-graph structures shared by all layers: Â and the message edge list.

    Messages flow src -> dst; the list holds both directions of every edge plus
    one self-loop per node, sorted by destination.
    """

    def __init__(self, edges, n: int):
        self.n = n
        self.adj = normalize_adjacency(edges, n)
        self.adj_matrix = self.adj.matrix
        self.dst = self.adj.rows
        self.src = self.adj.cols


class GCNLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 activation="relu", keep: float = 1.0, bias: bool = True):
        super().__init__()
        if not 0.0 < keep <= 1.0:
            raise ValueError("keep probability must be in (0, 1]")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = Activation(activation)
        self.keep = keep
        self.weight = self.add_param("weight", glorot(rng, in_dim, out_dim))
        self.bias = self.add_param("bias", np.zeros(out_dim)) if bias else None

    def forward(self, ctx: GraphContext, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return gcn_layer(ctx, x, self, training, rng)


def gcn_layer(ctx: GraphContext, x, params: GCNLayer, training: bool = False, rng=None) -> Tensor:
    """act(Â X W + b)."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.in_dim or x.shape[0] != ctx.n:
        raise T.ShapeError(f"gcn_layer expects ({ctx.n}, {params.in_dim}) features, got {x.shape}")
    h = T.dropout(x, params.keep, rng, training)
    out = T.spmm(ctx.adj_matrix, h @ params.weight)
    if params.bias is not None:
        out = out + params.bias
    return activate(out, params.activation)


def ngcn_layer(ctx: GraphContext, x, params: GCNLayer, cfg: NormConfig, training=False, rng=None) -> Tensor:
    return apply_norm(gcn_layer(ctx, x, params, training, rng), cfg)


class GATLayer(Module):
    """Multi-head graph attention. With ``concat`` the heads split ``out_dim``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, heads: int = 4,
                 concat: bool = True, activation="relu", keep: float = 1.0, slope: float = 0.2,
                 bias: bool = True):
        super().__init__()
        if heads < 1:
            raise ValueError("need at least one attention head")
        if concat and out_dim % heads:
            raise ValueError(f"out_dim {out_dim} not divisible by {heads} heads")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.heads, self.concat, self.slope, self.keep = heads, concat, slope, keep
        self.activation = Activation(activation)
        self.head_dim = out_dim // heads if concat else out_dim
        self.weight = self.add_param("weight", glorot(rng, in_dim, heads * self.head_dim))
        self.att_src = self.add_param("att_src", glorot(rng, self.head_dim, 1, (heads, self.head_dim)))
        self.att_dst = self.add_param("att_dst", glorot(rng, self.head_dim, 1, (heads, self.head_dim)))
        self.bias = self.add_param("bias", np.zeros(out_dim)) if bias else None
        self.last_attention: np.ndarray | None = None

    def forward(self, ctx: GraphContext, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return gat_layer(ctx, x, self, training, rng)


def gat_layer(ctx: GraphContext, x, params: GATLayer, training: bool = False, rng=None) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.in_dim or x.shape[0] != ctx.n:
        raise T.ShapeError(f"gat_layer expects ({ctx.n}, {params.in_dim}) features, got {x.shape}")
    n, heads, hd = ctx.n, params.heads, params.head_dim
    h = T.dropout(x, params.keep, rng, training) @ params.weight
    h3 = T.reshape(h, (n, heads, hd))
    s_src = T.sum(h3 * params.att_src, axis=-1)
    s_dst = T.sum(h3 * params.att_dst, axis=-1)
    logits = T.leaky_relu(T.take(s_dst, ctx.dst) + T.take(s_src, ctx.src), params.slope)
    alpha = T.segment_softmax(logits, ctx.dst, n)
    params.last_attention = alpha.data
    alpha = T.dropout(alpha, params.keep, rng, training)
    msg = T.take(h3, ctx.src) * T.reshape(alpha, (len(ctx.src), heads, 1))
    agg = T.segment_sum(msg, ctx.dst, n)
    out = T.reshape(agg, (n, heads * hd)) if params.concat else T.mean(agg, axis=1)
    if params.bias is not None:
        out = out + params.bias
    return activate(out, params.activation)


def ngat_layer(ctx: GraphContext, x, params: GATLayer, cfg: NormConfig, training=False, rng=None) -> Tensor:
    return apply_norm(gat_layer(ctx, x, params, training, rng), cfg)


class HGCNLayer(Module):
    """Hyperbolic convolution: Möbius linear map, attention-weighted aggregation in
    the tangent space at each receiving node, activation through the origin."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, c: float,
                 activation="relu", keep: float = 1.0, agg_at_origin: bool = False):
        super().__init__()
        self.in_dim, self.out_dim, self.c, self.keep = in_dim, out_dim, c, keep
        self.activation = Activation(activation)
        self.agg_at_origin = agg_at_origin
        self.weight = self.add_param("weight", glorot(rng, in_dim, out_dim))
        self.bias = self.add_param("bias", np.zeros(out_dim))
        self.att_weight = self.add_param("att_weight", glorot(rng, 2 * out_dim, 1))
        self.att_bias = self.add_param("att_bias", np.zeros(1))
        self.counter = ball.ProjectionCounter(ball.LAYER_MARGIN)
        self.last_attention: np.ndarray | None = None

    def forward(self, ctx: GraphContext, p: Tensor, training: bool = False, rng=None) -> Tensor:
        return hgcn_layer(ctx, p, self, training, rng)


def hgcn_layer(ctx: GraphContext, p, params: HGCNLayer, training: bool = False, rng=None) -> Tensor:
    c, cnt = params.c, params.counter
    p = T.as_tensor(p)
    w = T.dropout(params.weight, params.keep, rng, training)
    h = ball.mobius_add(ball.mobius_matvec(p, w, c, cnt), ball.expmap0(params.bias, c, cnt), c, cnt)

    tangent0 = ball.logmap0(h, c)
    pair = T.concat([T.take(tangent0, ctx.dst), T.take(tangent0, ctx.src)], axis=-1)
    scores = pair @ params.att_weight + params.att_bias
    alpha = T.segment_softmax(scores, ctx.dst, ctx.n)
    params.last_attention = alpha.data[:, 0]

    if params.agg_at_origin:
        agg = T.segment_sum(T.take(tangent0, ctx.src) * alpha, ctx.dst, ctx.n)
        out = ball.expmap0(agg, c, cnt)
    else:
        base = T.take(h, ctx.dst)
        local = ball.logmap(base, T.take(h, ctx.src), c, cnt)
        agg = T.segment_sum(local * alpha, ctx.dst, ctx.n)
        out = ball.expmap(h, agg, c, cnt)
    return ball.expmap0(activate(ball.logmap0(out, c), params.activation), c, cnt)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param("weight", glorot(rng, in_dim, out_dim))
        self.bias = self.add_param("bias", np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.as_tensor(x) @ self.weight
        return out + self.bias if self.bias is not None else out
