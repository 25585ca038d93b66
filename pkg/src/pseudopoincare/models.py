"""Model assembly: stacked graph layers, normalization placement, task heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ball
from . import tensor as T
from .hypnorm import NormConfig, Placement, apply_norm
from .layers import GATLayer, GCNLayer, GraphContext, HGCNLayer, Linear, Module
from .tensor import Tensor

GRAPH_MODELS = ("gcn", "gat", "hgcn", "ngcn", "ngat")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # gcn | gat | hgcn
    in_dim: int
    out_dim: int
    activation: str = "relu"
    keep: float = 1.0
    heads: int = 4


def norm_positions(num_layers: int, placement: Placement | str) -> set[int]:
    """Indices of layers followed by a normalization. Middle with one layer means final."""
    placement = Placement(placement)
    if num_layers < 1:
        raise ValueError("model needs at least one layer")
    if placement is Placement.PER_LAYER:
        return set(range(num_layers))
    if placement is Placement.MIDDLE and num_layers > 1:
        return {math.ceil(num_layers / 2) - 1}
    return {num_layers - 1}


class Model(Module):
    """A stack of graph layers; ``cfg`` inserts hyperbolic normalizations.

    ``hyperbolic`` models (hgcn layers) take Euclidean features, map them onto
    the ball once and return ball points.
    """

    def __init__(self, layers: list[Module], cfg: NormConfig | None = None, c: float | None = None):
        super().__init__()
        self.layers = layers
        for i, layer in enumerate(layers):
            self.add_child(f"layer{i}", layer)
        self.cfg = cfg
        self.hyperbolic = any(isinstance(l, HGCNLayer) for l in layers)
        self.c = c
        self.norm_after = norm_positions(len(layers), cfg.placement) if cfg is not None else set()

    def forward(self, ctx: GraphContext, x, training: bool = False, rng=None) -> Tensor:
        h = T.as_tensor(x)
        if self.hyperbolic:
            h = ball.expmap0(h, self.c, getattr(self.layers[0], "counter", None))
        for i, layer in enumerate(self.layers):
            h = layer.forward(ctx, h, training, rng)
            if i in self.norm_after:
                h = apply_norm(h, self.cfg)
        return h

    __call__ = forward


def build_model(specs: list[LayerSpec], cfg: NormConfig | None, rng: np.random.Generator,
                c: float = 1.0) -> Model:
    layers: list[Module] = []
    for prev, spec in zip([None] + specs[:-1], specs):
        if prev is not None and prev.out_dim != spec.in_dim:
            raise ValueError(f"layer shapes do not chain: {prev.out_dim} -> {spec.in_dim}")
        if spec.kind == "gcn":
            layers.append(GCNLayer(spec.in_dim, spec.out_dim, rng, spec.activation, spec.keep))
        elif spec.kind == "gat":
            layers.append(GATLayer(spec.in_dim, spec.out_dim, rng, spec.heads, True,
                                   spec.activation, spec.keep))
        elif spec.kind == "hgcn":
            layers.append(HGCNLayer(spec.in_dim, spec.out_dim, rng, c, spec.activation, spec.keep))
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return Model(layers, cfg, c)


def encoder_specs(model: str, in_dim: int, hidden: int = 64, num_layers: int = 2,
                  keep: float = 0.4, heads: int = 4, activation: str = "relu") -> list[LayerSpec]:
    kind = {"gcn": "gcn", "ngcn": "gcn", "gat": "gat", "ngat": "gat", "hgcn": "hgcn"}[model]
    dims = [in_dim] + [hidden] * num_layers
    return [LayerSpec(kind, a, b, activation, keep, heads) for a, b in zip(dims, dims[1:])]


class NodeClassifier(Module):
    """Encoder followed by a linear map to class logits."""

    def __init__(self, encoder: Model, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.encoder = self.add_child("encoder", encoder)
        out_dim = encoder.layers[-1].out_dim
        self.decoder = self.add_child("decoder", Linear(out_dim, num_classes, rng))

    def embed(self, ctx, x, training=False, rng=None) -> Tensor:
        return self.encoder.forward(ctx, x, training, rng)

    def forward(self, ctx, x, training=False, rng=None) -> Tensor:
        z = self.embed(ctx, x, training, rng)
        if self.encoder.hyperbolic:
            z = ball.logmap0(z, self.encoder.c)
        return self.decoder.forward(z)


class FermiDirac(Module):
    """prob(i, j) = 1 / (exp((d^2 - r) / t) + 1) with learnable r and t."""

    def __init__(self, r: float = 2.0, t: float = 1.0):
        super().__init__()
        self.r = self.add_param("r", np.array([r]))
        self.t = self.add_param("t", np.array([t]))

    def logits(self, sqdist: Tensor) -> Tensor:
        return (self.r - sqdist) / self.t


class LinkPredictor(Module):
    def __init__(self, encoder: Model):
        super().__init__()
        self.encoder = self.add_child("encoder", encoder)
        self.decoder = self.add_child("decoder", FermiDirac())

    def embed(self, ctx, x, training=False, rng=None) -> Tensor:
        return self.encoder.forward(ctx, x, training, rng)

    def pair_logits(self, z: Tensor, pairs: np.ndarray) -> Tensor:
        a, b = T.take(z, pairs[:, 0]), T.take(z, pairs[:, 1])
        if self.encoder.hyperbolic:
            sq = ball.sqdistance(a, b, self.encoder.c)
        else:
            diff = a - b
            sq = T.sum(diff * diff, axis=-1, keepdims=True)
        return T.reshape(self.decoder.logits(sq), (len(pairs),))


def cross_entropy(logits: Tensor, labels: np.ndarray, idx: np.ndarray) -> Tensor:
    picked = T.log_softmax(T.take(logits, idx))
    onehot = np.zeros(picked.shape)
    onehot[np.arange(len(idx)), labels[idx]] = 1.0
    return T.scale(T.sum(picked * onehot), -1.0 / len(idx))


def binary_cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of -log sigmoid(l) for positives and -log sigmoid(-l) for negatives."""
    sign = np.where(np.asarray(targets) > 0, -1.0, 1.0)
    return T.mean(T.softplus(logits * sign))
