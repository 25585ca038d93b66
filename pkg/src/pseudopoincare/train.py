"""Run configuration, dataset resolution and the three training loops.

Each loop yields one record per epoch ``{"epoch", "loss", "val_metric"}`` to a
callback and returns a result dict with the test metric of the best-validation
parameters. Wall-clock epoch times (forward, backward and update only) are
kept apart from the records so that metric streams stay byte-identical across
runs with equal seeds.
"""
from __future__ import annotations

import fnmatch
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import multirel as MR
from .hypnorm import NormConfig, Placement
from .layers import GraphContext, Module
from .metrics import accuracy, roc_auc
from .models import (GRAPH_MODELS, LinkPredictor, NodeClassifier, binary_cross_entropy_logits, build_model,
                     cross_entropy, encoder_specs)
from .optim import OPTIMIZERS, PoincareBall, make_optimizer
from .tensor import NonFiniteError, no_grad

TASKS = ("node_class", "link_pred", "kg")


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite loss; the last good checkpoint is left in place."""


@dataclass
class RunConfig:
    task: str = "node_class"
    model: str = "ngcn"
    dataset: str = "karate"
    output: str | None = None
    curvature: float = 1.0
    scale: float | None = None
    placement: str = "per_layer"
    optimizer: str = "radam"
    lr: float | None = None
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    epochs: int = 200
    seed: int = 0
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.6
    heads: int = 4
    dim: int = 40
    negatives: int = MR.DEFAULT_NEGATIVES
    batch_size: int = MR.DEFAULT_BATCH
    kg_mode: str = "embed_norm"
    distance: str = "l1"
    biases: bool = True
    ball_params: str = ""
    split_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.task == "kg" and self.model not in MR.KG_MODELS:
            raise ConfigError(f"task kg needs one of {MR.KG_MODELS}, got {self.model!r}")
        if self.task != "kg" and self.model not in GRAPH_MODELS:
            raise ConfigError(f"task {self.task} needs one of {GRAPH_MODELS}, got {self.model!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.curvature > 0:
            raise ConfigError("curvature must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        try:
            Placement(self.placement)
            MR.NormMode(self.kg_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.001 if self.task == "kg" else 0.01

    @property
    def norm_config(self) -> NormConfig:
        return NormConfig(c=self.curvature, scale=self.scale, placement=Placement(self.placement))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def resolve_node_graph(spec: str, seed: int = 0) -> D.Graph:
    """``karate``, ``tree:B:D``, ``cora-like`` or a node-graph directory."""
    if spec == "karate":
        return D.load_karate()
    if spec.startswith("tree"):
        parts = spec.split(":")
        b, d = (int(parts[1]), int(parts[2])) if len(parts) == 3 else (3, 6)
        g = D.gen_balanced_tree(b, d, feature_dim=16, seed=seed)
        return D.make_splits(g, (0.6, 0.2, 0.2), seed=seed, strict=False)
    if spec == "cora-like":
        return D.make_splits(D.gen_cora_like(seed=seed), (0.6, 0.2, 0.2), seed=seed)
    path = Path(spec)
    if not path.is_dir():
        raise ConfigError(f"dataset {spec!r} is neither a builtin name nor a directory")
    return D.load_node_graph(path)


def resolve_kg(spec: str, seed: int = 0) -> D.KGDataset:
    """``tree-kg``, ``tree-kg:B:D`` or a KG directory (optionally ``dir@N`` for an N-triple subsample)."""
    if spec.startswith("tree-kg"):
        parts = spec.split(":")
        b, d = (int(parts[1]), int(parts[2])) if len(parts) == 3 else (3, 6)
        return D.gen_tree_kg(b, d, seed=seed)
    path, _, sub = spec.partition("@")
    if not Path(path).is_dir():
        raise ConfigError(f"KG dataset {spec!r} is neither a builtin name nor a directory")
    kg = D.load_kg(path)
    return D.subsample_kg(kg, int(sub), seed=seed) if sub else kg


def _tags(module: Module, cfg: RunConfig) -> dict:
    """Module tags plus any parameters the user asked to treat as ball points."""
    tags = module.manifold_tags()
    patterns = [p for p in cfg.ball_params.split(",") if p]
    for name in tags:
        if any(fnmatch.fnmatch(name, p) for p in patterns):
            tags[name] = PoincareBall(cfg.curvature)
    return tags


def _optimizer(module: Module, cfg: RunConfig, weight_decay: float):
    return make_optimizer(cfg.optimizer, module.named_parameters(), _tags(module, cfg), lr=cfg.learning_rate,
                          weight_decay=weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                          clip_norm=cfg.clip_norm)


@dataclass
class TrainResult:
    records: list[dict]
    epoch_seconds: list[float]
    best_epoch: int
    best_val: float
    test_metric: float
    metric_name: str
    state: dict[str, np.ndarray] = field(repr=False)
    module: Module = field(repr=False)
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val": self.best_val,
                f"test_{self.metric_name}": self.test_metric, **self.extra}


EpochCallback = Callable[[dict, float], None]
CheckpointCallback = Callable[[dict, int, float], None]


def _run_epochs(cfg: RunConfig, module: Module, step: Callable[[int], float], validate: Callable[[], float],
                on_epoch: EpochCallback | None, on_best: CheckpointCallback | None):
    records, times = [], []
    best_val, best_epoch, best_state = -np.inf, 0, module.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        try:
            loss = step(epoch)
        except NonFiniteError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
        elapsed = time.perf_counter() - t0
        if not np.isfinite(loss):
            raise TrainingAborted(f"epoch {epoch}: non-finite loss {loss}")
        val = float(validate())
        rec = {"epoch": epoch, "loss": float(loss), "val_metric": val}
        records.append(rec)
        times.append(elapsed)
        if val > best_val:
            best_val, best_epoch, best_state = val, epoch, module.state_dict()
            if on_best is not None:
                on_best(best_state, epoch, val)
        if on_epoch is not None:
            on_epoch(rec, elapsed)
    module.load_state_dict(best_state)
    return records, times, best_epoch, float(best_val), best_state


def build_node_classifier(cfg: RunConfig, graph: D.Graph, rng: np.random.Generator) -> NodeClassifier:
    specs = encoder_specs(cfg.model, graph.features.shape[1], cfg.hidden, cfg.layers, 1.0 - cfg.dropout, cfg.heads)
    norm = cfg.norm_config if cfg.model.startswith("n") else None
    return NodeClassifier(build_model(specs, norm, rng, cfg.curvature), graph.num_classes, rng)


def train_node_classification(cfg: RunConfig, graph: D.Graph, on_epoch: EpochCallback | None = None,
                              on_best: CheckpointCallback | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    if not graph.train_mask.any() or not graph.val_mask.any():
        raise ConfigError("node classification needs non-empty train and val splits")
    ctx = GraphContext(graph.edges, graph.n)
    model = build_node_classifier(cfg, graph, rng)
    opt = _optimizer(model, cfg, cfg.weight_decay)
    train_idx = np.flatnonzero(graph.train_mask)

    def step(_):
        opt.zero_grad()
        loss = cross_entropy(model.forward(ctx, graph.features, True, rng), graph.labels, train_idx)
        loss.backward()
        opt.step()
        return float(loss.data)

    def predict():
        with no_grad():
            return np.argmax(model.forward(ctx, graph.features).data, axis=1)

    def validate():
        return accuracy(predict(), graph.labels, graph.val_mask).value

    records, times, best_epoch, best_val, state = _run_epochs(cfg, model, step, validate, on_epoch, on_best)
    test = accuracy(predict(), graph.labels, graph.test_mask) if graph.test_mask.any() else None
    return TrainResult(records, times, best_epoch, best_val, test.value if test else float("nan"), "accuracy",
                       state, model, {"test_ci95": test.half_width if test else None})


def train_link_prediction(cfg: RunConfig, graph: D.Graph, on_epoch: EpochCallback | None = None,
                          on_best: CheckpointCallback | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    split = D.split_edges(graph, seed=cfg.split_seed)
    if len(split.val_pos) == 0 or len(split.test_pos) == 0:
        raise ConfigError("graph too small for a link-prediction split")
    ctx = GraphContext(split.train_pos, graph.n)
    specs = encoder_specs(cfg.model, graph.features.shape[1], cfg.hidden, cfg.layers, 1.0 - cfg.dropout, cfg.heads)
    norm = cfg.norm_config if cfg.model.startswith("n") else None
    model = LinkPredictor(build_model(specs, norm, rng, cfg.curvature))
    opt = _optimizer(model, cfg, cfg.weight_decay)
    forbidden = {tuple(e) for e in graph.edges.tolist()}
    pos = split.train_pos

    def step(_):
        neg = D.sample_non_edges(graph.n, len(pos), forbidden, rng)
        pairs = np.concatenate([pos, neg])
        targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        opt.zero_grad()
        z = model.embed(ctx, graph.features, True, rng)
        loss = binary_cross_entropy_logits(model.pair_logits(z, pairs), targets)
        loss.backward()
        opt.step()
        return float(loss.data)

    def auc(p, n):
        with no_grad():
            z = model.embed(ctx, graph.features)
            scores = model.pair_logits(z, np.concatenate([p, n])).data
        return roc_auc(scores, np.concatenate([np.ones(len(p)), np.zeros(len(n))])).value

    records, times, best_epoch, best_val, state = _run_epochs(
        cfg, model, step, lambda: auc(split.val_pos, split.val_neg), on_epoch, on_best)
    return TrainResult(records, times, best_epoch, best_val, auc(split.test_pos, split.test_neg), "roc_auc",
                       state, model)


def build_kg_model(cfg: RunConfig, kg: D.KGDataset, rng: np.random.Generator) -> MR.KGModel:
    return MR.make_kg_model(cfg.model, kg, cfg.dim, rng, c=cfg.curvature, biases=cfg.biases,
                            distance=cfg.distance, cfg=cfg.norm_config, mode=cfg.kg_mode)


def train_kg(cfg: RunConfig, kg: D.KGDataset, on_epoch: EpochCallback | None = None,
             on_best: CheckpointCallback | None = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    model = build_kg_model(cfg, kg, rng)
    opt = _optimizer(model, cfg, 0.0)
    known = kg.all_triples()

    def step(_):
        perm = rng.permutation(len(kg.train))
        losses = [MR.kg_train_step(kg.train[perm[i:i + cfg.batch_size]], model, opt, rng, cfg.negatives)
                  for i in range(0, len(perm), cfg.batch_size)]
        return float(np.mean(losses))

    def validate():
        return MR.rank_evaluate(kg.valid, model, known).mrr if len(kg.valid) else 0.0

    records, times, best_epoch, best_val, state = _run_epochs(cfg, model, step, validate, on_epoch, on_best)
    test = MR.rank_evaluate(kg.test, model, known)
    return TrainResult(records, times, best_epoch, best_val, test.mrr, "mrr", state, model,
                       {f"test_{k}": v for k, v in test.as_dict().items() if k != "mrr"})


def run(cfg: RunConfig, on_epoch: EpochCallback | None = None, on_best: CheckpointCallback | None = None):
    """Load the configured dataset (untimed) and train. Returns (result, dataset)."""
    if cfg.task == "kg":
        ds = resolve_kg(cfg.dataset, cfg.split_seed)
        return train_kg(cfg, ds, on_epoch, on_best), ds
    ds = resolve_node_graph(cfg.dataset, cfg.split_seed)
    trainer = train_node_classification if cfg.task == "node_class" else train_link_prediction
    return trainer(cfg, ds, on_epoch, on_best), ds


def dumps(obj) -> str:
    """Canonical one-line JSON (sorted keys, shortest round-trip floats)."""
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def bench_node_model(cfg: RunConfig, graph: D.Graph, repeats: int = 20, warmup: int = 3) -> dict:
    """Mean and stddev of training-epoch wall time (forward, backward, update) after warmup."""
    if repeats < 5:
        raise ConfigError("bench needs repeats >= 5")
    rng = np.random.default_rng(cfg.seed)
    ctx = GraphContext(graph.edges, graph.n)
    model = build_node_classifier(cfg, graph, rng)
    opt = _optimizer(model, cfg, cfg.weight_decay)
    idx = np.flatnonzero(graph.train_mask) if graph.train_mask.any() else np.arange(graph.n)
    labels = np.maximum(graph.labels, 0)
    times = []
    for i in range(warmup + repeats):
        t0 = time.perf_counter()
        opt.zero_grad()
        loss = cross_entropy(model.forward(ctx, graph.features, True, rng), labels, idx)
        loss.backward()
        opt.step()
        if i >= warmup:
            times.append(time.perf_counter() - t0)
    times = np.array(times)
    return {"model": cfg.model, "dataset": cfg.dataset, "mean": float(times.mean()),
            "stddev": float(times.std(ddof=1)), "epochs": repeats}
