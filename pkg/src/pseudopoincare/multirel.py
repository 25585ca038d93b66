"""Multi-relational knowledge-graph scorers, negative sampling, training and ranking.

Three scorers share one parameter layout (entity table, relation translation,
relation diagonal and optional head/tail entity biases):

* ``mure``: ``-d(R x_h, x_t + x_r)^2`` with an L1 (default) or L2 distance.
* ``murp``: ``-d_B(R (x) p_h, p_t (+) p_r)^2`` on the Poincaré ball.
* ``nmur``: either squashes the full MuRE score with
  ``sign(s) tanh(sqrt(c)|s|)/sqrt(c)`` (``score_norm``) or hyperbolically
  normalizes both MuRE operands before the distance (``embed_norm``).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import ball, geometry
from . import tensor as T
from .hypnorm import NormConfig, apply_norm
from .layers import Module
from .optim import EUCLIDEAN, Optimizer, PoincareBall
from .tensor import NonFiniteError, Tensor

KG_MODELS = ("mure", "murp", "nmur")
DEFAULT_NEGATIVES = 50
DEFAULT_BATCH = 128
STANDARD_DIMS = (40, 200)


class NormMode(str, enum.Enum):
    SCORE = "score_norm"
    EMBED = "embed_norm"


class KGModel(Module):
    """Parameters plus the scoring rule for one of ``mure``, ``murp``, ``nmur``."""

    def __init__(self, kind: str, num_entities: int, num_relations: int, dim: int,
                 rng: np.random.Generator, c: float = 1.0, biases: bool = True, distance: str = "l1",
                 cfg: NormConfig | None = None, mode: NormMode | str = NormMode.EMBED,
                 init_scale: float = 1e-3):
        super().__init__()
        if kind not in KG_MODELS:
            raise ValueError(f"unknown KG model {kind!r}; choose from {KG_MODELS}")
        if distance not in ("l1", "l2"):
            raise ValueError("distance must be 'l1' or 'l2'")
        if num_entities < 1 or num_relations < 1 or dim < 1:
            raise ValueError("vocabulary sizes and dim must be positive")
        self.kind = kind
        self.c = float(c)
        self.biases = biases
        self.distance = distance
        self.cfg = cfg if cfg is not None else NormConfig(c=c)
        self.mode = NormMode(mode)
        self.num_entities = num_entities
        ball_tag = PoincareBall(self.c) if kind == "murp" else EUCLIDEAN
        self.entity = self.add_param("entity", init_scale * rng.standard_normal((num_entities, dim)), ball_tag)
        self.rel_vec = self.add_param("rel_vec", init_scale * rng.standard_normal((num_relations, dim)), ball_tag)
        self.rel_diag = self.add_param("rel_diag", rng.uniform(-1.0, 1.0, (num_relations, dim)))
        self.bias_head = self.add_param("bias_head", np.zeros(num_entities))
        self.bias_tail = self.add_param("bias_tail", np.zeros(num_entities))
        self.counter = ball.ProjectionCounter(ball.LAYER_MARGIN)

    def _bias(self, h, t) -> Tensor | float:
        if not self.biases:
            return 0.0
        return T.take(self.bias_head, h) + T.take(self.bias_tail, t)

    def score(self, h, r, t) -> Tensor:
        """Scores for broadcastable integer index arrays ``h``, ``r``, ``t``."""
        h, r, t = (np.asarray(a, dtype=np.int64) for a in (h, r, t))
        if self.kind == "mure":
            return mure_score(self, h, r, t)
        if self.kind == "murp":
            return murp_score(self, h, r, t)
        return nmur_score(self, h, r, t, self.cfg, self.mode)

    def project_entities(self) -> None:
        """Pull ball-tagged rows back inside the ball (MuRP only)."""
        if self.kind != "murp":
            return
        for p in (self.entity, self.rel_vec):
            p.data, n = geometry.project(p.data, self.c, return_count=True)
            self.counter.count += int(n)


def _euclidean_sqdist(u: Tensor, v: Tensor, distance: str) -> Tensor:
    diff = u - v
    if distance == "l1":
        d = T.norm(diff, axis=-1, keepdims=False, ord=1)
        return d * d
    return T.sum(diff * diff, axis=-1)


def _mure_operands(m: KGModel, h, r, t) -> tuple[Tensor, Tensor]:
    u = T.take(m.rel_diag, r) * T.take(m.entity, h)
    v = T.take(m.entity, t) + T.take(m.rel_vec, r)
    return u, v


def mure_score(m: KGModel, h, r, t) -> Tensor:
    u, v = _mure_operands(m, h, r, t)
    return -_euclidean_sqdist(u, v, m.distance) + m._bias(h, t)


def murp_score(m: KGModel, h, r, t) -> Tensor:
    c = m.c
    u = ball.mobius_diag(T.take(m.entity, h), T.take(m.rel_diag, r), c, m.counter)
    v = ball.mobius_add(T.take(m.entity, t), T.take(m.rel_vec, r), c, m.counter)
    sq = ball.sqdistance(u, v, c, m.counter)
    sq = T.reshape(sq, sq.shape[:-1])
    return -sq + m._bias(h, t)


def squash_score(s, c: float):
    """sign(s) tanh(sqrt(c)|s|)/sqrt(c); tanh is odd so this is tanh(sqrt(c) s)/sqrt(c)."""
    sc = math.sqrt(c)
    if isinstance(s, Tensor):
        return T.scale(T.tanh(T.scale(s, sc)), 1.0 / sc)
    return np.tanh(sc * np.asarray(s, dtype=np.float64)) / sc


def nmur_score(m: KGModel, h, r, t, cfg: NormConfig, mode: NormMode | str) -> Tensor:
    mode = NormMode(mode)
    if mode is NormMode.SCORE:
        return squash_score(mure_score(m, h, r, t), cfg.c)
    u, v = _mure_operands(m, h, r, t)
    return -_euclidean_sqdist(apply_norm(u, cfg), apply_norm(v, cfg), m.distance) + m._bias(h, t)


def negative_sample(triple, k: int, rng: np.random.Generator, num_entities: int) -> np.ndarray:
    """``k`` corruptions of one triple, head or tail replaced with equal probability."""
    return negative_batch(np.asarray(triple, dtype=np.int64).reshape(1, 3), k, rng, num_entities)[0]


def negative_batch(triples: np.ndarray, k: int, rng: np.random.Generator, num_entities: int) -> np.ndarray:
    """(B, k, 3) corruptions. A draw equal to the original is redrawn once, then kept."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if num_entities < 2:
        raise ValueError("cannot corrupt triples with a single-entity vocabulary")
    triples = np.asarray(triples, dtype=np.int64)
    b = len(triples)
    tail_side = rng.random((b, k)) < 0.5
    ents = rng.integers(0, num_entities, (b, k))
    original = np.where(tail_side, triples[:, 2:3], triples[:, 0:1])
    clash = ents == original
    ents[clash] = rng.integers(0, num_entities, int(clash.sum()))
    out = np.repeat(triples[:, None, :], k, axis=1)
    out[..., 0] = np.where(tail_side, out[..., 0], ents)
    out[..., 2] = np.where(tail_side, ents, out[..., 2])
    return out


def bernoulli_nll(pos: Tensor, neg: Tensor) -> Tensor:
    """mean_b [ -log sigmoid(pos_b) - sum_j log sigmoid(-neg_bj) ]."""
    per = T.softplus(-pos) + T.sum(T.softplus(neg), axis=-1)
    return T.mean(per)


def kg_loss(model: KGModel, batch: np.ndarray, negatives: np.ndarray) -> Tensor:
    pos = model.score(batch[:, 0], batch[:, 1], batch[:, 2])
    neg = model.score(negatives[..., 0], negatives[..., 1], negatives[..., 2])
    return bernoulli_nll(pos, neg)


def kg_train_step(batch: np.ndarray, model: KGModel, optimizer: Optimizer, rng: np.random.Generator,
                  k: int = DEFAULT_NEGATIVES) -> float:
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    if len(batch) == 0:
        raise ValueError("empty batch")
    negatives = negative_batch(batch, k, rng, model.num_entities)
    optimizer.zero_grad()
    loss = kg_loss(model, batch, negatives)
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite KG loss {float(loss.data)} on batch of {len(batch)}")
    loss.backward()
    optimizer.step()
    model.project_entities()
    return float(loss.data)


@dataclass
class RankReport:
    mrr: float
    hits: dict[int, float]
    ranks: np.ndarray = field(repr=False)

    def as_dict(self) -> dict[str, float]:
        return {"mrr": self.mrr, **{f"hits@{k}": v for k, v in self.hits.items()}}


def rank_metrics(ranks, ks=(1, 3, 10)) -> RankReport:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks to summarize")
    if np.any(ranks < 1):
        raise ValueError("ranks start at 1")
    return RankReport(float(np.mean(1.0 / ranks)), {k: float(np.mean(ranks <= k)) for k in ks}, ranks)


def pessimistic_rank(scores: np.ndarray, true_idx: int, mask: np.ndarray | None = None) -> int:
    """1 + number of unmasked competitors scoring >= the true answer."""
    comp = scores >= scores[true_idx]
    comp[true_idx] = False
    if mask is not None:
        comp &= ~mask
    return 1 + int(comp.sum())


def _filter_index(triples: np.ndarray) -> tuple[dict, dict]:
    tails: dict[tuple[int, int], list[int]] = {}
    heads: dict[tuple[int, int], list[int]] = {}
    for h, r, t in triples.tolist():
        tails.setdefault((h, r), []).append(t)
        heads.setdefault((r, t), []).append(h)
    return tails, heads


def rank_evaluate(test: np.ndarray, model: KGModel, known: np.ndarray, chunk_floats: int = 2**22,
                  score_fn=None) -> RankReport:
    """Filtered ranks of true tails and heads among all entities, both directions pooled.

    ``known`` is every true triple (train, valid and test); other known answers
    are removed before ranking. Ties count against the true answer.
    ``score_fn(h, r, t)`` overrides ``model.score`` (used to compare scorers).
    """
    test = np.asarray(test, dtype=np.int64).reshape(-1, 3)
    if len(test) == 0:
        raise ValueError("empty test set")
    score_fn = score_fn or model.score
    tails, heads = _filter_index(np.asarray(known, dtype=np.int64).reshape(-1, 3))
    e = model.num_entities
    dim = model.entity.shape[1]
    step = max(1, chunk_floats // (e * dim))
    all_e = np.arange(e)[None, :]
    ranks = []
    with T.no_grad():
        for start in range(0, len(test), step):
            part = test[start:start + step]
            h, r, t = part[:, :1], part[:, 1:2], part[:, 2:3]
            tail_scores = np.asarray(score_fn(h, r, all_e).data)
            head_scores = np.asarray(score_fn(all_e, r, t).data)
            for i, (hh, rr, tt) in enumerate(part.tolist()):
                mask = np.zeros(e, bool)
                mask[tails.get((hh, rr), [])] = True
                ranks.append(pessimistic_rank(tail_scores[i], tt, mask))
                mask[:] = False
                mask[heads.get((rr, tt), [])] = True
                ranks.append(pessimistic_rank(head_scores[i], hh, mask))
    return rank_metrics(ranks)


def make_kg_model(kind: str, kg, dim: int, rng: np.random.Generator, **kwargs) -> KGModel:
    return KGModel(kind, kg.num_entities, kg.num_relations, dim, rng, **kwargs)
