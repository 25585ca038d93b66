import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudopoincare import geometry as G
from pseudopoincare import tensor as T
from pseudopoincare.hypnorm import NormConfig
from pseudopoincare.multirel import (KGModel, bernoulli_nll, kg_loss, kg_train_step, mure_score, murp_score,
                                     negative_batch, negative_sample, nmur_score, pessimistic_rank, rank_evaluate,
                                     rank_metrics, squash_score)
from pseudopoincare.optim import make_optimizer


def tiny_model(kind, dim=1, biases=False, **kw):
    return KGModel(kind, 3, 2, dim, np.random.default_rng(0), biases=biases, **kw)


def set_params(m, entity, rel_vec, rel_diag):
    m.entity.data = np.array(entity, dtype=float)
    m.rel_vec.data = np.array(rel_vec, dtype=float)
    m.rel_diag.data = np.array(rel_diag, dtype=float)


def test_mure_examples():
    m = tiny_model("mure", dim=2)
    set_params(m, [[0.3, -0.1], [0.3, -0.1], [0, 0]], [[0, 0], [0, 0]], [[1, 1], [1, 1]])
    assert mure_score(m, 0, 0, 1).data == 0.0
    m = tiny_model("mure")
    set_params(m, [[1.0], [1.0], [0.0]], [[0.5], [0.0]], [[2.0], [1.0]])
    np.testing.assert_allclose(mure_score(m, 0, 0, 1).data, -0.25, rtol=1e-15)


def test_mure_translation_covariance():
    rng = np.random.default_rng(1)
    m = KGModel("mure", 4, 2, 5, rng, biases=False)
    m.entity.data = rng.standard_normal((4, 5))
    m.rel_vec.data = rng.standard_normal((2, 5))
    before = mure_score(m, 0, 1, 2).data
    shift = rng.standard_normal(5)
    m.entity.data[2] += shift
    m.rel_vec.data[1] -= shift
    np.testing.assert_allclose(mure_score(m, 0, 1, 2).data, before, rtol=1e-12)


def test_mure_l2_option_and_biases():
    m = KGModel("mure", 3, 1, 2, np.random.default_rng(2), distance="l2")
    set_params(m, [[1, 1], [0, 0], [0, 0]], [[0, 0]], [[1, 1]])
    m.bias_head.data = np.array([0.5, 0, 0])
    m.bias_tail.data = np.array([0, 0.25, 0])
    np.testing.assert_allclose(m.score(0, 0, 1).data, -2.0 + 0.75, rtol=1e-15)
    with pytest.raises(ValueError):
        KGModel("mure", 3, 1, 2, np.random.default_rng(0), distance="cos")
    with pytest.raises(ValueError):
        KGModel("transe", 3, 1, 2, np.random.default_rng(0))


def test_murp_examples():
    rng = np.random.default_rng(3)
    for c in (0.5, 1.0):
        m = KGModel("murp", 5, 2, 3, rng, c=c, biases=False)
        m.entity.data = G.exp_map_origin(rng.standard_normal((5, 3)) * 0.4, c)
        m.rel_vec.data = G.exp_map_origin(rng.standard_normal((2, 3)) * 0.4, c)
        h, r, t = np.arange(5), np.array([0, 1, 0, 1, 0]), np.array([1, 2, 3, 4, 0])
        got = murp_score(m, h, r, t).data
        assert np.all(got <= 0)
        # independent evaluation through the raw distance formula
        a = G.exp_map_origin(G.log_map_origin(m.entity.data[h], c) * m.rel_diag.data[r], c)
        b = G.mobius_add(m.entity.data[t], m.rel_vec.data[r], c)
        diff = G.mobius_add(-a, b, c)
        d = 2 / math.sqrt(c) * np.arctanh(math.sqrt(c) * np.linalg.norm(diff, axis=-1))
        np.testing.assert_allclose(got, -d**2, rtol=1e-9)


def test_murp_zero_when_operands_coincide():
    m = tiny_model("murp", dim=2)
    set_params(m, [[0.2, 0.1], [0.2, 0.1], [0, 0]], [[0, 0], [0, 0]], [[1, 1], [1, 1]])
    np.testing.assert_allclose(murp_score(m, 0, 0, 1).data, 0.0, atol=1e-24)


def test_squash_examples():
    assert squash_score(0.0, 1.0) == 0.0
    np.testing.assert_allclose(squash_score(-0.25, 1.0), -0.2449186624, atol=1e-10)
    np.testing.assert_allclose(-math.tanh(0.25), -0.2449186624, atol=1e-10)
    np.testing.assert_allclose(squash_score(-100.0, 1.0), -0.9999999959, atol=1e-9)
    s = np.linspace(-10, 0, 101)
    for c in (0.3, 1.0, 1.5):
        out = squash_score(s, c)
        assert np.all(out > -1 / math.sqrt(c)) and np.all(out <= 0)


def test_nmur_modes_at_coincident_embeddings():
    for mode in ("score_norm", "embed_norm"):
        m = tiny_model("nmur", dim=2, mode=mode)
        set_params(m, [[0.2, 0.1], [0.2, 0.1], [0, 0]], [[0, 0], [0, 0]], [[1, 1], [1, 1]])
        assert nmur_score(m, 0, 0, 1, m.cfg, mode).data == 0.0


def test_nmur_score_norm_wraps_mure():
    m = tiny_model("nmur", mode="score_norm")
    set_params(m, [[1.0], [1.0], [0.0]], [[0.5], [0.0]], [[2.0], [1.0]])
    np.testing.assert_allclose(m.score(0, 0, 1).data, -math.tanh(0.25), rtol=1e-15)


def test_nmur_embed_norm_bounds_distance():
    rng = np.random.default_rng(4)
    cfg = NormConfig(c=1.0)
    m = KGModel("nmur", 10, 2, 4, rng, cfg=cfg, mode="embed_norm", biases=False, distance="l2")
    m.entity.data = rng.standard_normal((10, 4)) * 100
    s = m.score(np.arange(10), 0, np.arange(10)[::-1]).data
    assert np.all(s >= -(2 * cfg.bound) ** 2) and np.all(s <= 0)


def test_score_norm_ranks_equal_mure_ranks():
    rng = np.random.default_rng(5)
    e, dim = 60, 8
    triples = np.stack([rng.integers(0, e, 200), rng.integers(0, 3, 200), rng.integers(0, e, 200)], 1)
    mure = KGModel("mure", e, 3, dim, rng)
    for p in mure.named_parameters().values():
        p.data = rng.standard_normal(p.shape) * 0.1
    nmur = KGModel("nmur", e, 3, dim, rng, mode="score_norm")
    nmur.load_state_dict(mure.state_dict())
    a = rank_evaluate(triples[:50], mure, triples)
    b = rank_evaluate(triples[:50], nmur, triples)
    assert np.array_equal(a.ranks, b.ranks)


def test_squash_order_preserved_until_float_saturation():
    s = -np.linspace(0, 12, 12_001)
    assert np.all(np.diff(squash_score(s, 1.0)) < 0)
    # beyond this tanh rounds to exactly 1, so distinct scores tie
    assert squash_score(-19.5, 1.0) == squash_score(-25.0, 1.0) == -1.0


@pytest.mark.parametrize("kind,mode", [("mure", None), ("murp", None), ("nmur", "score_norm"), ("nmur", "embed_norm")])
def test_scorer_gradients(kind, mode):
    rng = np.random.default_rng(6)
    kw = {"mode": mode} if mode else {}
    m = KGModel(kind, 5, 2, 3, rng, distance="l2", **kw)
    m.entity.data = G.exp_map_origin(rng.standard_normal((5, 3)) * 0.5, 1.0)
    m.rel_vec.data = G.exp_map_origin(rng.standard_normal((2, 3)) * 0.3, 1.0)
    m.bias_head.data = rng.standard_normal(5)
    h, r, t = np.array([0, 1, 2, 3]), np.array([0, 1, 1, 0]), np.array([4, 3, 0, 1])
    w = rng.standard_normal(4)
    for name in ("entity", "rel_vec", "rel_diag", "bias_head"):
        original = getattr(m, name)

        def f(**kw):
            setattr(m, name, kw[name])
            return T.sum(m.score(h, r, t) * w)

        rep = T.finite_diff_check(f, {name: original.data.copy()}, name, tolerance=1e-4)
        setattr(m, name, original)
        assert rep.passed, (kind, name, rep.max_rel_error)


def test_l1_distance_gradient():
    rng = np.random.default_rng(7)
    m = KGModel("mure", 4, 1, 3, rng)
    m.entity.data = rng.standard_normal((4, 3))
    original = m.entity

    def f(entity):
        m.entity = entity
        return T.sum(m.score([0, 1], [0, 0], [2, 3]))

    rep = T.finite_diff_check(f, {"entity": original.data.copy()}, "entity", tolerance=1e-4)
    m.entity = original
    assert rep.passed


def test_negative_sampling_determinism_and_errors():
    a = negative_sample([0, 0, 1], 1, np.random.default_rng(8), 10)
    b = negative_sample([0, 0, 1], 1, np.random.default_rng(8), 10)
    assert a.tolist() == b.tolist() and a.shape == (1, 3)
    with pytest.raises(ValueError):
        negative_sample([0, 0, 0], 1, np.random.default_rng(0), 1)
    with pytest.raises(ValueError):
        negative_sample([0, 0, 1], 0, np.random.default_rng(0), 5)


def test_negative_sampling_frequencies():
    e = 10
    triple = np.array([3, 1, 7])
    neg = negative_sample(triple, 100_000, np.random.default_rng(9), e)
    assert np.all(neg[:, 1] == 1)
    changed = np.any(neg != triple, axis=1)
    assert changed.mean() >= 1 - 2 / e
    head_side = neg[:, 0] != triple[0]
    tail_side = neg[:, 2] != triple[2]
    assert not np.any(head_side & tail_side)
    # a kept collision leaves the side unobservable; those are rare (p = 1/e^2)
    frac_head = head_side.sum() / (head_side.sum() + tail_side.sum())
    assert abs(frac_head - 0.5) < 0.01


def test_negative_batch_shape():
    out = negative_batch(np.array([[0, 0, 1], [2, 1, 3]]), 5, np.random.default_rng(0), 6)
    assert out.shape == (2, 5, 3)


def test_loss_at_zero_scores():
    k = 50
    loss = bernoulli_nll(T.Tensor(np.zeros(4)), T.Tensor(np.zeros((4, k))))
    np.testing.assert_allclose(loss.data, (1 + k) * math.log(2), rtol=1e-14)
    assert 51 * math.log(2) == pytest.approx(35.35050620855721, rel=1e-14)
    perfect = bernoulli_nll(T.Tensor(np.full(4, 800.0)), T.Tensor(np.full((4, k), -800.0)))
    assert perfect.data == 0.0


def test_training_decreases_loss():
    rng = np.random.default_rng(10)
    triples = np.stack([rng.integers(0, 8, 20), rng.integers(0, 2, 20), rng.integers(0, 8, 20)], 1)
    for kind in ("mure", "murp", "nmur"):
        m = KGModel(kind, 8, 2, 6, np.random.default_rng(0))
        opt = make_optimizer("radam", m.named_parameters(), m.manifold_tags(), lr=0.05)
        fixed = negative_batch(triples, 10, np.random.default_rng(1), 8)
        start = float(kg_loss(m, triples, fixed).data)
        for _ in range(100):
            kg_train_step(triples, m, opt, rng, 10)
        assert float(kg_loss(m, triples, fixed).data) < start, kind
        if kind == "murp":
            assert np.all(G.in_ball(m.entity.data, m.c))


def test_rank_metrics_examples():
    rep = rank_metrics([1, 2, 4])
    np.testing.assert_allclose(rep.mrr, 0.5833333333, atol=1e-10)
    assert rep.hits[3] == pytest.approx(2 / 3) and rep.hits[10] == 1.0 and rep.hits[1] == pytest.approx(1 / 3)
    ones = rank_metrics([1, 1, 1])
    assert ones.mrr == 1.0 and ones.hits[1] == 1.0
    with pytest.raises(ValueError):
        rank_metrics([])
    with pytest.raises(ValueError):
        rank_metrics([0, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=1, max_size=50))
def test_rank_metric_consistency(ranks):
    rep = rank_metrics(ranks)
    r = np.array(ranks, dtype=float)
    assert rep.mrr == pytest.approx(sum(1 / x for x in ranks) / len(ranks))
    assert rep.hits[1] <= rep.hits[3] <= rep.hits[10]
    assert 0 < rep.mrr <= 1
    assert rep.mrr <= rep.hits[1] + (1 - rep.hits[1]) * 0.5 + 1e-12
    assert rep.hits[10] == pytest.approx(np.mean(r <= 10))


def test_pessimistic_ties():
    scores = np.array([0.5, 0.9, 0.5, 0.5])
    assert pessimistic_rank(scores, 0) == 4
    mask = np.array([False, True, False, False])
    assert pessimistic_rank(scores, 0, mask) == 3


def brute_force_ranks(model, test, known):
    known_set = {tuple(x) for x in known.tolist()}
    ranks = []
    for h, r, t in test.tolist():
        for side in ("tail", "head"):
            cands = []
            for e in range(model.num_entities):
                trip = (h, r, e) if side == "tail" else (e, r, t)
                true = (h, r, t)
                if trip != true and trip in known_set:
                    continue
                cands.append((float(model.score(*trip).data), trip == true))
            # sort by score descending, true answer last among ties
            cands.sort(key=lambda x: (-x[0], x[1]))
            ranks.append(1 + [i for i, (_, is_true) in enumerate(cands) if is_true][0])
    return ranks


@pytest.mark.parametrize("kind", ["mure", "murp", "nmur"])
def test_rank_evaluate_matches_brute_force(kind):
    rng = np.random.default_rng(11)
    e = 30
    known = np.unique(np.stack([rng.integers(0, e, 120), rng.integers(0, 3, 120), rng.integers(0, e, 120)], 1), axis=0)
    m = KGModel(kind, e, 3, 4, rng)
    for name, p in m.named_parameters().items():
        p.data = rng.standard_normal(p.shape) * 0.3
    if kind == "murp":
        m.project_entities()
    # integer-valued biases create exact ties that exercise the pessimistic rule
    m.bias_tail.data = np.round(m.bias_tail.data)
    test = known[:15]
    rep = rank_evaluate(test, m, known, chunk_floats=500)
    assert rep.ranks.tolist() == brute_force_ranks(m, test, known)


def test_rank_evaluate_empty_test():
    m = tiny_model("mure")
    with pytest.raises(ValueError):
        rank_evaluate(np.zeros((0, 3)), m, np.zeros((0, 3)))
