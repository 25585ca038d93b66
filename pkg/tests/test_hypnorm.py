import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pseudopoincare import geometry as G
from pseudopoincare import tensor as T
from pseudopoincare.hypnorm import (NormConfig, Placement, apply_norm, default_scale, omega, omega_cascade,
                                    verify_cascade_collapse, verify_omega_product)
from pseudopoincare.tensor import Tensor


def test_omega_examples():
    assert omega(np.zeros(3), 1.0) == 1.0
    np.testing.assert_allclose(omega(np.array([1.0, 0.0]), 1.0), math.tanh(1.0), rtol=1e-15)
    np.testing.assert_allclose(math.tanh(1.0), 0.7615941560, atol=1e-10)
    np.testing.assert_allclose(omega(np.array([0.0, 2.0]), 0.25), 0.7615941560, atol=1e-10)


def test_omega_rowwise():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(omega(x, 1.0), [1.0, math.tanh(1), math.tanh(3) / 3], rtol=1e-15)


def test_omega_bounded_and_decreasing_on_log_grid():
    radii = np.logspace(-12, 3, 2000)
    for c in (0.3, 1.0, 1.5):
        w = omega(radii[:, None], c)
        assert np.all(w > 0) and np.all(w <= 1)
        # strictly decreasing once the value is resolvable from 1 in float64
        resolved = radii * math.sqrt(c) > 1e-5
        assert np.all(np.diff(w[resolved]) < 0)
        assert np.all(np.diff(w) <= 0)


def test_omega_series_branch_is_continuous():
    # the small-radius series and the closed form meet without a jump
    c = 1.0
    t = np.array([1e-3 * (1 - 1e-9), 1e-3 * (1 + 1e-9)])
    w = omega(t[:, None], c)
    np.testing.assert_allclose(w, np.tanh(t) / t, rtol=1e-14)


def test_default_scale():
    assert default_scale(0.3) == 5.0 and default_scale(0.5) == 5.0 and default_scale(1.0) == 5.0
    assert default_scale(1.5) == 3.0
    cfg = NormConfig(c=0.3)
    assert cfg.scale == 5.0 and cfg.placement is Placement.PER_LAYER
    with pytest.raises(ValueError):
        NormConfig(c=1.0, scale=0.0)
    with pytest.raises(ValueError):
        NormConfig(c=-1.0)


def test_apply_norm_examples():
    cfg = NormConfig(c=1.0, scale=1.0)
    assert apply_norm(np.zeros((1, 2)), cfg).tolist() == [[0.0, 0.0]]
    np.testing.assert_allclose(apply_norm(np.array([[0.5, 0.0]]), cfg), [[0.4621171573, 0.0]], atol=1e-10)
    np.testing.assert_allclose(apply_norm(np.array([[0.5, 0.0]]), cfg), G.exp_map_origin(np.array([[0.5, 0.0]]), 1.0),
                               rtol=1e-15)


def test_apply_norm_tensor_matches_array():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    cfg = NormConfig(c=0.3)
    assert np.array_equal(apply_norm(Tensor(x), cfg).data, apply_norm(x, cfg))


@pytest.mark.parametrize("c", [0.3, 0.5, 1.0, 1.5])
def test_apply_norm_bound(c):
    rng = np.random.default_rng(1)
    cfg = NormConfig(c=c)
    x = rng.standard_normal((10_000, 6)) * rng.uniform(0, 2.5, (10_000, 1))
    out = apply_norm(x, cfg)
    assert np.all(np.linalg.norm(out, axis=-1) < cfg.bound)
    cos = np.sum(out * x, axis=-1) / (np.linalg.norm(out, axis=-1) * np.linalg.norm(x, axis=-1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-12)


def test_apply_norm_gradient():
    rng = np.random.default_rng(2)
    cfg = NormConfig(c=1.0)
    for i in range(100):
        radius = 1e-8 if i < 5 else rng.uniform(0.01, 4.0)
        d = rng.standard_normal((1, 4))
        x = d / np.linalg.norm(d) * radius
        w = rng.standard_normal((1, 4))
        rep = T.finite_diff_check(lambda x: T.sum(apply_norm(x, cfg) * w), {"x": x}, "x",
                                  epsilon=radius * 1e-3 if i < 5 else 1e-6, tolerance=1e-5)
        assert rep.passed, (i, rep.max_rel_error)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0, 1e3)))
def test_argmax_invariance(x):
    out = apply_norm(x[None, :], NormConfig(c=1.0))[0]
    assert np.argmax(out) == np.argmax(x)


def test_omega_cascade_examples():
    o = np.array([0.3, 0.4])
    assert omega_cascade([o], 1.0) == omega(o, 1.0)
    assert omega_cascade([np.zeros(3), np.zeros(2)], 1.0) == 1.0
    np.testing.assert_allclose(omega_cascade([np.array([1.0, 0]), np.array([0, 1.0])], 1.0), 0.5800256583, atol=1e-10)
    np.testing.assert_allclose(math.tanh(1.0) ** 2, 0.5800256583, atol=1e-10)
    with pytest.raises(ValueError):
        omega_cascade([], 1.0)


@pytest.mark.parametrize("c", [0.3, 1.0, 1.5])
def test_cascade_collapse(c):
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((100, 4))
    pts = pts / np.linalg.norm(pts, axis=1, keepdims=True) * rng.uniform(0, 0.95, (100, 1)) / math.sqrt(c)
    one = verify_cascade_collapse([rng.standard_normal((4, 4))], pts, c)
    assert one.max_deviation == 0.0
    three = verify_cascade_collapse([rng.standard_normal((4, 4)) / 2 for _ in range(3)], pts, c)
    assert three.passed and three.max_deviation <= 1e-9
    m = rng.standard_normal((4, 4)) / 2
    nonlinear = verify_cascade_collapse([lambda v: np.tanh(v @ m), m], pts, c)
    assert nonlinear.max_deviation <= 1e-9


def test_cascade_collapse_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        verify_cascade_collapse([np.ones((3, 2)), np.ones((3, 3))], np.zeros((1, 3)), 1.0)


def test_omega_product_single_layer_is_exact():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((50, 3))
    rep = verify_omega_product([rng.standard_normal((3, 3))], x, 1.0)
    assert rep.max_gap <= 1e-15
    np.testing.assert_allclose(rep.algorithm_output, rep.exact_output, atol=1e-12)


def test_omega_product_two_layers_reports_both_forms():
    rng = np.random.default_rng(5)
    m1, m2 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    x = rng.standard_normal((20, 3))
    rep = verify_omega_product([m1, m2], x, 1.0)
    # independent evaluation of both expressions
    h1 = x @ m1
    w1 = omega(h1, 1.0)[:, None]
    chained = omega((w1 * h1) @ m2, 1.0)[:, None] * w1 * (h1 @ m2)
    product = omega(h1 @ m2, 1.0)[:, None] * w1 * (h1 @ m2)
    np.testing.assert_allclose(rep.algorithm_output, chained, rtol=1e-12)
    np.testing.assert_allclose(rep.cascade_output, product, rtol=1e-12)
    assert rep.max_gap > 1e-6
    zero = verify_omega_product([m1, m2], np.zeros((1, 3)), 1.0)
    assert np.all(zero.algorithm_output == 0) and np.all(zero.cascade_output == 0)


def test_omega_product_rejects_nonlinear_layer():
    with pytest.raises(ValueError):
        verify_omega_product([np.tanh], np.ones((2, 3)), 1.0)
