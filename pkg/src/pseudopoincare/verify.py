"""Numeric verification suite: ball identities, normalization identities, midpoint study.

Each check returns a :class:`Check`. Hard checks decide the exit status of the
``verify`` command; informational ones (the cascade gap) are only reported.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as G
from . import tensor as T
from .hypnorm import NormConfig, apply_norm, omega, verify_cascade_collapse, verify_omega_product

CURVATURES = (0.3, 0.5, 1.0, 1.5)
PROFILES = {"quick": 1000, "full": 10_000}
MIDPOINT_ARCS = (math.pi / 6, math.pi / 3, math.pi / 2)
MIDPOINT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    hard: bool = True

    def as_dict(self) -> dict:
        return asdict(self)


def random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_tangent(rng, n: int, dim: int, c: float, max_t: float) -> np.ndarray:
    """Vectors with sqrt(c)|x| uniform in [0, max_t]."""
    return random_directions(rng, n, dim) * (rng.uniform(0, max_t, (n, 1)) / math.sqrt(c))


def random_ball(rng, n: int, dim: int, c: float, max_r: float) -> np.ndarray:
    """Ball points with sqrt(c)|p| uniform in [0, max_r]."""
    return random_tangent(rng, n, dim, c, max_r)


def geometry_identities(c: float, n: int, rng: np.random.Generator, dim: int = 5) -> dict[str, float]:
    """Max absolute deviation of each ball identity over ``n`` random cases."""
    x = random_tangent(rng, n, dim, c, 3.0)
    p = random_ball(rng, n, dim, c, 0.99)
    v = random_ball(rng, n, dim, c, 0.7)
    u = random_tangent(rng, n, dim, c, 1.0)
    a = random_ball(rng, n, dim, c, 0.9)
    b = random_ball(rng, n, dim, c, 0.9)
    big = random_tangent(rng, n, dim, c, 40.0)
    out = {
        "log0_exp0": np.abs(G.log_map_origin(G.exp_map_origin(x, c), c) - x).max(),
        "exp0_log0": np.abs(G.exp_map_origin(G.log_map_origin(p, c), c) - p).max(),
        "log_exp_at_base": np.abs(G.log_map_at(v, G.exp_map_at(v, u, c), c) - u).max(),
        "exp_log_at_base": np.abs(G.exp_map_at(v, G.log_map_at(v, a, c), c) - a).max(),
        "left_cancellation": np.abs(G.mobius_add(-a, G.mobius_add(a, b, c), c) - b).max(),
        "distance_origin": np.abs(G.hyperbolic_distance(np.zeros_like(x), G.exp_map_origin(x, c), c)
                                  - 2 * np.linalg.norm(x, axis=-1)).max(),
    }
    members = np.concatenate([G.exp_map_origin(big, c), G.mobius_add(a, b, c), G.exp_map_at(v, big, c)])
    out["ball_violations"] = float(np.count_nonzero(~G.in_ball(members, c)))
    return {k: float(val) for k, val in out.items()}


def normalization_identities(c: float, n: int, rng: np.random.Generator, dim: int = 5) -> dict[str, float]:
    """exp0 as omega-scaling, log0 as inverse scaling, one-layer rewrite, norm bound."""
    x = random_tangent(rng, n, dim, c, 3.0)
    p = random_ball(rng, n, dim, c, 0.99)
    w = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    sc = math.sqrt(c)
    pn = np.linalg.norm(p, axis=-1, keepdims=True)
    inv = np.where(pn > 0, np.arctanh(sc * pn) / np.where(pn > 0, sc * pn, 1.0), 1.0)
    h = G.log_map_origin(p, c) @ w
    cfg = NormConfig(c=c)
    moderate = np.linalg.norm(apply_norm(random_tangent(rng, n, dim, c, 15.0), cfg), axis=-1)
    # once tanh rounds to 1 the norm equals the bound; allow round-off only there
    saturated = np.linalg.norm(apply_norm(random_tangent(rng, n, dim, c, 50.0), cfg), axis=-1)
    return {
        "exp0_is_omega_scaling": float(np.abs(G.exp_map_origin(x, c) - omega(x, c)[:, None] * x).max()),
        "log0_is_inverse_scaling": float(np.abs(G.log_map_origin(p, c) - inv * p).max()),
        "single_layer_rewrite": float(np.abs(G.exp_map_origin(h, c) - omega(h, c)[:, None] * h).max()),
        "norm_bound_violations": float(np.count_nonzero(moderate >= cfg.bound)
                                       + np.count_nonzero(saturated > cfg.bound * (1 + 4e-16 * 4))),
    }


def cascade_deviation(c: float, depth: int, n: int, rng: np.random.Generator, dim: int = 5,
                     nonlinear: bool = False) -> float:
    layers = [rng.standard_normal((dim, dim)) / math.sqrt(dim) for _ in range(depth)]
    if nonlinear:
        layers = [(lambda m: (lambda v: np.tanh(v @ m)))(m) for m in layers]
    pts = random_ball(rng, n, dim, c, 0.95)
    return verify_cascade_collapse(layers, pts, c).max_deviation


def midpoint_monotone(arc: float, alphas=MIDPOINT_ALPHAS) -> tuple[bool, list[float]]:
    errors = [t.error for t in G.midpoint_experiment(arc, alphas)]
    ok = errors[0] == 0.0 and all(b >= a for a, b in zip(errors, errors[1:]))
    return ok, errors


def apply_norm_gradcheck(rng: np.random.Generator, points: int = 20, c: float = 1.0) -> float:
    cfg = NormConfig(c=c)
    worst = 0.0
    for i in range(points):
        x = rng.standard_normal((1, 4)) * (1e-8 if i == 0 else rng.uniform(0.05, 3.0))
        w = rng.standard_normal((1, 4))
        rep = T.finite_diff_check(lambda x: T.sum(apply_norm(x, cfg) * w), {"x": x}, "x", epsilon=1e-6 if i else 1e-10)
        worst = max(worst, rep.max_rel_error)
    return worst


def run_suite(profile: str = "quick", seed: int = 0, tolerance: float = 1e-9) -> list[Check]:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    n = PROFILES[profile]
    rng = np.random.default_rng(seed)
    checks: list[Check] = []
    for c in CURVATURES:
        for name, val in geometry_identities(c, n, rng).items():
            checks.append(Check(f"geometry.{name}[c={c}]", val, 0.0 if "violations" in name else tolerance,
                                val == 0.0 if "violations" in name else val <= tolerance))
        for name, val in normalization_identities(c, n, rng).items():
            checks.append(Check(f"normalization.{name}[c={c}]", val, 0.0 if "violations" in name else tolerance,
                                val == 0.0 if "violations" in name else val <= tolerance))
        for depth in (1, 2, 3, 5):
            val = cascade_deviation(c, depth, 100, rng)
            checks.append(Check(f"cascade_collapse[c={c},n={depth}]", val, tolerance, val <= tolerance))
        val = cascade_deviation(c, 3, 100, rng, nonlinear=True)
        checks.append(Check(f"cascade_collapse_nonlinear[c={c},n=3]", val, tolerance, val <= tolerance))
        one = verify_omega_product([rng.standard_normal((5, 5))], random_tangent(rng, 100, 5, c, 2.0), c)
        checks.append(Check(f"omega_product_single_layer[c={c}]", one.max_gap, tolerance, one.max_gap <= tolerance))
        two = verify_omega_product([rng.standard_normal((5, 5)) / math.sqrt(5) for _ in range(2)],
                              random_tangent(rng, 100, 5, c, 2.0), c)
        checks.append(Check(f"omega_product_gap[c={c},n=2]", two.max_gap, math.inf, True, hard=False))
    for arc in MIDPOINT_ARCS:
        ok, errors = midpoint_monotone(arc)
        checks.append(Check(f"midpoint_monotone[arc={arc:.6f}]", errors[0], 0.0, ok))
    g = apply_norm_gradcheck(rng)
    checks.append(Check("apply_norm_gradient", g, 1e-5, g <= 1e-5))
    return checks


def suite_report(profile: str = "quick", seed: int = 0) -> dict:
    t0 = time.perf_counter()
    checks = run_suite(profile, seed)
    failed = [c.name for c in checks if c.hard and not c.passed]
    return {"profile": profile, "passed": not failed, "failed": failed,
            "checks": [c.as_dict() for c in checks], "seconds": time.perf_counter() - t0}
