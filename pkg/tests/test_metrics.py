import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bilevel_pd.checks import fd_grad
from bilevel_pd.core import SmoothingParams, VectorPair
from bilevel_pd.metrics import (KktResidual, benchmark_metrics, kkt_residual, rate_slope,
                                unsmoothed_inner_value)
from bilevel_pd.problems import (grid_inner_value, make_quadratic, make_toy1, make_toy2,
                                 toy1_smoothed_argmin, toy1_smoothed_value)

TOY1 = make_toy1()
TOY2 = make_toy2()
P01 = SmoothingParams(0.01, 0.01)


def toy1_lagrangian(lam):
    def value(x, y):
        h = TOY1.g_value(x, y) - toy1_smoothed_value(x, 0.01) - 0.01
        return TOY1.f_value(x, y) + lam * h
    return value


def test_kkt_at_one_one_one():
    z = VectorPair([1.0], [1.0, 1.0])
    r = kkt_residual(TOY1, P01, z, 1.0)
    assert r.feasibility == 0.0
    assert r.complementarity == pytest.approx(0.01495, abs=1e-5)
    gx, gy = fd_grad(toy1_lagrangian(1.0), z.x, z.y)
    assert r.stationarity == pytest.approx(np.linalg.norm(np.concatenate([gx, gy])), abs=1e-4)
    assert r.max() == max(r.complementarity, r.stationarity)


def test_kkt_interior_point_without_multiplier():
    # y at the smoothed argmin is strictly feasible
    x = np.array([0.5])
    z = VectorPair(x, toy1_smoothed_argmin(x, 0.01))
    r = kkt_residual(TOY1, P01, z, 0.0)
    assert r.feasibility == 0.0 and r.complementarity == 0.0
    assert r.stationarity == pytest.approx(TOY1.grad_f(z).norm(), rel=1e-9)


def test_kkt_candidate_and_errors():
    z = VectorPair([1.0], [1.0, 1.0])
    r = kkt_residual(TOY1, P01, z, 0.5, candidate=VectorPair([0.0], [1.0, 1.0]))
    assert r.proximity == pytest.approx(1.0)
    with pytest.raises(ValueError):
        kkt_residual(TOY1, P01, z, -1.0)
    with pytest.raises(ValueError):
        kkt_residual(TOY1, P01, z, 1.0, inner_tolerance=0.0)
    with pytest.raises(ValueError):
        kkt_residual(TOY1, SmoothingParams(0.0, 0.0), z, 1.0)


def test_kkt_residual_max():
    assert KktResidual(0.1, 0.3, 0.2).max() == 0.3
    assert KktResidual(0.1, 0.3, 0.2, proximity=0.9).max() == 0.9


@given(x=st.floats(-5, 5), lam=st.floats(0, 10))
def test_kkt_components_are_nonnegative(x, lam):
    z = VectorPair([x], [0.3, -0.2])
    r = kkt_residual(TOY1, P01, z, lam, inner_tolerance=1e-6)
    assert min(r.feasibility, r.complementarity, r.stationarity) >= 0.0


# -- benchmark metrics ---------------------------------------------------------------

def test_toy1_benchmark_at_optimum():
    rec = benchmark_metrics(TOY1, VectorPair([1.0], [1.0, 1.0]))
    assert rec.as_dict() == pytest.approx({"outer_gap": 0, "inner_gap": 0, "dist_x": 0, "dist_y": 0},
                                          abs=1e-12)


def test_toy1_inner_gap_off_the_minimiser():
    rec = benchmark_metrics(TOY1, VectorPair([1.0], [0.0, 0.0]))
    assert rec.inner_gap == pytest.approx(0.5)
    assert rec.dist_y == pytest.approx(math.sqrt(2))


def test_toy1_inner_value_matches_pgd_fallback():
    no_oracle = replace(TOY1, inner_value_oracle=None)
    for x in (-2.0, 0.3, 1.0):
        assert unsmoothed_inner_value(no_oracle, [x], tolerance=1e-12) == pytest.approx(-x * x / 2, abs=1e-8)


def test_toy2_optimum_against_grid_oracle():
    z = VectorPair([-math.pi / 4], [-math.pi / 4])
    rec = benchmark_metrics(TOY2, z)
    assert TOY2.f(z) == pytest.approx(math.pi ** 2 / 8)
    assert rec.outer_gap == pytest.approx(0.0, abs=1e-12)
    assert rec.inner_gap == pytest.approx(0.0, abs=1e-9)
    g_min, _ = grid_inner_value(TOY2.g_value, z.x, TOY2.set_y)
    assert TOY2.g(z) - g_min == pytest.approx(0.0, abs=1e-9)


def test_toy2_grid_search_finds_the_reference():
    # brute force over feasible pairs: for each x on a grid, its inner minimisers
    best = (math.inf, None)
    for x in np.linspace(-10, 10, 2001):
        g_min, y = grid_inner_value(TOY2.g_value, np.array([x]), TOY2.set_y, resolution=1e-2)
        val = TOY2.f_value(np.array([x]), y)
        if val < best[0]:
            best = (val, (x, float(y[0])))
    assert best[0] == pytest.approx(math.pi ** 2 / 8, abs=1e-2)
    np.testing.assert_allclose(best[1], [-math.pi / 4] * 2, atol=2e-2)


def test_fields_and_missing_reference():
    quad = make_quadratic()
    rec = benchmark_metrics(quad, VectorPair([0.0, 0.0], [0.0, 0.0]), fields=("dist_x",))
    assert math.isnan(rec.outer_gap) and math.isnan(rec.inner_gap) and rec.dist_x > 0
    bare = replace(TOY1, reference=None)
    with pytest.raises(ValueError):
        benchmark_metrics(bare, VectorPair([1.0], [1.0, 1.0]))
    with pytest.raises(ValueError):
        benchmark_metrics(TOY1, VectorPair([1.0], [1.0, 1.0]), fields=("bogus",))


def test_explicit_reference_overrides_problem_reference():
    rec = benchmark_metrics(TOY1, VectorPair([1.0], [1.0, 1.0]),
                            reference=VectorPair([0.0], [1.0, 1.0]), f_star=-1.0)
    assert rec.dist_x == 1.0 and rec.outer_gap == 1.0


# -- rate slope ------------------------------------------------------------------------

def test_rate_slope_examples():
    ts = [50, 100, 200, 400]
    assert rate_slope([(t, 1 / t ** 2) for t in ts]) == pytest.approx(-2.0, abs=1e-9)
    assert rate_slope([(t, 3.0) for t in ts]) == pytest.approx(0.0, abs=1e-12)


@given(c=st.floats(1e-3, 1e3), p=st.floats(-4, 4))
def test_rate_slope_recovers_power_law(c, p):
    ts = [10, 20, 40, 80, 160]
    assert rate_slope([(t, c * t ** p) for t in ts]) == pytest.approx(p, abs=1e-8)


def test_rate_slope_errors():
    with pytest.raises(ValueError):
        rate_slope([(1, 1.0), (2, 0.0), (3, 1.0), (4, 1.0)])
    with pytest.raises(ValueError):
        rate_slope([(1, 1.0), (2, 1.0)])
