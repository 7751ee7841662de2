from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel_pd.checks import fd_grad
from bilevel_pd.core import SmoothingParams, VectorPair
from bilevel_pd.inner_solver import InnerSolveResult, constraint_estimate
from bilevel_pd.pdbo import PdboConfig, Schedule, SolverError, toy_experiment_config
from bilevel_pd.problems import make_toy1, toy1_smoothed_argmin, toy1_smoothed_value
from bilevel_pd.proximal import (ProximalConfig, build_subproblem, draw_k_hat,
                                 proximal_dual_bound, run_proximal_pdbo,
                                 subproblem_schedule)

TOY1 = make_toy1()
P01 = SmoothingParams(0.01, 0.01)
START = VectorPair([2.0], [0.5, 0.5])
coord = st.floats(-10, 10, allow_nan=False)


def h_closed(problem, params, z):
    inner = InnerSolveResult(toy1_smoothed_argmin(z.x, params.alpha),
                             toy1_smoothed_value(z.x, params.alpha), 0, z.x)
    return constraint_estimate(problem, params, z, inner)


@given(x=coord, y1=coord, y2=coord)
@settings(max_examples=40)
def test_regularisers_vanish_at_center(x, y1, y2):
    z = VectorPair([x], [y1, y2])
    sub = build_subproblem(TOY1, P01, z)
    assert sub.f(z) == TOY1.f(z)
    assert sub.grad_f(z) == TOY1.grad_f(z)
    assert h_closed(sub, P01, z) == h_closed(TOY1, P01, z)


def test_toy1_subproblem_at_origin():
    sub = build_subproblem(TOY1, P01, VectorPair([0.0], [0.0, 0.0]))
    z = VectorPair([1.0], [1.0, 1.0])
    rho_f = TOY1.constants.rho_f
    assert sub.f(z) == pytest.approx(TOY1.f(z) + rho_f * 3)
    gx, gy = sub.f_grad(z.x, z.y)
    fx, fy = fd_grad(sub.f_value, z.x, z.y)
    np.testing.assert_allclose(np.concatenate([gx, gy]), np.concatenate([fx, fy]), rtol=1e-6, atol=1e-8)
    assert sub.constants.mu == rho_f
    assert sub.constraint_prox.weight == pytest.approx(
        (2 * 0.01 * TOY1.constants.rho_g + TOY1.constants.rho_g ** 2) / 0.02)


def test_prox_weight_example():
    sub = build_subproblem(replace(TOY1, constants=replace(TOY1.constants, rho_g=1.618)),
                           P01, START)
    assert sub.constraint_prox.weight == pytest.approx(132.5, abs=0.05)


def test_build_subproblem_errors():
    with pytest.raises(ValueError):
        build_subproblem(TOY1, SmoothingParams(0.0, 0.01), START)
    with pytest.raises(ValueError):
        build_subproblem(TOY1, P01, VectorPair([20.0], [0.0, 0.0]))


@given(a=st.tuples(coord, coord, coord), b=st.tuples(coord, coord, coord),
       c=st.tuples(coord, coord, coord), w=st.floats(0, 1))
@settings(max_examples=80)
def test_subproblem_constraint_is_convex(a, b, c, w):
    sub = build_subproblem(TOY1, P01, VectorPair.from_flat(c, 1))
    za, zb = VectorPair.from_flat(a, 1), VectorPair.from_flat(b, 1)
    zw = w * za + (1 - w) * zb
    lhs = h_closed(sub, P01, zw)
    rhs = w * h_closed(sub, P01, za) + (1 - w) * h_closed(sub, P01, zb)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))


def test_unregularised_constraint_is_not_convex():
    # shows the prox term is needed: along x = y1 the toy1 constraint bends down
    za, zb = VectorPair([-2.0], [-2.0, 0.0]), VectorPair([2.0], [2.0, 0.0])
    mid = 0.5 * (za + zb)
    assert h_closed(TOY1, P01, mid) > 0.5 * (h_closed(TOY1, P01, za) + h_closed(TOY1, P01, zb))


def test_subproblem_schedule_and_bound():
    c = TOY1.constants
    B = proximal_dual_bound(TOY1, P01)
    assert B == pytest.approx((c.d_f + c.rho_f * c.d_z ** 2) / 0.01 + 1)
    s = subproblem_schedule(TOY1, P01, B)
    assert s.t0 == pytest.approx((6 * c.rho_f + 4 * B * c.rho_h(0.01)) / c.rho_f)


# -- k-hat -------------------------------------------------------------------------

def test_k_hat_is_uniform_over_seeds():
    counts = Counter(draw_k_hat(seed, 4) for seed in range(10_000))
    assert set(counts) == {1, 2, 3, 4}
    for k in range(1, 5):
        assert abs(counts[k] / 10_000 - 0.25) <= 0.02


def test_k_hat_is_reproducible():
    assert [draw_k_hat(7, 20) for _ in range(3)] == [draw_k_hat(7, 20)] * 3


# -- runs -------------------------------------------------------------------------

def constant_config(k_max, seed=0, t_sub=30, **kw):
    template = toy_experiment_config(START, t_max=t_sub, smoothing=SmoothingParams(1e-2, 1e-2))
    return ProximalConfig(template, k_max, seed, START, **kw)


def test_single_round_returns_its_average():
    a = run_proximal_pdbo(TOY1, constant_config(1, seed=0))
    b = run_proximal_pdbo(TOY1, constant_config(1, seed=99))
    assert a.k_hat == b.k_hat == 1
    assert a.z_out == a.per_subproblem[0].z_bar == b.z_out


def test_centers_chain_and_output_is_a_center():
    res = run_proximal_pdbo(TOY1, constant_config(5, seed=3))
    assert res.centers[0] == START
    for k, summary in enumerate(res.per_subproblem, start=1):
        assert res.centers[k] == summary.z_bar
        assert summary.k == k
    assert res.z_out == res.centers[res.k_hat]
    assert res.lambda_out == res.per_subproblem[res.k_hat - 1].lambda_last


def test_same_seed_same_output():
    a = run_proximal_pdbo(TOY1, constant_config(4, seed=11))
    b = run_proximal_pdbo(TOY1, constant_config(4, seed=11))
    assert a.k_hat == b.k_hat and a.z_out == b.z_out
    assert a.grad_calls == b.grad_calls


def test_dual_bound_holds_in_every_subproblem():
    res = run_proximal_pdbo(TOY1, constant_config(4))
    for s in res.per_subproblem:
        assert s.lambda_max <= s.dual_bound_B
        assert all(0 <= r.lam <= s.dual_bound_B for r in s.trajectory)


def test_theory_template_is_rebuilt_per_problem():
    template = PdboConfig(P01, Schedule.constant(0.1, 0.1), 1.0, 3, 5, START)
    template = replace(template, schedule=Schedule.theory(1, 1, 1, 1, 1))
    res = run_proximal_pdbo(TOY1, ProximalConfig(template, 2, 0, START))
    assert res.per_subproblem[0].dual_bound_B == proximal_dual_bound(TOY1, P01)
    assert res.grad_calls["f_grad"] == 2 * 5


def test_config_validation():
    with pytest.raises(ValueError):
        constant_config(0)
    with pytest.raises(ValueError):
        constant_config(2, dual_bound_B=-1.0)


def test_subproblem_failure_names_round():
    bad = replace(TOY1, g_grad=lambda x, y: (x * np.nan, y * np.nan))
    with pytest.raises(SolverError) as err:
        run_proximal_pdbo(bad, constant_config(3))
    assert err.value.k == 1 and err.value.iteration == 0
