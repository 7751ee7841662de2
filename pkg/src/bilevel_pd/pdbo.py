"""Primal-dual bilevel optimizer (PDBO).

Each outer iteration runs a few projected gradient steps on the smoothed
inner problem, takes an extrapolated projected ascent step on the dual
variable of the relaxed value-function constraint, then a projected descent
step on the Lagrangian in ``z = (x, y)``. The output is a weighted average
of the primal iterates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CallCounter, ProblemSpec, SmoothingParams, VectorPair, counting
from .inner_solver import (constraint_estimate,
                           constraint_grad_estimate, inner_pgd)


class SolverError(RuntimeError):
    """A callback failed during a solver run; ``iteration`` locates it."""

    def __init__(self, msg, iteration=None, k=None):
        super().__init__(msg)
        self.iteration = iteration
        self.k = k


@dataclass(frozen=True)
class Schedule:
    """Per-iteration ``(gamma_t, eta_t, tau_t, theta_t)``.

    ``Schedule.theory`` follows the strongly convex analysis; its ``t0``
    is ``2 (rho_f_eff + B rho_h_eff) / mu``. ``Schedule.constant`` takes
    the primal and dual stepsizes ``1/eta`` and ``1/tau`` directly and
    weights all iterates equally.
    """

    mode: str
    mu: float = 0.0
    rho_f_eff: float = 0.0
    rho_h_eff: float = 0.0
    l_g: float = 0.0
    B: float = 0.0
    primal_step: float = 0.0
    dual_step: float = 0.0
    theta: float = 0.0

    @classmethod
    def theory(cls, mu, rho_f_eff, rho_h_eff, l_g, B) -> "Schedule":
        if not mu > 0:
            raise ValueError("theory schedule needs mu > 0 (strongly convex objective)")
        if not l_g > 0:
            raise ValueError("theory schedule needs l_g > 0")
        return cls("theory", mu=mu, rho_f_eff=rho_f_eff, rho_h_eff=rho_h_eff,
                   l_g=l_g, B=B)

    @classmethod
    def constant(cls, primal_step: float, dual_step: float, theta: float = 0.0) -> "Schedule":
        if not (primal_step > 0 and dual_step > 0):
            raise ValueError("stepsizes must be positive")
        if not 0.0 <= theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        return cls("constant", primal_step=primal_step, dual_step=dual_step, theta=theta)

    @property
    def t0(self) -> float:
        if self.mode != "theory":
            return 0.0
        return 2.0 * (self.rho_f_eff + self.B * self.rho_h_eff) / self.mu

    def gamma(self, t: int) -> float:
        return t + self.t0 + 1.0 if self.mode == "theory" else 1.0

    def eta(self, t: int) -> float:
        if self.mode == "theory":
            return self.mu * (t + self.t0 + 1.0) / 2.0
        return 1.0 / self.primal_step

    def tau(self, t: int) -> float:
        if self.mode == "theory":
            return 4.0 * self.l_g ** 2 / (self.mu * max(t, 1))
        return 1.0 / self.dual_step

    def theta_at(self, t: int) -> float:
        if self.mode == "theory":
            return (t + self.t0) / (t + self.t0 + 1.0)
        return self.theta

    def at(self, t: int) -> tuple[float, float, float, float]:
        return self.gamma(t), self.eta(t), self.tau(t), self.theta_at(t)


def default_dual_bound(problem: ProblemSpec, params: SmoothingParams) -> float:
    """``D_f / delta + 1``."""
    return problem.constants.d_f / params.delta + 1.0


def theory_schedule(problem: ProblemSpec, params: SmoothingParams,
                    B: Optional[float] = None) -> Schedule:
    c = problem.constants
    B = default_dual_bound(problem, params) if B is None else B
    return Schedule.theory(c.mu, c.rho_f, c.rho_h(params.alpha), c.l_g, B)


@dataclass(frozen=True)
class PdboConfig:
    smoothing: SmoothingParams
    schedule: Schedule
    dual_bound_B: float
    n_inner: int
    t_max: int
    z_init: VectorPair
    lambda_init: float = 0.0
    inner_warm_start: bool = True
    record_every: int = 1

    def __post_init__(self):
        self.smoothing.require_positive()
        if not self.dual_bound_B > 0:
            raise ValueError("dual_bound_B must be positive")
        if self.n_inner < 1 or self.t_max < 0 or self.record_every < 1:
            raise ValueError("n_inner >= 1, t_max >= 0 and record_every >= 1 required")
        if not 0.0 <= self.lambda_init <= self.dual_bound_B:
            raise ValueError("lambda_init must lie in [0, B]")


@dataclass(frozen=True)
class IterationRecord:
    t: int
    f_value: float
    h_hat: float
    lam: float
    step_norm: float
    grad_calls_cum: int
    wall_time_s: float
    z: VectorPair


@dataclass
class PdboResult:
    z_bar: VectorPair
    z_last: VectorPair
    lambda_last: float
    trajectory: list
    grad_calls: dict
    dual_bound_B: float
    lambda_max: float = 0.0
    y_hat_last: Optional[np.ndarray] = None


def dual_step(lambda_t: float, h_hat_t: float, h_hat_prev: float, tau_t: float,
              theta_t: float, B: float) -> float:
    """Extrapolated projected ascent on ``lambda`` over ``[0, B]``."""
    vals = (lambda_t, h_hat_t, h_hat_prev, tau_t, theta_t, B)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite input to dual_step: {vals}")
    if not (tau_t > 0 and B > 0):
        raise ValueError("dual_step needs tau_t > 0 and B > 0")
    drive = (1.0 + theta_t) * h_hat_t - theta_t * h_hat_prev
    return min(max(lambda_t + drive / tau_t, 0.0), B)


def primal_step(problem: ProblemSpec, z_t: VectorPair, lambda_next: float,
                grad_h_hat: VectorPair, eta_t: float) -> VectorPair:
    """Projected gradient step on ``f + lambda * h`` with stepsize ``1/eta_t``."""
    if not eta_t > 0:
        raise ValueError("eta_t must be positive")
    gf = problem.grad_f(z_t)
    d = gf + lambda_next * grad_h_hat
    if not (np.all(np.isfinite(d.x)) and np.all(np.isfinite(d.y))):
        raise ValueError(f"non-finite Lagrangian gradient at z={z_t.concat()}")
    return problem.project_z(z_t - (1.0 / eta_t) * d)


def run_pdbo(problem: ProblemSpec, config: PdboConfig,
             counter: Optional[CallCounter] = None) -> PdboResult:
    """Run PDBO for ``config.t_max`` iterations.

    ``counter`` (optional) is shared with the caller so that nested runs
    can accumulate oracle calls.
    """
    prob, counter = counting(problem, counter)
    params = config.smoothing
    sched = config.schedule
    B = config.dual_bound_B
    N = config.n_inner

    z = problem.project_z(config.z_init)
    lam = float(config.lambda_init)
    lam_max = lam
    y_hat = None
    h_prev = None
    acc = VectorPair(np.zeros_like(z.x), np.zeros_like(z.y))
    Gamma = 0.0
    traj = []
    start = time.perf_counter()

    for t in range(config.t_max):
        gamma, eta, tau, theta = sched.at(t)
        try:
            inner = inner_pgd(prob, params, z.x, N,
                              y_hat if config.inner_warm_start else None)
            h = constraint_estimate(prob, params, z, inner)
            if h_prev is None:
                h_prev = h
            lam_next = dual_step(lam, h, h_prev, tau, theta, B)
            gh = constraint_grad_estimate(prob, params, z, inner)
            z_next = primal_step(prob, z, lam_next, gh, eta)
        except Exception as exc:
            raise SolverError(f"PDBO iteration {t}: {exc}", iteration=t) from exc
        if not 0.0 <= lam_next <= B:
            raise SolverError(f"dual variable left [0, B] at iteration {t}", iteration=t)
        lam_max = max(lam_max, lam_next)
        acc = acc + gamma * z_next
        Gamma += gamma
        if t % config.record_every == 0 or t == config.t_max - 1:
            traj.append(IterationRecord(
                t=t, f_value=prob.f(z_next), h_hat=h, lam=lam_next,
                step_norm=(z_next - z).norm(), grad_calls_cum=counter.total_grad,
                wall_time_s=time.perf_counter() - start, z=z_next))
        y_hat = inner.y_hat
        h_prev = h
        z, lam = z_next, lam_next

    z_bar = acc * (1.0 / Gamma) if Gamma > 0 else z
    # the average of points in a convex set is in the set; clip rounding only
    z_bar = problem.project_z(z_bar)
    return PdboResult(z_bar=z_bar, z_last=z, lambda_last=lam, trajectory=traj,
                      grad_calls=counter.as_dict(), dual_bound_B=B,
                      lambda_max=lam_max, y_hat_last=y_hat)


def toy_experiment_config(z_init: VectorPair, t_max: int = 1000, n_inner: int = 5,
                     smoothing: Optional[SmoothingParams] = None,
                     dual_bound_B: float = 1e6, lambda_init: float = 2.0,
                     **kw) -> PdboConfig:
    """Constant-stepsize setup of the toy experiments: 1/tau = 0.1, 1/eta = 0.2, theta = 0."""
    return PdboConfig(
        smoothing=smoothing or SmoothingParams(),
        schedule=Schedule.constant(primal_step=0.2, dual_step=0.1, theta=0.0),
        dual_bound_B=dual_bound_B, n_inner=n_inner, t_max=t_max,
        z_init=z_init, lambda_init=lambda_init, **kw)
