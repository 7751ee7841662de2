"""Proximal-PDBO for problems whose outer objective is only weakly convex.

Each round adds ``rho_f |z - c|^2`` to the outer objective and
``rho |x - c_x|^2`` to the relaxed constraint, which makes both strongly
convex / convex, solves the result with PDBO and moves the center to the
PDBO output. The returned point is one of the centers, picked uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import (CallCounter, ConstraintProx, ProblemSpec, SmoothingParams,
                   VectorPair, prox_weight)
from .pdbo import PdboConfig, PdboResult, Schedule, SolverError, run_pdbo


def proximal_dual_bound(problem: ProblemSpec, params: SmoothingParams) -> float:
    """``(D_f + rho_f D_Z^2) / delta + 1``, valid for every subproblem."""
    c = problem.constants
    return (c.d_f + c.rho_f * c.d_z ** 2) / params.delta + 1.0


def build_subproblem(problem: ProblemSpec, params: SmoothingParams,
                     center: VectorPair) -> ProblemSpec:
    """Strongly convexified copy of ``problem`` centered at ``center``.

    The inner function is left untouched; the constraint term is passed to
    the estimators through ``constraint_prox``.
    """
    params.require_positive()
    if not problem.set_z.contains(center.concat(), 1e-9):
        raise ValueError("proximal center must lie in Z")
    c = problem.constants
    rho_f = c.rho_f
    cx, cy = center.x.copy(), center.y.copy()
    weight = prox_weight(params.alpha, c.rho_g)
    f_value, f_grad = problem.f_value, problem.f_grad

    def fk_value(x, y):
        dx, dy = x - cx, y - cy
        return float(f_value(x, y)) + rho_f * (float(dx @ dx) + float(dy @ dy))

    def fk_grad(x, y):
        gx, gy = f_grad(x, y)
        return (np.asarray(gx, dtype=float) + 2.0 * rho_f * (x - cx),
                np.asarray(gy, dtype=float) + 2.0 * rho_f * (y - cy))

    hvp_f_yy = problem.hvp_f_yy
    if hvp_f_yy is not None:
        base_yy = hvp_f_yy

        def hvp_f_yy(x, y, v):
            return np.asarray(base_yy(x, y, v), dtype=float) + 2.0 * rho_f * np.asarray(v)

    return replace(
        problem,
        f_value=fk_value, f_grad=fk_grad, hvp_f_yy=hvp_f_yy,
        constants=replace(c, mu=rho_f),
        name=f"{problem.name}[prox]",
        reference=None,
        constraint_prox=ConstraintProx(cx.copy(), weight),
        metadata={**problem.metadata, "prox_center": center},
    )


def subproblem_schedule(problem: ProblemSpec, params: SmoothingParams,
                        B: float) -> Schedule:
    """Theory schedule of a subproblem of ``problem`` (the unmodified one).

    Uses ``mu = rho_f``, objective constant ``3 rho_f`` and constraint
    constant ``2 rho_h``, so that ``t0 = (6 rho_f + 4 B rho_h) / rho_f``.
    """
    c = problem.constants
    return Schedule.theory(mu=c.rho_f, rho_f_eff=3.0 * c.rho_f,
                           rho_h_eff=2.0 * c.rho_h(params.alpha), l_g=c.l_g, B=B)


@dataclass(frozen=True)
class ProximalConfig:
    """``pdbo`` is a template: its ``z_init``, ``lambda_init`` and
    ``dual_bound_B`` are replaced per subproblem, and a Theory-mode schedule
    is rebuilt from the subproblem constants. ``dual_bound_B=None`` selects
    :func:`proximal_dual_bound`.
    """

    pdbo: PdboConfig
    k_max: int
    rng_seed: int
    z_tilde_init: VectorPair
    dual_bound_B: Optional[float] = None

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.dual_bound_B is not None and not self.dual_bound_B > 0:
            raise ValueError("dual_bound_B must be positive")


@dataclass(frozen=True)
class SubproblemSummary:
    k: int
    z_bar: VectorPair
    z_last: VectorPair
    lambda_last: float
    lambda_max: float
    dual_bound_B: float
    trajectory: list


@dataclass
class ProximalResult:
    z_out: VectorPair
    k_hat: int
    centers: list
    per_subproblem: list
    grad_calls: dict

    @property
    def lambda_out(self) -> float:
        """Final dual variable of the subproblem whose output was selected."""
        return self.per_subproblem[self.k_hat - 1].lambda_last


def draw_k_hat(rng_seed: int, k_max: int) -> int:
    rng = np.random.Generator(np.random.Philox(key=rng_seed))
    return int(rng.integers(1, k_max + 1))


def run_proximal_pdbo(problem: ProblemSpec, config: ProximalConfig,
                      counter: Optional[CallCounter] = None) -> ProximalResult:
    params = config.pdbo.smoothing
    if counter is None:
        counter = CallCounter()
    B = (proximal_dual_bound(problem, params) if config.dual_bound_B is None
         else config.dual_bound_B)
    template = config.pdbo
    schedule = template.schedule
    if schedule.mode == "theory":
        schedule = subproblem_schedule(problem, params, B)

    center = problem.project_z(config.z_tilde_init)
    centers = [center]
    summaries = []
    for k in range(1, config.k_max + 1):
        sub = build_subproblem(problem, params, center)
        cfg = replace(template, schedule=schedule, dual_bound_B=B,
                      z_init=center, lambda_init=0.0)
        try:
            res: PdboResult = run_pdbo(sub, cfg, counter)
        except SolverError as exc:
            raise SolverError(f"subproblem {k}: {exc}", iteration=exc.iteration, k=k) from exc
        summaries.append(SubproblemSummary(
            k=k, z_bar=res.z_bar, z_last=res.z_last, lambda_last=res.lambda_last,
            lambda_max=res.lambda_max, dual_bound_B=B, trajectory=res.trajectory))
        center = res.z_bar
        centers.append(center)

    k_hat = draw_k_hat(config.rng_seed, config.k_max)
    return ProximalResult(z_out=centers[k_hat], k_hat=k_hat, centers=centers,
                          per_subproblem=summaries, grad_calls=counter.as_dict())
