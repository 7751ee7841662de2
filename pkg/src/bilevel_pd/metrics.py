"""Solution quality measures: KKT residuals, gaps to known optima, rate slopes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ProblemSpec, SmoothingParams, VectorPair, normal_cone_distance
from .inner_solver import constraint_estimate, constraint_grad_estimate, exact_inner

UNSMOOTHED_MAX_ITER = 100_000


@dataclass(frozen=True)
class KktResidual:
    feasibility: float
    complementarity: float
    stationarity: float
    proximity: float = 0.0

    def max(self) -> float:
        return max(self.feasibility, self.complementarity, self.stationarity, self.proximity)


def kkt_residual(problem: ProblemSpec, params: SmoothingParams, z: VectorPair,
                 lam: float, inner_tolerance: float = 1e-8,
                 candidate: Optional[VectorPair] = None) -> KktResidual:
    """KKT residual of ``(z, lam)`` for the relaxed problem.

    The stationarity term is the distance of ``grad f + lam * grad h`` to
    the negative normal cone of ``Z`` at ``z``. When ``candidate`` is given,
    ``proximity`` is ``|z - candidate|^2``.
    """
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative")
    if not inner_tolerance > 0:
        raise ValueError("inner_tolerance must be positive")
    params.require_positive()
    inner = exact_inner(problem, params, z.x, inner_tolerance)
    h = constraint_estimate(problem, params, z, inner)
    gh = constraint_grad_estimate(problem, params, z, inner)
    lag = problem.grad_f(z) + lam * gh
    stat = normal_cone_distance(problem.set_z, z.concat(), lag.concat())
    prox = 0.0 if candidate is None else (z - candidate).norm() ** 2
    return KktResidual(feasibility=max(h, 0.0), complementarity=abs(lam * h),
                       stationarity=stat, proximity=prox)


def unsmoothed_inner_value(problem: ProblemSpec, x, tolerance: float = 1e-10,
                           y_init=None) -> float:
    """``min_y g(x, y)``: the problem's own oracle if it has one, else
    projected gradient descent with stepsize ``1/rho_g``."""
    x = np.asarray(x, dtype=float)
    if problem.inner_value_oracle is not None:
        return float(problem.inner_value_oracle(x))
    step = 1.0 / problem.constants.rho_g
    y = problem.set_y.center() if y_init is None else problem.set_y.project(y_init)
    for _ in range(UNSMOOTHED_MAX_ITER):
        gy = np.asarray(problem.g_grad(x, y)[1], dtype=float)
        y_new = problem.set_y.project(y - step * gy)
        moved = float(np.linalg.norm(y_new - y))
        y = y_new
        if moved <= tolerance:
            break
    return float(problem.g_value(x, y))


@dataclass(frozen=True)
class BenchmarkRecord:
    outer_gap: float
    inner_gap: float
    dist_x: float
    dist_y: float

    def as_dict(self) -> dict:
        return {"outer_gap": self.outer_gap, "inner_gap": self.inner_gap,
                "dist_x": self.dist_x, "dist_y": self.dist_y}


def benchmark_metrics(problem: ProblemSpec, z: VectorPair,
                      reference: Optional[VectorPair] = None,
                      f_star: Optional[float] = None,
                      fields: Sequence[str] = ("outer_gap", "inner_gap", "dist_x", "dist_y"),
                      inner_y_init=None) -> BenchmarkRecord:
    """Gaps to known optima; fields not requested come back as NaN.

    ``reference`` and ``f_star`` fall back to ``problem.reference``.
    """
    ref = problem.reference or {}
    if reference is None and "x" in ref:
        reference = VectorPair(ref["x"], ref["y"])
    if f_star is None:
        f_star = ref.get("f_star")
    out = dict.fromkeys(("outer_gap", "inner_gap", "dist_x", "dist_y"), math.nan)
    for name in fields:
        if name == "outer_gap":
            if f_star is None:
                raise ValueError("outer_gap needs f_star")
            out[name] = problem.f(z) - float(f_star)
        elif name == "inner_gap":
            out[name] = problem.g(z) - unsmoothed_inner_value(problem, z.x, y_init=inner_y_init)
        elif name in ("dist_x", "dist_y"):
            if reference is None:
                raise ValueError(f"{name} needs a reference point")
            a, b = (z.x, reference.x) if name == "dist_x" else (z.y, reference.y)
            out[name] = float(np.linalg.norm(a - b))
        else:
            raise ValueError(f"unknown metric {name!r}")
    return BenchmarkRecord(**out)


def rate_slope(trajectory) -> float:
    """Least-squares slope of ``log(value)`` against ``log(t)``."""
    pts = np.asarray([(float(t), float(v)) for t, v in trajectory])
    if pts.ndim != 2 or len(pts) < 4:
        raise ValueError("rate_slope needs at least 4 points")
    if np.any(pts <= 0):
        raise ValueError("rate_slope needs positive t and values")
    logs = np.log(pts)
    slope, _ = np.polyfit(logs[:, 0], logs[:, 1], 1)
    return float(slope)
