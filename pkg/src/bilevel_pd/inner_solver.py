"""Estimates of the smoothed inner minimizer and of the relaxed constraint."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ProblemSpec, SmoothingParams, VectorPair

EXACT_MAX_ITER = 10 ** 6


class InnerSolveError(RuntimeError):
    def __init__(self, msg, x=None, y=None):
        super().__init__(msg)
        self.x = x
        self.y = y


@dataclass(frozen=True)
class InnerSolveResult:
    y_hat: np.ndarray
    g_tilde_value: float
    iterations: int
    x: Optional[np.ndarray] = None


def inner_stepsize(problem: ProblemSpec, params: SmoothingParams) -> float:
    rho_g = problem.constants.rho_g
    if not rho_g > 0:
        raise ValueError("inner PGD needs rho_g > 0")
    return 2.0 / (rho_g + 2.0 * params.alpha)


def contraction_factor(problem: ProblemSpec, params: SmoothingParams) -> float:
    """Per-step contraction of the inner PGD error towards the smoothed argmin."""
    return 1.0 - params.alpha / (problem.constants.rho_g + 2.0 * params.alpha)


def _pgd_step(problem, params, x, y, step):
    _, gy = problem.g_grad(x, y)
    gy = np.asarray(gy, dtype=float)
    if not np.all(np.isfinite(gy)):
        raise InnerSolveError(f"non-finite inner gradient at x={x}, y={y}", x, y)
    return problem.set_y.project(y - step * (gy + params.alpha * y))


def g_tilde(problem: ProblemSpec, params: SmoothingParams, x, y) -> float:
    return float(problem.g_value(x, y)) + 0.5 * params.alpha * float(y @ y)


def inner_pgd(problem: ProblemSpec, params: SmoothingParams, x, n_steps: int,
              y_init=None) -> InnerSolveResult:
    """Run ``n_steps`` projected gradient steps on ``g(x, .) + alpha/2 |.|^2``.

    ``y_init`` defaults to the center of ``set_y`` and is projected if it
    lies outside the set.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    x = np.asarray(x, dtype=float)
    step = inner_stepsize(problem, params)
    y = problem.set_y.center() if y_init is None else problem.set_y.project(y_init)
    for _ in range(n_steps):
        y = _pgd_step(problem, params, x, y, step)
    return InnerSolveResult(y, g_tilde(problem, params, x, y), n_steps, x)


def exact_inner(problem: ProblemSpec, params: SmoothingParams, x,
                tolerance: float = 1e-10, y_init=None) -> InnerSolveResult:
    """Inner PGD run to high accuracy.

    With ``alpha > 0`` the stop rule uses the contraction bound so that the
    distance to the smoothed argmin is below ``tolerance``; with
    ``alpha = 0`` it stops on the step norm alone.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    x = np.asarray(x, dtype=float)
    step = inner_stepsize(problem, params)
    q = contraction_factor(problem, params)
    scale = q / (1.0 - q) if params.alpha > 0 else 1.0
    y = problem.set_y.center() if y_init is None else problem.set_y.project(y_init)
    for n in range(1, EXACT_MAX_ITER + 1):
        y_new = _pgd_step(problem, params, x, y, step)
        moved = float(np.linalg.norm(y_new - y))
        y = y_new
        if moved * scale <= tolerance:
            return InnerSolveResult(y, g_tilde(problem, params, x, y), n, x)
    raise InnerSolveError(f"inner solve did not reach tolerance {tolerance} "
                          f"in {EXACT_MAX_ITER} iterations", x, y)


def _prox_value(problem: ProblemSpec, x) -> float:
    cp = problem.constraint_prox
    if cp is None:
        return 0.0
    d = x - cp.center_x
    return cp.weight * float(d @ d)


def constraint_estimate(problem: ProblemSpec, params: SmoothingParams,
                        z: VectorPair, inner: InnerSolveResult) -> float:
    """``g(x, y) - g_tilde(x, y_hat) - delta`` (plus the proximal term, if any)."""
    return (float(problem.g_value(z.x, z.y)) - inner.g_tilde_value - params.delta
            + _prox_value(problem, z.x))


def constraint_grad_estimate(problem: ProblemSpec, params: SmoothingParams,
                             z: VectorPair, inner: InnerSolveResult) -> VectorPair:
    gx, gy = problem.g_grad(z.x, z.y)
    gx_hat, _ = problem.g_grad(z.x, inner.y_hat)
    gx = np.asarray(gx, dtype=float) - np.asarray(gx_hat, dtype=float)
    cp = problem.constraint_prox
    if cp is not None:
        gx = gx + 2.0 * cp.weight * (z.x - cp.center_x)
    return VectorPair(gx, gy)


def exact_constraint(problem: ProblemSpec, params: SmoothingParams, z: VectorPair,
                     tolerance: float = 1e-10, y_init=None) -> float:
    """High-accuracy value of the relaxed constraint at ``z``."""
    inner = exact_inner(problem, params, z.x, tolerance, y_init)
    return constraint_estimate(problem, params, z, inner)
