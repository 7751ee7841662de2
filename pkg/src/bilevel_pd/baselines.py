"""Hypergradient baselines: ITD-R, AID-FP and BigSAM+ITD.

All three assume (implicitly) a single inner minimizer and use explicit
Hessian-vector product callbacks; no automatic differentiation is involved.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import CallCounter, ProblemSpec, VectorPair, counting
from .pdbo import IterationRecord, SolverError


class BaselineMethod(str, enum.Enum):
    ITD_R = "itd-r"
    AID_FP = "aid-fp"
    BIGSAM_ITD = "bigsam-itd"


@dataclass(frozen=True)
class BaselineConfig:
    inner_steps: int
    inner_stepsize: float
    outer_stepsize: float
    outer_steps: int
    z_init: VectorPair
    fp_iterations: int = 5
    averaging: float = 0.5

    def __post_init__(self):
        if self.inner_steps < 0 or self.outer_steps < 0 or self.fp_iterations < 1:
            raise ValueError("step counts must be nonnegative (fp_iterations >= 1)")
        if not (self.inner_stepsize > 0 and self.outer_stepsize > 0):
            raise ValueError("stepsizes must be positive")
        if not 0.0 < self.averaging < 1.0:
            raise ValueError("averaging must lie in (0, 1)")


@dataclass
class RunResult:
    z_last: VectorPair
    trajectory: list
    grad_calls: dict
    hypergrad_norm: float = float("nan")


def _require_hvps(problem: ProblemSpec, outer: bool = False):
    needed = [problem.hvp_g_yy, problem.hvp_g_xy]
    if outer:
        needed += [problem.hvp_f_yy, problem.hvp_f_xy]
    if any(fn is None for fn in needed):
        raise ValueError("baseline requires second-order callbacks")


def _clip_mask(problem: ProblemSpec, raw: np.ndarray, projected: np.ndarray) -> np.ndarray:
    # coordinates moved by the projection get zero adjoint
    return (projected == raw).astype(float)


def _unroll(problem, x, y0, K, step_fn):
    ys, masks = [np.asarray(y0, dtype=float)], []
    y = ys[0]
    for _ in range(K):
        raw = step_fn(x, y)
        y = problem.set_y.project(raw)
        masks.append(_clip_mask(problem, raw, y))
        ys.append(y)
    return ys, masks


def hypergrad_itd_reverse(problem: ProblemSpec, x, y0, K_in: int, beta: float
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode hypergradient through ``K_in`` projected inner GD steps.

    Returns ``(grad_x, y_K)``.
    """
    _require_hvps(problem)
    x = np.asarray(x, dtype=float)

    def step(x, y):
        return y - beta * np.asarray(problem.g_grad(x, y)[1], dtype=float)

    ys, masks = _unroll(problem, x, y0, K_in, step)
    fx, fy = problem.f_grad(x, ys[-1])
    p = np.array(fx, dtype=float)
    a = np.array(fy, dtype=float)
    for k in range(K_in - 1, -1, -1):
        a = a * masks[k]
        p = p - beta * np.asarray(problem.hvp_g_xy(x, ys[k], a), dtype=float)
        a = a - beta * np.asarray(problem.hvp_g_yy(x, ys[k], a), dtype=float)
    return p, ys[-1]


def aid_fp_adjoint(problem: ProblemSpec, x, y_hat, M: int, beta: float,
                   fy=None) -> np.ndarray:
    """Fixed-point iterations for ``H_yy v = grad_y f``."""
    if fy is None:
        fy = problem.f_grad(x, y_hat)[1]
    fy = np.asarray(fy, dtype=float)
    v = np.zeros_like(fy)
    for _ in range(M):
        v = v - beta * (np.asarray(problem.hvp_g_yy(x, y_hat, v), dtype=float) - fy)
    return v


def hypergrad_aid_fp(problem: ProblemSpec, x, y_hat, M: int, beta: float) -> np.ndarray:
    _require_hvps(problem)
    x = np.asarray(x, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    fx, fy = problem.f_grad(x, y_hat)
    v = aid_fp_adjoint(problem, x, y_hat, M, beta, fy)
    return np.asarray(fx, dtype=float) - np.asarray(problem.hvp_g_xy(x, y_hat, v), dtype=float)


def hypergrad_bigsam_itd(problem: ProblemSpec, x, y0, K_in: int, beta: float,
                         averaging: float) -> tuple[np.ndarray, np.ndarray]:
    """ITD hypergradient through the averaged map
    ``y <- avg (y - beta grad_y g) + (1 - avg) (y - beta grad_y f)``.
    """
    _require_hvps(problem, outer=True)
    x = np.asarray(x, dtype=float)
    w = averaging

    def step(x, y):
        gy = np.asarray(problem.g_grad(x, y)[1], dtype=float)
        fy = np.asarray(problem.f_grad(x, y)[1], dtype=float)
        return y - beta * (w * gy + (1.0 - w) * fy)

    ys, masks = _unroll(problem, x, y0, K_in, step)
    fx, fy = problem.f_grad(x, ys[-1])
    p = np.array(fx, dtype=float)
    a = np.array(fy, dtype=float)
    for k in range(K_in - 1, -1, -1):
        a = a * masks[k]
        yk = ys[k]
        p = p - beta * (w * np.asarray(problem.hvp_g_xy(x, yk, a), dtype=float)
                        + (1.0 - w) * np.asarray(problem.hvp_f_xy(x, yk, a), dtype=float))
        a = a - beta * (w * np.asarray(problem.hvp_g_yy(x, yk, a), dtype=float)
                        + (1.0 - w) * np.asarray(problem.hvp_f_yy(x, yk, a), dtype=float))
    return p, ys[-1]


def _inner_gd(problem, x, y, K, beta):
    for _ in range(K):
        y = problem.set_y.project(y - beta * np.asarray(problem.g_grad(x, y)[1], dtype=float))
    return y


def run_baseline(problem: ProblemSpec, method, config: BaselineConfig,
                 counter: Optional[CallCounter] = None, record_every: int = 1) -> RunResult:
    """Projected hypergradient descent on ``x`` with a warm-started inner variable."""
    method = BaselineMethod(method)
    _require_hvps(problem, outer=method is BaselineMethod.BIGSAM_ITD)
    prob, counter = counting(problem, counter)
    z = problem.project_z(config.z_init)
    x, y = z.x, z.y
    K, beta = config.inner_steps, config.inner_stepsize
    traj = []
    gnorm = float("nan")
    start = time.perf_counter()
    for s in range(config.outer_steps):
        try:
            if method is BaselineMethod.ITD_R:
                grad, y = hypergrad_itd_reverse(prob, x, y, K, beta)
            elif method is BaselineMethod.AID_FP:
                y = _inner_gd(prob, x, y, K, beta)
                grad = hypergrad_aid_fp(prob, x, y, config.fp_iterations, beta)
            else:
                grad, y = hypergrad_bigsam_itd(prob, x, y, K, beta, config.averaging)
        except Exception as exc:
            raise SolverError(f"{method.value} outer step {s}: {exc}", iteration=s) from exc
        if not np.all(np.isfinite(grad)):
            raise SolverError(f"{method.value}: non-finite hypergradient at step {s}", iteration=s)
        gnorm = float(np.linalg.norm(grad))
        x_new = problem.set_x.project(x - config.outer_stepsize * grad)
        z_new = VectorPair(x_new, y)
        if s % record_every == 0 or s == config.outer_steps - 1:
            traj.append(IterationRecord(
                t=s, f_value=prob.f(z_new), h_hat=float("nan"), lam=float("nan"),
                step_norm=float(np.linalg.norm(x_new - x)),
                grad_calls_cum=counter.total_grad,
                wall_time_s=time.perf_counter() - start, z=z_new))
        x = x_new
    return RunResult(z_last=VectorPair(x, y), trajectory=traj,
                     grad_calls=counter.as_dict(), hypergrad_norm=gnorm)


def toy_baseline_config(z_init: VectorPair, outer_steps: int = 1000,
                              inner_steps: int = 5, **kw) -> BaselineConfig:
    """Inner learning rate 0.5, outer learning rate 0.2."""
    return BaselineConfig(inner_steps=inner_steps, inner_stepsize=0.5,
                          outer_stepsize=0.2, outer_steps=outer_steps,
                          z_init=z_init, **kw)
