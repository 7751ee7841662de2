"""Shared domain types: joint variables, feasible sets, and the bilevel problem contract."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

FEAS_TOL = 1e-9

GradFn = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]
ValueFn = Callable[[np.ndarray, np.ndarray], float]
HvpFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _as_vec(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=float)).ravel()


@dataclass(frozen=True)
class VectorPair:
    """The joint variable ``z = (x, y)``.

    Arithmetic acts on the concatenation of the two blocks.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _as_vec(self.x).copy())
        object.__setattr__(self, "y", _as_vec(self.y).copy())
        if self.x.size < 1 or self.y.size < 1:
            raise ValueError("both blocks need dimension >= 1")

    @classmethod
    def from_flat(cls, z, p: int) -> "VectorPair":
        z = _as_vec(z)
        return cls(z[:p], z[p:])

    @property
    def dims(self) -> tuple[int, int]:
        return self.x.size, self.y.size

    def concat(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])

    def norm(self) -> float:
        return math.sqrt(float(self.x @ self.x) + float(self.y @ self.y))

    def dot(self, other: "VectorPair") -> float:
        return float(self.x @ other.x) + float(self.y @ other.y)

    def __add__(self, other: "VectorPair") -> "VectorPair":
        return VectorPair(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "VectorPair") -> "VectorPair":
        return VectorPair(self.x - other.x, self.y - other.y)

    def __mul__(self, s: float) -> "VectorPair":
        return VectorPair(s * self.x, s * self.y)

    __rmul__ = __mul__

    def __neg__(self) -> "VectorPair":
        return VectorPair(-self.x, -self.y)

    def allclose(self, other: "VectorPair", atol: float = 0.0) -> bool:
        return bool(np.allclose(self.x, other.x, rtol=0, atol=atol)
                    and np.allclose(self.y, other.y, rtol=0, atol=atol))

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorPair):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    __hash__ = None


# ---------------------------------------------------------------------------
# Feasible sets


class FeasibleSet:
    """Closed, convex, bounded set with a closed-form Euclidean projection."""

    dim: int

    def project(self, v) -> np.ndarray:
        raise NotImplementedError

    def diameter(self) -> float:
        raise NotImplementedError

    def center(self) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _cone_sq(self, z: np.ndarray, v: np.ndarray) -> float:
        raise NotImplementedError

    def _check(self, v) -> np.ndarray:
        v = _as_vec(v)
        if v.size != self.dim:
            raise ValueError(f"dimension mismatch: set has dim {self.dim}, got {v.size}")
        return v

    def contains(self, v, tol: float = FEAS_TOL) -> bool:
        v = self._check(v)
        return float(np.linalg.norm(self.project(v) - v)) <= tol


@dataclass(frozen=True, eq=False)
class Box(FeasibleSet):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = _as_vec(self.lower), _as_vec(self.upper)
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same shape")
        if np.any(lo > hi):
            raise ValueError("Box requires lower <= upper componentwise")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("Box bounds must be finite")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def uniform(cls, lo: float, hi: float, dim: int) -> "Box":
        return cls(np.full(dim, float(lo)), np.full(dim, float(hi)))

    @property
    def dim(self) -> int:
        return self.lower.size

    def project(self, v) -> np.ndarray:
        return np.clip(self._check(v), self.lower, self.upper)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def sample(self, rng):
        return rng.uniform(self.lower, self.upper)

    def _cone_sq(self, z, v):
        at_hi = z >= self.upper - FEAS_TOL
        at_lo = z <= self.lower + FEAS_TOL
        contrib = np.abs(v)
        contrib = np.where(at_hi, np.maximum(v, 0.0), contrib)
        contrib = np.where(at_lo, np.maximum(-v, 0.0), contrib)
        # degenerate coordinate (lower == upper): normal cone is the whole line
        contrib = np.where(at_hi & at_lo, 0.0, contrib)
        return float(contrib @ contrib)


@dataclass(frozen=True, eq=False)
class Ball(FeasibleSet):
    center_: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center_", _as_vec(self.center_))
        if not self.radius > 0:
            raise ValueError("Ball requires radius > 0")

    @property
    def dim(self) -> int:
        return self.center_.size

    def project(self, v) -> np.ndarray:
        v = self._check(v)
        d = v - self.center_
        n = float(np.linalg.norm(d))
        if n <= self.radius:
            return v.copy()
        return self.center_ + d * (self.radius / n)

    def diameter(self) -> float:
        return 2.0 * self.radius

    def center(self) -> np.ndarray:
        return self.center_.copy()

    def sample(self, rng):
        d = rng.standard_normal(self.dim)
        d /= np.linalg.norm(d)
        return self.center_ + d * self.radius * rng.uniform() ** (1.0 / self.dim)

    def _cone_sq(self, z, v):
        d = z - self.center_
        n = float(np.linalg.norm(d))
        if n < self.radius - FEAS_TOL:
            return float(v @ v)
        u = d / n
        r = v - min(0.0, float(v @ u)) * u
        return float(r @ r)


@dataclass(frozen=True, eq=False)
class Product(FeasibleSet):
    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("Product needs at least one member")

    @property
    def dim(self) -> int:
        return sum(m.dim for m in self.members)

    def _split(self, v):
        out, i = [], 0
        for m in self.members:
            out.append(v[i:i + m.dim])
            i += m.dim
        return out

    def project(self, v) -> np.ndarray:
        v = self._check(v)
        return np.concatenate([m.project(p) for m, p in zip(self.members, self._split(v))])

    def diameter(self) -> float:
        return math.sqrt(sum(m.diameter() ** 2 for m in self.members))

    def center(self) -> np.ndarray:
        return np.concatenate([m.center() for m in self.members])

    def sample(self, rng):
        return np.concatenate([m.sample(rng) for m in self.members])

    def _cone_sq(self, z, v):
        return sum(m._cone_sq(a, b) for m, a, b in
                   zip(self.members, self._split(z), self._split(v)))


def project(fset: FeasibleSet, v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``fset``."""
    return fset.project(v)


def normal_cone_distance(fset: FeasibleSet, z, v) -> float:
    """Distance from ``v`` to the negative normal cone ``-N(z; fset)``.

    ``z`` must lie in the set (within ``FEAS_TOL``).
    """
    z = fset._check(z)
    v = fset._check(v)
    if not fset.contains(z, FEAS_TOL):
        raise ValueError("normal_cone_distance: z is not in the set")
    return math.sqrt(fset._cone_sq(z, v))


# ---------------------------------------------------------------------------
# Problem contract


@dataclass(frozen=True)
class ProblemConstants:
    rho_f: float
    rho_g: float
    l_g: float
    d_z: float
    d_f: float
    mu: float = 0.0

    def __post_init__(self):
        for name in ("rho_f", "rho_g", "l_g", "d_f", "mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.d_z > 0:
            raise ValueError("d_z must be positive")

    def rho_h(self, alpha: float) -> float:
        """Gradient-Lipschitz constant of the relaxed constraint."""
        return self.rho_g * (2.0 + self.rho_g / alpha)


@dataclass(frozen=True)
class SmoothingParams:
    """Inner regularization ``alpha`` and constraint slack ``delta``.

    Zero values are accepted so the unsmoothed constraint ``g - g*`` can be
    evaluated; solvers call :meth:`require_positive`.
    """

    alpha: float = 1e-2
    delta: float = 1e-2

    def __post_init__(self):
        if not (self.alpha >= 0 and self.delta >= 0):
            raise ValueError("alpha and delta must be nonnegative")

    def require_positive(self) -> "SmoothingParams":
        if not (self.alpha > 0 and self.delta > 0):
            raise ValueError("solvers need alpha > 0 and delta > 0")
        return self


def prox_weight(alpha: float, rho_g: float) -> float:
    """Coefficient that makes the proximal constraint ``h + w*|x - c|^2`` convex."""
    if not alpha > 0:
        raise ValueError("proximal constraint weight undefined for alpha = 0")
    return (2.0 * alpha * rho_g + rho_g ** 2) / (2.0 * alpha)


@dataclass(frozen=True)
class ConstraintProx:
    """Extra term ``weight * |x - center_x|^2`` added to the relaxed constraint."""

    center_x: np.ndarray
    weight: float


@dataclass(frozen=True)
class ProblemSpec:
    """Bilevel problem ``min f(x, y)`` over ``y`` in ``argmin g(x, .)``.

    Gradient callbacks return ``(grad_x, grad_y)``. ``hvp_g_yy(x, y, v)``
    returns the inner Hessian times ``v`` and ``hvp_g_xy(x, y, v)`` the
    mixed block (shape p x d) times ``v``.
    """

    set_x: FeasibleSet
    set_y: FeasibleSet
    f_value: ValueFn
    f_grad: GradFn
    g_value: ValueFn
    g_grad: GradFn
    constants: ProblemConstants
    hvp_g_yy: Optional[HvpFn] = None
    hvp_g_xy: Optional[HvpFn] = None
    hvp_f_yy: Optional[HvpFn] = None
    hvp_f_xy: Optional[HvpFn] = None
    name: str = "problem"
    violates_inner_convexity: bool = False
    reference: Optional[dict] = None
    inner_value_oracle: Optional[Callable[[np.ndarray], float]] = None
    constraint_prox: Optional[ConstraintProx] = None
    metadata: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int]:
        return self.set_x.dim, self.set_y.dim

    @property
    def set_z(self) -> Product:
        return Product((self.set_x, self.set_y))

    def project_z(self, z: VectorPair) -> VectorPair:
        return VectorPair(self.set_x.project(z.x), self.set_y.project(z.y))

    def center(self) -> VectorPair:
        return VectorPair(self.set_x.center(), self.set_y.center())

    def f(self, z: VectorPair) -> float:
        return float(self.f_value(z.x, z.y))

    def g(self, z: VectorPair) -> float:
        return float(self.g_value(z.x, z.y))

    def grad_f(self, z: VectorPair) -> VectorPair:
        return VectorPair(*self.f_grad(z.x, z.y))

    def grad_g(self, z: VectorPair) -> VectorPair:
        return VectorPair(*self.g_grad(z.x, z.y))

    def with_constants(self, constants: ProblemConstants) -> "ProblemSpec":
        return replace(self, constants=constants)


@dataclass
class CallCounter:
    f_value: int = 0
    f_grad: int = 0
    g_value: int = 0
    g_grad: int = 0
    hvp_yy: int = 0
    hvp_xy: int = 0

    @property
    def total_grad(self) -> int:
        """Budget unit: first-order oracle calls plus Hessian-vector products."""
        return self.f_grad + self.g_grad + self.hvp_yy + self.hvp_xy

    def as_dict(self) -> dict:
        return {"f_value": self.f_value, "f_grad": self.f_grad,
                "g_value": self.g_value, "g_grad": self.g_grad,
                "hvp_yy": self.hvp_yy, "hvp_xy": self.hvp_xy}


def counting(problem: ProblemSpec, counter: Optional[CallCounter] = None
             ) -> tuple[ProblemSpec, CallCounter]:
    """Return a copy of ``problem`` whose callbacks increment ``counter``."""
    counter = counter if counter is not None else CallCounter()

    def wrap(fn, attr):
        if fn is None:
            return None

        def inner(*args):
            setattr(counter, attr, getattr(counter, attr) + 1)
            return fn(*args)
        return inner

    wrapped = replace(
        problem,
        f_value=wrap(problem.f_value, "f_value"),
        f_grad=wrap(problem.f_grad, "f_grad"),
        g_value=wrap(problem.g_value, "g_value"),
        g_grad=wrap(problem.g_grad, "g_grad"),
        hvp_g_yy=wrap(problem.hvp_g_yy, "hvp_yy"),
        hvp_g_xy=wrap(problem.hvp_g_xy, "hvp_xy"),
        hvp_f_yy=wrap(problem.hvp_f_yy, "hvp_yy"),
        hvp_f_xy=wrap(problem.hvp_f_xy, "hvp_xy"),
    )
    return wrapped, counter


SAFETY_FACTOR = 1.5


def estimate_constants(problem: ProblemSpec, sample_count: int = 1000,
                       rng_seed: int = 0) -> ProblemConstants:
    """Sample smoothness constants over ``Z = X x Y``.

    Sampled suprema underestimate the truth, so every supremum is inflated
    by ``SAFETY_FACTOR``; the strong-convexity estimate is deflated by it.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    d_z = problem.set_z.diameter()
    if not d_z > 0:
        raise ValueError("feasible set has zero diameter")
    rng = np.random.default_rng(rng_seed)
    p, _ = problem.dims
    sz = problem.set_z
    rho_f = rho_g = l_g = d_f = 0.0
    mu = math.inf
    for _ in range(sample_count):
        a = VectorPair.from_flat(sz.sample(rng), p)
        b = VectorPair.from_flat(sz.sample(rng), p)
        dist = (a - b).norm()
        gfa, gfb = problem.grad_f(a), problem.grad_f(b)
        gga, ggb = problem.grad_g(a), problem.grad_g(b)
        if dist > 0:
            rho_f = max(rho_f, (gfa - gfb).norm() / dist)
            rho_g = max(rho_g, (gga - ggb).norm() / dist)
            mu = min(mu, (gfa - gfb).dot(a - b) / dist ** 2)
        l_g = max(l_g, gga.norm(), ggb.norm())
        d_f = max(d_f, abs(problem.f(a) - problem.f(b)))
    mu = max(mu, 0.0) if math.isfinite(mu) else 0.0
    k = SAFETY_FACTOR
    return ProblemConstants(rho_f=k * rho_f, rho_g=k * rho_g, l_g=k * l_g,
                            d_z=d_z, d_f=k * d_f, mu=mu / k)
