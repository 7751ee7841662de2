"""Built-in bilevel problems with analytic gradients, HVPs and reference solutions.

* ``toy1``: quadratic outer objective, inner objective with a whole line of
  minimizers for every ``x``.
* ``toy2``: separable quadratic outer objective, ``sin(x + y)`` inner
  objective (nonconvex in ``y``).
* hyperparameter optimization: per-weight exp-parameterized ridge penalties
  on a softmax classifier, validation cross-entropy as outer objective.
* ``quadratic``: strongly convex inner problem with a unique minimizer,
  used to check that all methods agree in the classical setting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .core import Box, ProblemConstants, ProblemSpec

BOX_HALF_WIDTH = 10.0
GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


# ---------------------------------------------------------------------------
# toy1


def make_toy1(bound: float = BOX_HALF_WIDTH) -> ProblemSpec:
    """``f = 1/2 |(1, x) - y|^2``, ``g = 1/2 y1^2 - x y1`` on ``[-bound, bound]^3``."""

    def f_value(x, y):
        return 0.5 * (1.0 - y[0]) ** 2 + 0.5 * (x[0] - y[1]) ** 2

    def f_grad(x, y):
        return np.array([x[0] - y[1]]), np.array([y[0] - 1.0, y[1] - x[0]])

    def g_value(x, y):
        return 0.5 * y[0] ** 2 - x[0] * y[0]

    def g_grad(x, y):
        return np.array([-y[0]]), np.array([y[0] - x[0], 0.0])

    def hvp_g_yy(x, y, v):
        return np.array([v[0], 0.0])

    def hvp_g_xy(x, y, v):
        return np.array([-v[0]])

    def hvp_f_yy(x, y, v):
        return np.array([v[0], v[1]], dtype=float)

    def hvp_f_xy(x, y, v):
        return np.array([-v[1]])

    b = float(bound)
    set_x = Box.uniform(-b, b, 1)
    set_y = Box.uniform(-b, b, 2)
    # f peaks at y1 = -b (when b >= 1) and |x - y2| = 2b
    d_f = 0.5 * (1.0 + b) ** 2 + 0.5 * (2.0 * b) ** 2
    constants = ProblemConstants(
        rho_f=2.0,
        rho_g=GOLDEN,
        l_g=math.sqrt(b ** 2 + (2.0 * b) ** 2),
        d_z=math.sqrt(3.0) * 2.0 * b,
        d_f=d_f,
        mu=0.0,
    )
    return ProblemSpec(
        set_x=set_x, set_y=set_y,
        f_value=f_value, f_grad=f_grad, g_value=g_value, g_grad=g_grad,
        hvp_g_yy=hvp_g_yy, hvp_g_xy=hvp_g_xy,
        hvp_f_yy=hvp_f_yy, hvp_f_xy=hvp_f_xy,
        constants=constants, name="toy1",
        reference={"x": np.array([1.0]), "y": np.array([1.0, 1.0]),
                   "f_star": 0.0, "g_star": -0.5},
        inner_value_oracle=lambda x: -0.5 * float(x[0]) ** 2,
    )


def toy1_smoothed_argmin(x, alpha: float) -> np.ndarray:
    """Closed-form minimizer of ``g(x, .) + alpha/2 |.|^2`` for toy1."""
    return np.array([float(np.asarray(x).ravel()[0]) / (1.0 + alpha), 0.0])


def toy1_smoothed_value(x, alpha: float) -> float:
    x0 = float(np.asarray(x).ravel()[0])
    return -x0 ** 2 / (2.0 * (1.0 + alpha))


# ---------------------------------------------------------------------------
# toy2


def grid_inner_value(g_value, x, set_y: Box, resolution: float = 1e-3) -> tuple[float, np.ndarray]:
    """Brute-force ``min_y g(x, y)`` over a one-dimensional box, refined locally."""
    if set_y.dim != 1:
        raise ValueError("grid oracle supports scalar inner variables only")
    lo, hi = float(set_y.lower[0]), float(set_y.upper[0])
    ys = np.linspace(lo, hi, int(round((hi - lo) / resolution)) + 1)
    vals = np.array([g_value(x, np.array([t])) for t in ys])
    i = int(np.argmin(vals))
    # golden-section polish inside the bracketing cell
    a, b = ys[max(i - 1, 0)], ys[min(i + 1, ys.size - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - phi * (b - a), a + phi * (b - a)
    for _ in range(60):
        if g_value(x, np.array([c])) < g_value(x, np.array([d])):
            b = d
        else:
            a = c
        c, d = b - phi * (b - a), a + phi * (b - a)
    t = 0.5 * (a + b)
    best = float(g_value(x, np.array([t])))
    if best <= vals[i]:
        return best, np.array([t])
    return float(vals[i]), np.array([ys[i]])


def toy2_reference(a: float = 0.0, bound: float = BOX_HALF_WIDTH) -> tuple[float, float]:
    """Best feasible point ``x = y`` of toy2; returns ``(coordinate, f*)``."""
    best = None
    for k in range(-10, 11):
        s = -math.pi / 2.0 + 2.0 * math.pi * k
        c = s / 2.0
        if abs(c) > bound:
            continue
        val = 2.0 * (c - a) ** 2
        if best is None or val < best[1]:
            best = (c, val)
    return best


def make_toy2(a: float = 0.0, bound: float = BOX_HALF_WIDTH) -> ProblemSpec:
    """``f = (x-a)^2 + (y-a)^2``, ``g = sin(x + y)`` on ``[-bound, bound]^2``."""
    if abs(a) > 5:
        raise ValueError("toy2 requires |a| <= 5")
    a = float(a)

    def f_value(x, y):
        return (x[0] - a) ** 2 + (y[0] - a) ** 2

    def f_grad(x, y):
        return np.array([2.0 * (x[0] - a)]), np.array([2.0 * (y[0] - a)])

    def g_value(x, y):
        return math.sin(x[0] + y[0])

    def g_grad(x, y):
        c = math.cos(x[0] + y[0])
        return np.array([c]), np.array([c])

    def hvp_g_yy(x, y, v):
        return -math.sin(x[0] + y[0]) * np.asarray(v, dtype=float)

    def hvp_g_xy(x, y, v):
        return -math.sin(x[0] + y[0]) * np.asarray(v, dtype=float)

    def hvp_f_yy(x, y, v):
        return 2.0 * np.asarray(v, dtype=float)

    def hvp_f_xy(x, y, v):
        return np.zeros(1)

    b = float(bound)
    set_x, set_y = Box.uniform(-b, b, 1), Box.uniform(-b, b, 1)
    c, f_star = toy2_reference(a, b)
    constants = ProblemConstants(
        rho_f=2.0, rho_g=2.0, l_g=math.sqrt(2.0),
        d_z=2.0 * math.sqrt(2.0) * b,
        d_f=2.0 * (b + abs(a)) ** 2, mu=2.0,
    )
    return ProblemSpec(
        set_x=set_x, set_y=set_y,
        f_value=f_value, f_grad=f_grad, g_value=g_value, g_grad=g_grad,
        hvp_g_yy=hvp_g_yy, hvp_g_xy=hvp_g_xy,
        hvp_f_yy=hvp_f_yy, hvp_f_xy=hvp_f_xy,
        constants=constants, name="toy2", violates_inner_convexity=True,
        reference={"x": np.array([c]), "y": np.array([c]), "f_star": f_star,
                   "g_star": -1.0},
        inner_value_oracle=lambda x: grid_inner_value(g_value, x, set_y)[0],
        metadata={"a": a},
    )


# ---------------------------------------------------------------------------
# strongly convex inner quadratic (unique inner minimizer)

QUAD_A = np.array([[2.0, 0.5], [0.5, 1.0]])
QUAD_B = np.array([[1.0, 0.0], [0.5, 1.0]])
QUAD_TARGET = np.array([1.0, -1.0])
QUAD_MU = 0.1


def make_quadratic(bound: float = BOX_HALF_WIDTH) -> ProblemSpec:
    """``g = 1/2 y'Ay - y'Bx`` (unique minimizer ``A^-1 B x``) and
    ``f = 1/2 |y - target|^2 + mu/2 |x|^2``, both in two dimensions."""
    A, Bm, tgt, mu = QUAD_A, QUAD_B, QUAD_TARGET, QUAD_MU

    def f_value(x, y):
        return 0.5 * float((y - tgt) @ (y - tgt)) + 0.5 * mu * float(x @ x)

    def f_grad(x, y):
        return mu * np.asarray(x, dtype=float), np.asarray(y - tgt, dtype=float)

    def g_value(x, y):
        return 0.5 * float(y @ A @ y) - float(y @ Bm @ x)

    def g_grad(x, y):
        return -Bm.T @ y, A @ y - Bm @ x

    M = np.linalg.solve(A, Bm)
    x_star = np.linalg.solve(M.T @ M + mu * np.eye(2), M.T @ tgt)
    y_star = M @ x_star
    H = np.block([[np.zeros((2, 2)), -Bm.T], [-Bm, A]])
    b = float(bound)
    r = b * 2.0  # largest |z| on the box
    constants = ProblemConstants(
        rho_f=1.0, rho_g=float(np.linalg.norm(H, 2)),
        l_g=float(np.linalg.norm(H, 2)) * r, d_z=2.0 * r,
        d_f=0.5 * (b * math.sqrt(2.0) + float(np.linalg.norm(tgt))) ** 2 + 0.5 * mu * 2 * b * b,
        mu=mu,
    )
    return ProblemSpec(
        set_x=Box.uniform(-b, b, 2), set_y=Box.uniform(-b, b, 2),
        f_value=f_value, f_grad=f_grad, g_value=g_value, g_grad=g_grad,
        hvp_g_yy=lambda x, y, v: A @ v, hvp_g_xy=lambda x, y, v: -Bm.T @ v,
        hvp_f_yy=lambda x, y, v: np.asarray(v, dtype=float),
        hvp_f_xy=lambda x, y, v: np.zeros(2),
        constants=constants, name="quadratic",
        reference={"x": x_star, "y": y_star, "f_star": f_value(x_star, y_star),
                   "g_star": g_value(x_star, y_star)},
        inner_value_oracle=lambda x: -0.5 * float((Bm @ x) @ np.linalg.solve(A, Bm @ x)),
    )


# ---------------------------------------------------------------------------
# hyperparameter optimization


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def read_csv_dataset(path) -> Dataset:
    """Rows are samples; last column is an integer label.

    A first row containing any non-numeric field is treated as a header.
    """
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            if len(row) < 2:
                raise DataError(f"{path}: row {lineno}: need features and a label")
            try:
                feats = [float(c) for c in row[:-1]]
                lab = float(row[-1])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
            if lab != int(lab):
                raise DataError(f"{path}: row {lineno}: label {row[-1]!r} is not an integer")
            if rows and len(feats) != len(rows[0][0]):
                raise DataError(f"{path}: row {lineno}: expected {len(rows[0][0])} "
                                f"features, got {len(feats)}")
            rows.append((feats, int(lab)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _SoftmaxCE:
    """Mean cross-entropy of an affine softmax classifier, weights flattened."""

    def __init__(self, X, labels, classes):
        self.X = np.hstack([X, np.ones((X.shape[0], 1))])
        self.n = self.X.shape[0]
        self.c = len(classes)
        index = {k: i for i, k in enumerate(classes)}
        self.Y = np.zeros((self.n, self.c))
        self.Y[np.arange(self.n), [index[v] for v in labels]] = 1.0
        self.labels_idx = np.array([index[v] for v in labels])

    def _W(self, w):
        return np.asarray(w, dtype=float).reshape(self.c, self.X.shape[1])

    def value(self, w):
        Z = self.X @ self._W(w).T
        zmax = Z.max(axis=1, keepdims=True)
        lse = (zmax + np.log(np.exp(Z - zmax).sum(axis=1, keepdims=True))).ravel()
        return float(np.mean(lse - (Z * self.Y).sum(axis=1)))

    def grad(self, w):
        P = _softmax(self.X @ self._W(w).T)
        return ((P - self.Y).T @ self.X / self.n).ravel()

    def hvp(self, w, v):
        P = _softmax(self.X @ self._W(w).T)
        dZ = self.X @ self._W(v).T
        dP = P * (dZ - (P * dZ).sum(axis=1, keepdims=True))
        return (dP.T @ self.X / self.n).ravel()

    def accuracy(self, w):
        pred = np.argmax(self.X @ self._W(w).T, axis=1)
        return float(np.mean(pred == self.labels_idx))

    def curvature_bound(self):
        return float(np.linalg.norm(self.X, 2) ** 2 / self.n)


def make_hyperopt(train: Dataset, val: Dataset, reg_box=(-6.0, 0.0),
                  weight_bound: float = 3.0, name: str = "hyperopt") -> ProblemSpec:
    """Bilevel problem: outer variable = per-weight log-penalties, inner = weights."""
    if train.features.shape[1] != val.features.shape[1]:
        raise DataError("train and validation feature counts differ")
    classes = sorted(set(train.labels.tolist()))
    if set(val.labels.tolist()) != set(classes):
        raise DataError("label sets of train and validation files differ")
    tr = _SoftmaxCE(train.features, train.labels, classes)
    va = _SoftmaxCE(val.features, val.labels, classes)
    dim = tr.c * tr.X.shape[1]
    lo, hi = float(reg_box[0]), float(reg_box[1])
    W = float(weight_bound)

    def f_value(lam, w):
        return va.value(w)

    def f_grad(lam, w):
        return np.zeros(dim), va.grad(w)

    def g_value(lam, w):
        return tr.value(w) + float(np.exp(lam) @ (w * w))

    def g_grad(lam, w):
        e = np.exp(lam)
        return e * w * w, tr.grad(w) + 2.0 * e * w

    def hvp_g_yy(lam, w, v):
        return tr.hvp(w, v) + 2.0 * np.exp(lam) * v

    def hvp_g_xy(lam, w, v):
        return 2.0 * np.exp(lam) * w * v

    def hvp_f_yy(lam, w, v):
        return va.hvp(w, v)

    def hvp_f_xy(lam, w, v):
        return np.zeros(dim)

    E = math.exp(hi)
    # per-coordinate 2x2 block of the penalty Hessian, plus the data term
    blk = np.array([[E * W * W, 2.0 * E * W], [2.0 * E * W, 2.0 * E]])
    rho_g = tr.curvature_bound() + float(np.linalg.norm(blk, 2))
    max_row = float(np.max(np.linalg.norm(tr.X, axis=1)))
    l_g = (math.sqrt(2.0) * max_row + 2.0 * E * W * math.sqrt(dim)
           + E * W * W * math.sqrt(dim))
    logit_range = 2.0 * W * float(np.max(np.abs(va.X).sum(axis=1)))
    constants = ProblemConstants(
        rho_f=va.curvature_bound(), rho_g=rho_g, l_g=l_g,
        d_z=math.sqrt(dim * ((hi - lo) ** 2 + (2.0 * W) ** 2)),
        d_f=math.log(max(tr.c, 1)) + logit_range, mu=0.0,
    )
    return ProblemSpec(
        set_x=Box.uniform(lo, hi, dim), set_y=Box.uniform(-W, W, dim),
        f_value=f_value, f_grad=f_grad, g_value=g_value, g_grad=g_grad,
        hvp_g_yy=hvp_g_yy, hvp_g_xy=hvp_g_xy,
        hvp_f_yy=hvp_f_yy, hvp_f_xy=hvp_f_xy,
        constants=constants, name=name,
        metadata={"val_accuracy": va.accuracy, "train_accuracy": tr.accuracy,
                  "n_classes": tr.c, "n_features": train.features.shape[1]},
    )


def load_hyperopt(train_csv, val_csv, reg_box=(-6.0, 0.0),
                  weight_bound: float = 3.0) -> ProblemSpec:
    return make_hyperopt(read_csv_dataset(train_csv), read_csv_dataset(val_csv),
                         reg_box, weight_bound)


def bundled_paths() -> tuple[Path, Path]:
    base = resources.files("bilevel_pd") / "data"
    return Path(str(base / "synthetic_train.csv")), Path(str(base / "synthetic_val.csv"))


def load_bundled_hyperopt(**kw) -> ProblemSpec:
    tr, va = bundled_paths()
    return load_hyperopt(tr, va, **kw)


def generate_synthetic(n_samples: int = 500, n_features: int = 40,
                       n_informative: int = 5, seed: int = 20210101,
                       label_noise: float = 0.1) -> tuple[Dataset, Dataset]:
    """Sparse logistic-model dataset used for the bundled CSV files.

    Half the samples go to training, half to validation.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_samples, n_features))
    beta = np.zeros(n_features)
    beta[:n_informative] = rng.choice([-1.0, 1.0], n_informative) * rng.uniform(1.0, 2.0, n_informative)
    p = 1.0 / (1.0 + np.exp(-X @ beta))
    y = (rng.uniform(size=n_samples) < p).astype(int)
    flip = rng.uniform(size=n_samples) < label_noise
    y = np.where(flip, 1 - y, y)
    h = n_samples // 2
    return Dataset(X[:h], y[:h]), Dataset(X[h:], y[h:])


def write_csv_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(ds.features.shape[1])] + ["label"])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


BUILTIN = {
    "toy1": make_toy1,
    "toy2": make_toy2,
    "quadratic": make_quadratic,
    "hyperopt": load_bundled_hyperopt,
}


def get_problem(name: str, **kw) -> ProblemSpec:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(BUILTIN)}") from None
    return factory(**kw)
