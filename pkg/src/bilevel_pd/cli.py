"""Command-line harness: ``run``, ``compare`` and ``check``.

Exit codes: 0 ok, 1 check failure, 2 configuration error (nothing is
written), 3 error during a solver run.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import BaselineConfig, run_baseline
from .checks import format_table, run_checks
from .core import CallCounter, ProblemSpec, SmoothingParams, VectorPair
from .metrics import benchmark_metrics, kkt_residual
from .pdbo import PdboConfig, Schedule, default_dual_bound, run_pdbo, theory_schedule
from .problems import DataError, get_problem, load_hyperopt
from .proximal import ProximalConfig, run_proximal_pdbo

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

METHODS = ("pdbo", "proximal-pdbo", "itd-r", "aid-fp", "bigsam-itd")
TRAJECTORY_COLUMNS = ("t", "f", "h_hat", "lambda", "outer_gap", "inner_gap",
                      "dist_x", "dist_y", "grad_calls", "wall_time_s")
INT_COLUMNS = ("t", "grad_calls")

# Per-problem defaults, overridden by JSON and then by flags.
PRESETS = {
    "toy1": dict(x0=[2.0], y0=[0.5, 0.5], alpha=1e-3, delta=1e-3, T=1000, N=5,
                 primal_step=0.2, dual_step=0.1, theta=0.0, lambda0=2.0),
    "toy2": dict(x0=[3.0], y0=[3.0], alpha=1e-3, delta=1e-3, T=1000, N=5,
                 primal_step=0.2, dual_step=0.1, theta=0.0, lambda0=2.0),
    # stepsize 0.4 is 100 rescaled from a summed to a mean training loss
    "hyperopt": dict(x0=[-3.0], y0=[0.0], alpha=1e-2, delta=1e-2, T=300, N=5,
                     primal_step=0.4, dual_step=1e-3, theta=0.0, lambda0=0.0),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    problem: str = ""
    methods: list = field(default_factory=list)
    T: int = 1000
    N: int = 5
    K: int = 20
    T_sub: int = 50
    schedule: str = "constant"
    primal_step: float = 0.2
    dual_step: float = 0.1
    theta: float = 0.0
    lambda0: float = 0.0
    alpha: float = 1e-2
    delta: float = 1e-2
    dual_bound_B: Optional[float] = None
    x0: Optional[list] = None
    y0: Optional[list] = None
    inner_lr: float = 0.5
    outer_lr: float = 0.2
    fp_iterations: int = 5
    averaging: float = 0.5
    inner_warm_start: bool = True
    record_every: int = 1
    seeds: list = field(default_factory=lambda: [0])
    budget: Optional[int] = None
    out: str = "out"
    jobs: int = 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# manifest assembly

def _float_list(text) -> list:
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None


def build_manifest(args: argparse.Namespace, multi: bool) -> RunManifest:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    if "method" in data:
        data.setdefault("methods", [data.pop("method")])
    flag_map = {"problem": args.problem, "T": args.T, "N": args.N, "K": args.K,
                "T_sub": args.T_sub, "schedule": args.schedule,
                "primal_step": args.primal_step, "dual_step": args.dual_step,
                "theta": args.theta, "lambda0": args.lambda0, "alpha": args.alpha,
                "delta": args.delta, "dual_bound_B": args.B, "x0": args.x0,
                "y0": args.y0, "inner_lr": args.inner_lr, "outer_lr": args.outer_lr,
                "record_every": args.record_every, "out": args.out, "jobs": args.jobs,
                "budget": getattr(args, "budget", None)}
    if args.seed:
        flag_map["seeds"] = args.seed
    if multi and args.methods:
        flag_map["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not multi and args.method:
        flag_map["methods"] = [args.method]
    overrides = {k: v for k, v in flag_map.items() if v is not None}

    problem = overrides.get("problem", data.get("problem"))
    if not problem:
        raise ConfigError("missing required setting: problem")
    merged = dict(PRESETS.get(problem, {}))
    merged.update(data)
    merged.update(overrides)
    known = {f.name for f in fields(RunManifest)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown settings: {', '.join(unknown)}")
    m = RunManifest(**merged)
    if not m.methods:
        raise ConfigError("missing required setting: method")
    if not multi and len(m.methods) != 1:
        raise ConfigError("run takes exactly one method; use compare for several")
    for name in m.methods:
        if name not in METHODS:
            raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    if m.schedule not in ("constant", "theory"):
        raise ConfigError("schedule must be 'constant' or 'theory'")
    for key in ("T", "N", "K", "T_sub", "record_every", "jobs", "fp_iterations"):
        if int(getattr(m, key)) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if m.budget is not None and int(m.budget) < 1:
        raise ConfigError("budget must be >= 1")
    m.seeds = [int(s) for s in m.seeds]
    if not m.seeds:
        raise ConfigError("at least one seed is required")
    return m


def load_problem(name: str) -> ProblemSpec:
    """Built-in name, or ``csv:TRAIN,VAL`` for a hyperparameter problem."""
    try:
        if name.startswith("csv:"):
            paths = name[4:].split(",")
            if len(paths) != 2:
                raise ConfigError("csv problems are given as csv:TRAIN,VAL")
            return load_hyperopt(*paths)
        return get_problem(name)
    except (DataError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _initial_point(problem: ProblemSpec, m: RunManifest) -> VectorPair:
    p, d = problem.dims
    z = problem.center()

    def fit(values, dim, default):
        if values is None:
            return default
        v = _float_list(values)
        if len(v) == 1 and dim > 1:
            v = v * dim
        if len(v) != dim:
            raise ConfigError(f"initial point has {len(v)} entries, expected {dim}")
        return np.array(v)

    return VectorPair(fit(m.x0, p, z.x), fit(m.y0, d, z.y))


@dataclass(frozen=True)
class Task:
    manifest: dict
    method: str
    seed: int
    outdir: str
    steps: int            # outer iterations (per subproblem for proximal-pdbo)


def _solver_config(problem: ProblemSpec, m: RunManifest, method: str, steps: int):
    """Build the method's config object; raises ConfigError on bad values."""
    z0 = _initial_point(problem, m)
    try:
        params = SmoothingParams(m.alpha, m.delta)
        if method in ("pdbo", "proximal-pdbo"):
            params.require_positive()
            B = default_dual_bound(problem, params) if m.dual_bound_B is None else m.dual_bound_B
            if m.schedule == "theory":
                sched = (theory_schedule(problem, params, B) if method == "pdbo"
                         else Schedule.theory(1.0, 0.0, 0.0, 1.0, 1.0))  # rebuilt per subproblem
            else:
                sched = Schedule.constant(m.primal_step, m.dual_step, m.theta)
            if method == "pdbo":
                return PdboConfig(params, sched, B, m.N, steps, z0,
                                  min(m.lambda0, B), m.inner_warm_start, m.record_every)
            template = PdboConfig(params, sched, 1.0, m.N, steps, z0, 0.0,
                                  m.inner_warm_start, m.record_every)
            return ProximalConfig(template, m.K, 0, z0, m.dual_bound_B)
        return BaselineConfig(m.N, m.inner_lr, m.outer_lr, steps, z0,
                              m.fp_iterations, m.averaging)
    except ValueError as exc:
        raise ConfigError(f"{method}: {exc}") from None


# ---------------------------------------------------------------------------
# execution

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.17g}"


def write_trajectory(path: Path, rows: list) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in TRAJECTORY_COLUMNS])


def read_trajectory(path) -> list:
    """Parse a trajectory CSV back into dicts of ints and floats."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_COLUMNS:
            raise ValueError(f"unexpected trajectory header {reader.fieldnames}")
        return [{k: int(v) if k in INT_COLUMNS else float(v) for k, v in r.items()}
                for r in reader]


def _metric_fields(problem: ProblemSpec) -> tuple:
    out = []
    ref = problem.reference or {}
    if "f_star" in ref:
        out.append("outer_gap")
    if problem.inner_value_oracle is not None:
        out.append("inner_gap")
    if "x" in ref:
        out += ["dist_x", "dist_y"]
    return tuple(out)


def _rows(problem, records, offset=0, f_of=None):
    fields_ = _metric_fields(problem)
    rows = []
    for r in records:
        bm = benchmark_metrics(problem, r.z, fields=fields_)
        rows.append({"t": r.t + offset, "f": problem.f(r.z) if f_of else r.f_value,
                     "h_hat": r.h_hat, "lambda": r.lam, **bm.as_dict(),
                     "grad_calls": r.grad_calls_cum, "wall_time_s": r.wall_time_s})
    return rows


def _point_summary(problem: ProblemSpec, z: VectorPair) -> dict:
    bm = benchmark_metrics(problem, z, fields=_metric_fields(problem))
    out = {"f": problem.f(z), **bm.as_dict(),
           "x": z.x.tolist(), "y": z.y.tolist()}
    for key in ("val_accuracy", "train_accuracy"):
        if key in problem.metadata:
            out[key] = problem.metadata[key](z.y)
    return out


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def execute(task: Task) -> dict:
    """Run one (method, seed) pair and write its files. Returns the summary."""
    m = RunManifest(**task.manifest)
    problem = load_problem(m.problem)
    cfg = _solver_config(problem, m, task.method, task.steps)
    counter = CallCounter()
    summary = {"tool": "bilevel_pd", "version": __version__, "problem": m.problem,
               "method": task.method, "seed": task.seed, "outer_steps": task.steps,
               "config": m.to_dict()}
    params = SmoothingParams(m.alpha, m.delta)
    if task.method == "pdbo":
        res = run_pdbo(problem, cfg, counter)
        rows = _rows(problem, res.trajectory)
        z_fin, lam = res.z_last, res.lambda_last
        summary["averaged"] = _point_summary(problem, res.z_bar)
        summary["dual_bound_B"] = res.dual_bound_B
        summary["lambda_max"] = res.lambda_max
    elif task.method == "proximal-pdbo":
        res = run_proximal_pdbo(problem, replace(cfg, rng_seed=task.seed), counter)
        rows = []
        for s in res.per_subproblem:
            rows += _rows(problem, s.trajectory, offset=(s.k - 1) * task.steps, f_of=True)
        z_fin, lam = res.z_out, res.lambda_out
        summary["k_hat"] = res.k_hat
        summary["dual_bound_B"] = res.per_subproblem[0].dual_bound_B
        summary["lambda_max"] = max(s.lambda_max for s in res.per_subproblem)
    else:
        res = run_baseline(problem, task.method, cfg, counter, m.record_every)
        rows = _rows(problem, res.trajectory)
        z_fin, lam = res.z_last, None
        summary["hypergrad_norm"] = res.hypergrad_norm
    summary["final"] = _point_summary(problem, z_fin)
    if lam is not None:
        k = kkt_residual(problem, params, z_fin, lam)
        summary["lambda_last"] = lam
        summary["kkt"] = {"feasibility": k.feasibility, "complementarity": k.complementarity,
                          "stationarity": k.stationarity}
    summary["grad_calls"] = {**counter.as_dict(), "total": counter.total_grad}

    out = Path(task.outdir)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.csv", rows)
    (out / "summary.json").write_text(
        json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return _jsonable(summary)


def per_step_cost(problem: ProblemSpec, m: RunManifest, method: str) -> int:
    """Gradient-oracle calls of one outer iteration (constant per method)."""
    probe = replace(m, K=1, record_every=1)
    cfg = _solver_config(problem, probe, method, 1)
    counter = CallCounter()
    if method == "pdbo":
        run_pdbo(problem, cfg, counter)
    elif method == "proximal-pdbo":
        run_proximal_pdbo(problem, cfg, counter)
    else:
        run_baseline(problem, method, cfg, counter)
    return counter.total_grad


def _run_tasks(tasks: list, jobs: int) -> list:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(execute, tasks))
    return [execute(t) for t in tasks]


def _plan(m: RunManifest, multi: bool) -> list:
    """Validate everything and lay out tasks before any file is written."""
    problem = load_problem(m.problem)
    steps = {}
    budget = None
    if multi:
        budget = m.budget
        if budget is None:
            budget = m.T * per_step_cost(problem, m, "pdbo")
    for method in m.methods:
        default = m.T_sub if method == "proximal-pdbo" else m.T
        _solver_config(problem, m, method, default)
        if budget is None:
            steps[method] = default
        else:
            cost = per_step_cost(problem, m, method)
            per = budget // m.K if method == "proximal-pdbo" else budget
            steps[method] = max(1, per // cost)
    out = Path(m.out)
    tasks = []
    for method in m.methods:
        for seed in m.seeds:
            if multi:
                d = out / method / f"seed-{seed}"
            else:
                d = out if len(m.seeds) == 1 else out / f"seed-{seed}"
            tasks.append(Task(m.to_dict(), method, seed, str(d), steps[method]))
    return tasks


def _markdown(summaries: list) -> str:
    head = ["method", "seed", "steps", "final f", "outer_gap", "dist_y", "grad_calls"]
    acc = any("val_accuracy" in s["final"] for s in summaries)
    if acc:
        head.append("val_accuracy")

    def cell(v):
        return "n/a" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))

    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for s in summaries:
        fin = s["final"]
        row = [s["method"], s["seed"], s["outer_steps"], fin["f"], fin.get("outer_gap"),
               fin.get("dist_y"), s["grad_calls"]["total"]]
        if acc:
            row.append(fin.get("val_accuracy"))
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def cmd_run(m: RunManifest, multi: bool = False) -> int:
    tasks = _plan(m, multi)
    summaries = _run_tasks(tasks, m.jobs)
    if multi:
        out = Path(m.out)
        with (out / "compare.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method", "seed") + TRAJECTORY_COLUMNS)
            for task in tasks:
                for row in read_trajectory(Path(task.outdir) / "trajectory.csv"):
                    w.writerow([task.method, task.seed] + [_fmt(row[c]) for c in TRAJECTORY_COLUMNS])
        table = _markdown(summaries)
        (out / "summary.md").write_text(table, encoding="utf-8")
        print(table, end="")
    else:
        for s in summaries:
            fin = s["final"]
            print(f"{s['method']} seed={s['seed']}: f={fin['f']:.6g} "
                  f"grad_calls={s['grad_calls']['total']}")
    return EXIT_OK


def check_problem(problem: ProblemSpec, stream=None) -> int:
    stream = stream or sys.stdout
    results = run_checks(problem)
    print(format_table(results), file=stream)
    failed = [r.name for r in results if r.failed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=stream)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_run_flags(p: argparse.ArgumentParser, multi: bool):
    p.add_argument("--config", help="JSON manifest; flags override its values")
    p.add_argument("--problem", help="toy1, toy2, hyperopt or csv:TRAIN,VAL")
    if multi:
        p.add_argument("--methods", help="comma-separated list, e.g. pdbo,itd-r")
        p.add_argument("--budget", type=int, help="gradient-call budget per method")
    else:
        p.add_argument("--method", help=", ".join(METHODS))
    p.add_argument("--T", type=int, help="outer iterations")
    p.add_argument("--N", type=int, help="inner steps")
    p.add_argument("--K", type=int, help="proximal rounds")
    p.add_argument("--T-sub", dest="T_sub", type=int, help="iterations per proximal round")
    p.add_argument("--schedule", choices=("constant", "theory"))
    p.add_argument("--primal-step", dest="primal_step", type=float)
    p.add_argument("--dual-step", dest="dual_step", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--B", type=float, help="dual bound")
    p.add_argument("--x0", help="comma-separated outer start")
    p.add_argument("--y0", help="comma-separated inner start")
    p.add_argument("--inner-lr", dest="inner_lr", type=float)
    p.add_argument("--outer-lr", dest="outer_lr", type=float)
    p.add_argument("--record-every", dest="record_every", type=int)
    p.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilevel-pd",
                                     description="Primal-dual bilevel solvers and baselines")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("run", help="run one method"), multi=False)
    _add_run_flags(sub.add_parser("compare", help="run several methods on a shared budget"),
                   multi=True)
    chk = sub.add_parser("check", help="derivative and schedule self-checks")
    chk.add_argument("problem")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "check":
            return check_problem(load_problem(args.problem))
        m = build_manifest(args, multi=args.command == "compare")
        return cmd_run(m, multi=args.command == "compare")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # solver or I/O failure during a run
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
