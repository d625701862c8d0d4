"""Secant Levenberg-Marquardt over black-box residuals.

Derivatives come from forward-difference probes of the residual function,
re-estimated every iteration; there is no analytic Jacobian anywhere in the
pipeline because each residual evaluation is a full cloth simulation. For
the scalar fold cost C the method reduces to damped steepest descent with
Gauss-Newton step scaling on {C}^2.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import trajectory
from .cost import FoldScene, objective


@dataclass(frozen=True)
class LmOptions:
    delta: float = 1e-1
    initial_damping: float = 1e-3
    max_iterations: int = 50
    cost_improvement_tol: float = 1e-4
    step_norm_tol: float = 1e-6
    gradient_tol: float = 1e-5
    parallel_probes: bool = False
    workers: int | None = None

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ValueError("probe step delta must be positive")
        if min(self.cost_improvement_tol, self.step_norm_tol, self.gradient_tol) <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass
class LmRecord:
    x: np.ndarray
    squared_cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class LmTrace:
    records: list[LmRecord] = field(default_factory=list)
    stop_reason: str = ""

    def append(self, x, squared_cost, damping, step_norm, accepted):
        self.records.append(LmRecord(np.array(x, dtype=float), squared_cost, damping, step_norm, accepted))

    def accepted_costs(self) -> list[float]:
        return [r.squared_cost for r in self.records if r.accepted]

    @property
    def no_progress(self) -> bool:
        return not any(r.accepted for r in self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "squared_cost", "damping", "accepted"])
            for i, r in enumerate(self.records):
                w.writerow([i, repr(r.squared_cost), repr(r.damping), int(r.accepted)])


def _evaluate_many(f, points, parallel: bool, workers: int | None):
    """Evaluate f at several points, results gathered in input order."""
    if parallel and len(points) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(f, points))
    return [f(p) for p in points]


def numerical_gradient(f, x, delta: float, parallel: bool = False, workers: int | None = None) -> np.ndarray:
    """Forward-difference gradient (f(x + delta e_j) - f(x)) / delta."""
    x = np.asarray(x, dtype=float)
    f0 = float(f(x))
    if not np.isfinite(f0):
        raise ValueError("f is not finite at the base point")
    probes = [x + delta * _basis(len(x), j) for j in range(len(x))]
    vals = _evaluate_many(lambda p: float(f(p)), probes, parallel, workers)
    g = np.empty(len(x))
    for j, v in enumerate(vals):
        if not np.isfinite(v):
            raise ValueError(f"probe along axis {j} is not finite")
        g[j] = (v - f0) / delta
    return g


def _basis(n: int, j: int) -> np.ndarray:
    e = np.zeros(n)
    e[j] = 1.0
    return e


def _residual(f, x) -> np.ndarray:
    return np.atleast_1d(np.asarray(f(x), dtype=float))


def _jacobian(f, x, r0, delta, parallel, workers) -> np.ndarray:
    probes = [x + delta * _basis(len(x), j) for j in range(len(x))]
    vals = _evaluate_many(lambda p: _residual(f, p), probes, parallel, workers)
    jac = np.empty((len(r0), len(x)))
    for j, rj in enumerate(vals):
        if not np.all(np.isfinite(rj)):
            raise ValueError(f"probe along axis {j} is not finite")
        jac[:, j] = (rj - r0) / delta
    return jac


def minimize(f, x0, opts: LmOptions = LmOptions()) -> tuple[np.ndarray, LmTrace]:
    """Minimize sum(r(x)^2) for a scalar or vector residual function f.

    Every iteration re-estimates the Jacobian from dim(x) forward probes,
    solves the damped normal equations, and accepts the trial point only if
    the squared cost decreases; rejected trials strictly increase the
    damping. Deterministic given opts, including with parallel probes.
    """
    x = np.asarray(x0, dtype=float).copy()
    r = _residual(f, x)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual is not finite at the starting point")
    fval = float(r @ r)
    trace = LmTrace()
    mu = -1.0
    nu = 2.0
    prev_accepted_fval = None
    small_improvements = 0

    for _ in range(opts.max_iterations):
        jac = _jacobian(f, x, r, opts.delta, opts.parallel_probes, opts.workers)
        a = jac.T @ jac
        g = jac.T @ r
        if float(np.max(np.abs(g))) <= opts.gradient_tol * (1.0 + fval):
            trace.stop_reason = "gradient"
            break
        if mu < 0.0:
            mu = opts.initial_damping * max(float(np.trace(a)) / len(x), 1e-30)

        h = np.linalg.solve(a + mu * np.eye(len(x)), -g)
        step_norm = float(np.linalg.norm(h))
        if step_norm <= opts.step_norm_tol:
            trace.append(x, fval, mu, step_norm, False)
            trace.stop_reason = "step_norm"
            break

        r_new = _residual(f, x + h)
        f_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
        predicted = float(h @ (mu * h - g))
        rho = (fval - f_new) / predicted if predicted > 0.0 else -1.0

        if np.isfinite(f_new) and f_new < fval and rho > 0.0:
            x = x + h
            r, fval = r_new, f_new
            mu *= min(1.0, max(1e-8, 1.0 - (2.0 * rho - 1.0) ** 3))
            nu = 2.0
            trace.append(x, fval, mu, step_norm, True)
            if prev_accepted_fval is not None:
                rel = (prev_accepted_fval - fval) / max(prev_accepted_fval, 1e-300)
                small_improvements = small_improvements + 1 if rel < opts.cost_improvement_tol else 0
                if small_improvements >= 2:
                    trace.stop_reason = "improvement"
                    break
            prev_accepted_fval = fval
        else:
            trace.append(x, fval, mu, step_norm, False)
            mu *= nu
            nu *= 2.0
    else:
        trace.stop_reason = "max_iterations"
    return x, trace


@dataclass
class FoldOptimization:
    trajectories: list
    trace: LmTrace
    no_progress: bool


def optimize_fold_step(scene: FoldScene, arms: int, opts: LmOptions = LmOptions()) -> FoldOptimization:
    """Optimize one fold step's trajectories, starting from the lifted-chord
    initialization. Returns the initialization with a no-progress flag if
    every iteration was rejected."""
    if arms not in (1, 2):
        raise ValueError("arms must be 1 or 2")
    if len(scene.arms) != arms:
        raise ValueError(f"scene has {len(scene.arms)} arms, expected {arms}")
    init = [trajectory.initialize(a.p0, a.p3) for a in scene.arms]
    x0 = trajectory.pack_variable(init)

    def residual(x):
        return objective(x, scene).cost

    x_opt, trace = minimize(residual, x0, opts)
    curves = trajectory.unpack_variable(x_opt, scene.endpoints())
    return FoldOptimization(curves, trace, trace.no_progress)
