"""Folding objective: trajectory length plus weighted fold dissimilarity.

The dissimilarity between the target and simulated folded shapes is the
area-weighted mean distance between corresponding triangle barycenters,
normalized by the target's total surface area (both sides). Correspondence
is by triangle index, which is well-defined here because the target is
constructed from the same mesh.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import clothsim, trajectory
from .clothsim import GraspConstraint, SimParams, SimulationDiverged
from .mesh import TriangleMesh, triangle_metrics

_LOG_LOCK = threading.Lock()


@dataclass(frozen=True)
class FoldLine:
    """Directed 2D line in the table plane: a point and a unit direction."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=float).reshape(2)
        d = np.asarray(self.direction, dtype=float).reshape(2)
        n = float(np.hypot(*d))
        if n < 1e-12:
            raise ValueError("fold line direction is degenerate")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "direction", d / n)

    def signed_distance(self, xy) -> np.ndarray:
        """Positive on the left of the direction vector."""
        rel = np.asarray(xy, dtype=float) - self.point
        return self.direction[0] * rel[..., 1] - self.direction[1] * rel[..., 0]

    def reflect(self, xy) -> np.ndarray:
        rel = np.atleast_2d(np.asarray(xy, dtype=float)) - self.point
        along = rel @ self.direction
        proj = np.outer(along, self.direction)
        out = self.point + 2.0 * proj - rel
        return out.reshape(np.shape(xy))

    @staticmethod
    def perpendicular_bisector(a, b) -> "FoldLine":
        a = np.asarray(a, dtype=float)[:2]
        b = np.asarray(b, dtype=float)[:2]
        d = b - a
        return FoldLine(0.5 * (a + b), np.array([-d[1], d[0]]))


@dataclass
class FoldTarget:
    """Desired folded shape, with its total two-sided surface area."""

    target_mesh: TriangleMesh
    total_area: float
    warning: str | None = None

    def __post_init__(self):
        _, areas = triangle_metrics(self.target_mesh)
        if abs(float(np.sum(areas)) - self.total_area) > 1e-9:
            raise ValueError("total_area does not match the mesh's triangle areas")

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, warning: str | None = None) -> "FoldTarget":
        _, areas = triangle_metrics(mesh)
        return cls(mesh, float(np.sum(areas)), warning)


def dissimilarity(target: FoldTarget, simulated: TriangleMesh) -> float:
    """Area-weighted mean barycenter distance, in meters."""
    tm = target.target_mesh
    if simulated.num_triangles != tm.num_triangles:
        raise ValueError(
            f"triangle count mismatch: target {tm.num_triangles}, simulated {simulated.num_triangles}"
        )
    yb, areas = triangle_metrics(tm)
    qb, _ = triangle_metrics(simulated)
    dist = np.linalg.norm(qb - yb, axis=1)
    return float(np.sum(dist * areas) / target.total_area)


def make_fold_target(
    mesh: TriangleMesh, fold_line: FoldLine, side: int = 1, layer_gap: float = 0.002
) -> FoldTarget:
    """Reflect the selected half-plane across the fold line, raised by
    `layer_gap`. Triangle indices are untouched so correspondence by index
    survives. A fold line missing the mesh entirely yields the identity
    target with a warning."""
    if side not in (-1, 1):
        raise ValueError("side must be +1 or -1")
    xy = mesh.vertices[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    corner_sd = fold_line.signed_distance(corners)
    if np.all(corner_sd > 0.0) or np.all(corner_sd < 0.0):
        return FoldTarget.from_mesh(mesh.copy(), warning="fold line outside mesh bounding box")
    sd = fold_line.signed_distance(xy) * side
    selected = sd > 1e-9
    out = mesh.copy()
    out.vertices[selected, :2] = fold_line.reflect(xy[selected])
    out.vertices[selected, 2] += layer_gap
    return FoldTarget.from_mesh(out)


@dataclass(frozen=True)
class ArmSpec:
    """Fixed endpoints and grasp vertex set of one arm in a fold step."""

    p0: np.ndarray
    p3: np.ndarray
    grasp_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float).reshape(3))
        object.__setattr__(self, "p3", np.asarray(self.p3, dtype=float).reshape(3))
        object.__setattr__(self, "grasp_ids", tuple(int(i) for i in self.grasp_ids))


@dataclass
class FoldScene:
    """Everything one objective evaluation needs besides the variable."""

    mesh: TriangleMesh
    params: SimParams
    arms: list[ArmSpec]
    target: FoldTarget
    duration: float = 4.0
    settle_time: float = 1.0
    alpha: float = 1e3
    arclength_tol: float = 1e-6
    run_log: str | None = None

    def endpoints(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(a.p0, a.p3) for a in self.arms]


@dataclass(frozen=True)
class CostReport:
    length: float
    dissimilarity: float
    cost: float
    squared_cost: float
    alpha: float

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.cost)

    def to_json_dict(self) -> dict:
        return {
            "length": self.length,
            "dissimilarity": self.dissimilarity,
            "cost": self.cost,
            "squared_cost": self.squared_cost,
            "alpha": self.alpha,
        }


def simulate_candidate(x, scene: FoldScene) -> TriangleMesh:
    """Run the fold for trajectory variable x; returns the settled mesh."""
    curves = trajectory.unpack_variable(np.asarray(x, dtype=float), scene.endpoints())
    constraints = [
        GraspConstraint(a.grasp_ids, c, 0.0, scene.duration)
        for a, c in zip(scene.arms, curves)
    ]
    return clothsim.simulate_fold(scene.mesh, scene.params, constraints, scene.settle_time)


def objective(x, scene: FoldScene, alpha: float | None = None) -> CostReport:
    """Cost C = trajectory length + alpha * dissimilarity; minimized as C^2.

    Deterministic for identical inputs. On a diverged simulation the report
    carries infinite cost so the optimizer rejects the step.
    """
    if alpha is None:
        alpha = scene.alpha
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("trajectory variable must be finite")
    curves = trajectory.unpack_variable(x, scene.endpoints())
    length = sum(c.arc_length(scene.arclength_tol) for c in curves)
    try:
        folded = simulate_candidate(x, scene)
    except SimulationDiverged:
        report = CostReport(math.inf, math.inf, math.inf, math.inf, alpha)
    else:
        d = dissimilarity(scene.target, folded)
        cost = length + alpha * d
        report = CostReport(length, d, cost, cost * cost, alpha)
    if scene.run_log is not None:
        line = json.dumps(report.to_json_dict()) + "\n"
        with _LOG_LOCK, open(scene.run_log, "a", encoding="utf-8") as fh:
            fh.write(line)
    return report


def objective_value(x, scene: FoldScene, alpha: float | None = None) -> float:
    return objective(x, scene, alpha).cost
