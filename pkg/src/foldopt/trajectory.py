"""Cubic Bezier fold trajectories.

A trajectory is a single cubic Bezier curve per arm. The endpoints are pinned
to the grasp start/target positions of a fold step; the two interior control
points are the free variables the optimizer moves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class BezierTrajectory:
    """Cubic Bezier curve through four 3D control points P0..P3 (meters)."""

    control_points: np.ndarray

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        if cp.shape != (4, 3):
            raise ValueError(f"expected 4 control points, got shape {cp.shape}")
        if not np.all(np.isfinite(cp)):
            raise ValueError("control points must be finite")
        object.__setattr__(self, "control_points", cp)

    @property
    def p0(self) -> np.ndarray:
        return self.control_points[0]

    @property
    def p3(self) -> np.ndarray:
        return self.control_points[3]

    def evaluate(self, u):
        """Point on the curve at parameter u in [0, 1].

        Accepts a scalar or an array of parameters; returns shape (3,) or
        (len(u), 3) accordingly.
        """
        u_arr = np.asarray(u, dtype=float)
        if np.any(u_arr < 0.0) or np.any(u_arr > 1.0):
            raise ValueError(f"curve parameter outside [0, 1]: {u}")
        v = 1.0 - u_arr
        # Bernstein weights for n=3
        b = np.stack([v**3, 3.0 * v**2 * u_arr, 3.0 * v * u_arr**2, u_arr**3], axis=-1)
        pt = b @ self.control_points
        return pt if u_arr.ndim else np.asarray(pt)

    def derivative(self, u):
        """First derivative dT/du at parameter u."""
        u_arr = np.asarray(u, dtype=float)
        v = 1.0 - u_arr
        d = np.diff(self.control_points, axis=0)
        b = np.stack([v**2, 2.0 * v * u_arr, u_arr**2], axis=-1)
        return 3.0 * (b @ d)

    def split(self, u: float) -> tuple["BezierTrajectory", "BezierTrajectory"]:
        """De Casteljau subdivision into curves spanning [0, u] and [u, 1]."""
        if not 0.0 < u < 1.0:
            raise ValueError(f"split parameter must be strictly inside (0, 1): {u}")
        p = self.control_points
        q = p[:-1] * (1.0 - u) + p[1:] * u
        r = q[:-1] * (1.0 - u) + q[1:] * u
        s = r[0] * (1.0 - u) + r[1] * u
        left = BezierTrajectory(np.array([p[0], q[0], r[0], s]))
        right = BezierTrajectory(np.array([s, r[1], q[2], p[3]]))
        return left, right

    def arc_length(self, tol: float = 1e-6) -> float:
        """Arc length by recursive subdivision, summing chords.

        A piece stops subdividing once its control-polygon length exceeds its
        chord length by less than `tol`; the chord lengths of all terminal
        pieces are summed. Result is within 10*tol of the true length.
        """
        if tol <= 0.0:
            raise ValueError("tolerance must be positive")
        return _chord_sum(self.control_points, tol)

    def scaled(self, matrix: np.ndarray, offset: np.ndarray) -> "BezierTrajectory":
        """Apply an affine map x -> matrix @ x + offset to all control points."""
        return BezierTrajectory(self.control_points @ np.asarray(matrix).T + offset)


def _chord_sum(cp: np.ndarray, tol: float) -> float:
    chord = float(np.linalg.norm(cp[3] - cp[0]))
    poly = float(np.sum(np.linalg.norm(np.diff(cp, axis=0), axis=1)))
    if poly - chord < tol:
        return chord
    q = 0.5 * (cp[:-1] + cp[1:])
    r = 0.5 * (q[:-1] + q[1:])
    s = 0.5 * (r[0] + r[1])
    left = np.array([cp[0], q[0], r[0], s])
    right = np.array([s, r[1], q[2], cp[3]])
    return _chord_sum(left, tol) + _chord_sum(right, tol)


def initialize(p0, p3, h: float = 1.0 / 3.0) -> BezierTrajectory:
    """Initial trajectory: interior points at thirds of the chord, lifted.

    P1 = 2/3 P0 + 1/3 P3 + h * |P0 - P3| * up
    P2 = 1/3 P0 + 2/3 P3 + h * |P0 - P3| * up
    """
    p0 = np.asarray(p0, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    dist = float(np.linalg.norm(p0 - p3))
    if dist < 1e-12:
        raise ValueError("trajectory endpoints coincide")
    lift = h * dist * UP
    p1 = (2.0 * p0 + p3) / 3.0 + lift
    p2 = (p0 + 2.0 * p3) / 3.0 + lift
    return BezierTrajectory(np.array([p0, p1, p2, p3]))


def pack_variable(trajectories: list[BezierTrajectory]) -> np.ndarray:
    """Flatten per-arm interior control points (P1, P2) into one vector."""
    return np.concatenate([t.control_points[1:3].ravel() for t in trajectories])


def unpack_variable(x: np.ndarray, endpoints: list[tuple[np.ndarray, np.ndarray]]) -> list[BezierTrajectory]:
    """Rebuild per-arm curves from the flat variable and fixed (P0, P3) pairs."""
    x = np.asarray(x, dtype=float)
    if x.size != 6 * len(endpoints):
        raise ValueError(f"variable length {x.size} does not match {len(endpoints)} arms")
    out = []
    for k, (p0, p3) in enumerate(endpoints):
        mid = x[6 * k : 6 * k + 6].reshape(2, 3)
        out.append(BezierTrajectory(np.array([np.asarray(p0, float), mid[0], mid[1], np.asarray(p3, float)])))
    return out


def to_json_dict(trajectories: list[BezierTrajectory], duration_s: float) -> dict:
    return {
        "arms": [{"control_points": t.control_points.tolist()} for t in trajectories],
        "duration_s": float(duration_s),
    }


def from_json_dict(data: dict) -> tuple[list[BezierTrajectory], float]:
    arms = [BezierTrajectory(np.array(a["control_points"], dtype=float)) for a in data["arms"]]
    return arms, float(data["duration_s"])


def save_trajectories(path, trajectories: list[BezierTrajectory], duration_s: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json_dict(trajectories, duration_s), fh, indent=2)
        fh.write("\n")


def load_trajectories(path) -> tuple[list[BezierTrajectory], float]:
    with open(path, encoding="utf-8") as fh:
        return from_json_dict(json.load(fh))
