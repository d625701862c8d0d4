"""Key-point localization: fit a semantic contour template to a garment mask.

The template is a closed polygon whose semantically meaningful vertices
(sleeve ends, waist corners, ...) carry unique IDs. Fitting minimizes a fit
energy against a signed distance field of the mask plus stretch and bend
regularizers against a reference contour, using the same secant
Levenberg-Marquardt machinery as the trajectory optimizer. Between rounds
the contour is resampled (subdivide long segments, merge short ones) and
the reference is reset to the current state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .optimizer import LmOptions, minimize


@dataclass(frozen=True)
class ContourTemplate:
    """Closed 2D contour with per-vertex feature flags and unique feature IDs
    (one ID per flagged vertex, in loop order)."""

    vertices: np.ndarray
    feature_flags: np.ndarray
    feature_ids: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        flags = np.asarray(self.feature_flags, dtype=bool).reshape(-1)
        ids = tuple(str(i) for i in self.feature_ids)
        if len(v) < 3:
            raise ValueError("contour needs at least 3 vertices")
        if len(flags) != len(v):
            raise ValueError("one feature flag per vertex required")
        if len(ids) != int(flags.sum()):
            raise ValueError("one feature ID per flagged vertex required")
        if len(set(ids)) != len(ids):
            raise ValueError("feature IDs must be unique")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "feature_flags", flags)
        object.__setattr__(self, "feature_ids", ids)

    def id_per_vertex(self) -> list:
        out = [None] * len(self.vertices)
        ids = iter(self.feature_ids)
        for i in np.flatnonzero(self.feature_flags):
            out[i] = next(ids)
        return out

    def feature_positions(self) -> dict:
        return dict(zip(self.feature_ids, self.vertices[self.feature_flags]))

    def to_json_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "feature_flags": self.feature_flags.astype(int).tolist(),
            "feature_ids": list(self.feature_ids),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ContourTemplate":
        return cls(
            np.asarray(data["vertices"], dtype=float),
            np.asarray(data["feature_flags"], dtype=bool),
            tuple(data["feature_ids"]),
        )


@dataclass(frozen=True)
class DistanceField:
    """Signed Euclidean distances in meters (negative inside the mask).

    grid[r, c] is the distance at world point origin + (c, r) * resolution;
    the default origin puts cell (0, 0)'s center at half a cell from the
    mask corner, matching the raster convention of fixtures.render_mask.
    """

    grid: np.ndarray
    resolution: float
    origin: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    def sample(self, points) -> np.ndarray:
        """Bilinear interpolation at world points (n, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fx = (pts[:, 0] - self.origin[0]) / self.resolution
        fy = (pts[:, 1] - self.origin[1]) / self.resolution
        h, w = self.grid.shape
        if np.any(fx < 0) or np.any(fy < 0) or np.any(fx > w - 1) or np.any(fy > h - 1):
            raise ValueError("point outside the distance field extent")
        x0 = np.minimum(fx.astype(int), w - 2)
        y0 = np.minimum(fy.astype(int), h - 2)
        tx = fx - x0
        ty = fy - y0
        g = self.grid
        val = (
            g[y0, x0] * (1 - tx) * (1 - ty)
            + g[y0, x0 + 1] * tx * (1 - ty)
            + g[y0 + 1, x0] * (1 - tx) * ty
            + g[y0 + 1, x0 + 1] * tx * ty
        )
        return val if np.ndim(points) > 1 else float(val[0])


def distance_field(mask: np.ndarray, resolution: float, origin=None) -> DistanceField:
    """Exact signed Euclidean distance transform of a binary mask.

    For each foreground cell, minus the distance to the nearest background
    cell; for each background cell, plus the distance to the nearest
    foreground cell (two exact transforms).
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2D")
    n_fg = int(m.sum())
    if n_fg == 0 or n_fg == m.size:
        raise ValueError("mask must contain both foreground and background")
    sdf = ndimage.distance_transform_edt(~m) - ndimage.distance_transform_edt(m)
    if origin is None:
        origin = (0.5 * resolution, 0.5 * resolution)
    return DistanceField(sdf * resolution, float(resolution), np.asarray(origin, dtype=float))


# ---------------------------------------------------------------------------
# energies


def _segment_lengths(contour: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.roll(contour, -1, axis=0) - contour, axis=1)


def fit_energy(contour: np.ndarray, field: DistanceField) -> float:
    """Sum over segments of squared field distance at the midpoint, weighted
    by segment length."""
    c = np.asarray(contour, dtype=float)
    mids = 0.5 * (c + np.roll(c, -1, axis=0))
    lens = _segment_lengths(c)
    d = field.sample(mids)
    return float(np.sum(d * d * lens))


def stretch_energy(contour: np.ndarray, reference: np.ndarray) -> float:
    """Half the reference-length-weighted squared relative elongation."""
    c = np.asarray(contour, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if c.shape != ref.shape:
        raise ValueError("contour and reference must have matching segment counts")
    l = _segment_lengths(c)
    lr = _segment_lengths(ref)
    if np.any(lr < 1e-12):
        raise ValueError("reference has a zero-length segment")
    return float(0.5 * np.sum((l / lr - 1.0) ** 2 * lr))


def _interior_angles(contour: np.ndarray) -> np.ndarray:
    """Unsigned angle at each vertex between its two adjacent segments."""
    prev = np.roll(contour, 1, axis=0) - contour
    nxt = np.roll(contour, -1, axis=0) - contour
    dot = np.sum(prev * nxt, axis=1)
    cross = prev[:, 0] * nxt[:, 1] - prev[:, 1] * nxt[:, 0]
    return np.arctan2(np.abs(cross), dot)


def bend_energy(contour: np.ndarray, reference: np.ndarray) -> float:
    """Half the weighted squared relative change of interior angles; weights
    are the mean adjacent reference segment lengths."""
    c = np.asarray(contour, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if c.shape != ref.shape:
        raise ValueError("contour and reference must have matching vertex counts")
    if np.any(_segment_lengths(c) < 1e-12) or np.any(_segment_lengths(ref) < 1e-12):
        raise ValueError("zero-length segment")
    theta = _interior_angles(c)
    theta_ref = _interior_angles(ref)
    if np.any(theta_ref < 1e-9):
        raise ValueError("degenerate (zero) angle in the reference contour")
    lr = _segment_lengths(ref)
    weights = 0.5 * (np.roll(lr, 1) + lr)
    return float(0.5 * np.sum((theta / theta_ref - 1.0) ** 2 * weights))


def stretch_energy_gradient(contour: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Analytic d(stretch_energy)/d(vertices), shape (n, 2)."""
    c = np.asarray(contour, dtype=float)
    ref = np.asarray(reference, dtype=float)
    l = _segment_lengths(c)
    lr = _segment_lengths(ref)
    dEdl = l / lr - 1.0
    seg = (np.roll(c, -1, axis=0) - c) / l[:, None]
    grad = np.zeros_like(c)
    # segment i runs vertex i -> i+1; dl/d v_{i+1} = unit, dl/d v_i = -unit
    np.add.at(grad, (np.arange(len(c)) + 1) % len(c), dEdl[:, None] * seg)
    np.add.at(grad, np.arange(len(c)), -dEdl[:, None] * seg)
    return grad


def bend_energy_gradient(contour: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Analytic d(bend_energy)/d(vertices), shape (n, 2)."""
    c = np.asarray(contour, dtype=float)
    ref = np.asarray(reference, dtype=float)
    n = len(c)
    theta = _interior_angles(c)
    theta_ref = _interior_angles(ref)
    lr = _segment_lengths(ref)
    weights = 0.5 * (np.roll(lr, 1) + lr)
    dEdtheta = (theta / theta_ref - 1.0) * weights / theta_ref

    u = np.roll(c, 1, axis=0) - c   # toward previous vertex
    w = np.roll(c, -1, axis=0) - c  # toward next vertex
    s = u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]
    d = np.sum(u * w, axis=1)
    denom = s * s + d * d
    sign = np.sign(s)
    sign[sign == 0.0] = 1.0
    # theta = atan2(|s|, d); d theta/d u and /d w via the signed atan2 gradient
    dth_du = (sign * np.column_stack([w[:, 1], -w[:, 0]]) * d[:, None] - np.abs(s)[:, None] * w) / denom[:, None]
    dth_dw = (sign * np.column_stack([-u[:, 1], u[:, 0]]) * d[:, None] - np.abs(s)[:, None] * u) / denom[:, None]

    grad = np.zeros_like(c)
    idx = np.arange(n)
    np.add.at(grad, (idx - 1) % n, dEdtheta[:, None] * dth_du)
    np.add.at(grad, (idx + 1) % n, dEdtheta[:, None] * dth_dw)
    np.add.at(grad, idx, -dEdtheta[:, None] * (dth_du + dth_dw))
    return grad


# ---------------------------------------------------------------------------
# resampling


def resample(template: ContourTemplate, split_threshold: float, merge_threshold: float) -> ContourTemplate:
    """Subdivide segments longer than split_threshold (new vertices are
    non-features) and merge adjacent short segments at non-feature vertices.
    Feature vertices are never removed and keep their cyclic order."""
    if split_threshold <= 2.0 * merge_threshold:
        raise ValueError("split_threshold must exceed twice merge_threshold")
    verts = [tuple(p) for p in template.vertices]
    ids = template.id_per_vertex()

    # split pass
    out_v, out_id = [], []
    n = len(verts)
    for i in range(n):
        a = np.array(verts[i])
        b = np.array(verts[(i + 1) % n])
        out_v.append(verts[i])
        out_id.append(ids[i])
        length = float(np.hypot(*(b - a)))
        pieces = max(1, int(np.ceil(length / split_threshold - 1e-12)))
        for k in range(1, pieces):
            out_v.append(tuple(a + (b - a) * (k / pieces)))
            out_id.append(None)

    # merge pass: drop non-feature vertices whose adjacent segments are both short
    changed = True
    while changed and len(out_v) > 3:
        changed = False
        m = len(out_v)
        for i in range(m):
            if out_id[i] is not None:
                continue
            prev_len = float(np.hypot(*(np.array(out_v[i]) - out_v[i - 1])))
            next_len = float(np.hypot(*(np.array(out_v[(i + 1) % m]) - out_v[i])))
            if prev_len < merge_threshold and next_len < merge_threshold:
                del out_v[i]
                del out_id[i]
                changed = True
                break

    flags = np.array([i is not None for i in out_id], dtype=bool)
    feature_ids = tuple(i for i in out_id if i is not None)
    return ContourTemplate(np.asarray(out_v, dtype=float), flags, feature_ids)


# ---------------------------------------------------------------------------
# registration


@dataclass
class FittedContour:
    vertices: np.ndarray
    reference: np.ndarray
    feature_map: dict
    energies: tuple
    warning: str | None = None


def _total_energy(contour, reference, field, kappa, beta) -> tuple:
    ef = fit_energy(contour, field)
    es = stretch_energy(contour, reference)
    eb = bend_energy(contour, reference)
    return ef + kappa * es + beta * eb, (ef, es, eb)


def _residuals(x, reference, field, kappa, beta) -> np.ndarray:
    """Residual vector whose squared sum equals the total energy."""
    c = x.reshape(-1, 2)
    mids = 0.5 * (c + np.roll(c, -1, axis=0))
    lens = _segment_lengths(c)
    r_fit = field.sample(mids) * np.sqrt(lens)
    lr = _segment_lengths(reference)
    r_stretch = np.sqrt(0.5 * kappa * lr) * (lens / lr - 1.0)
    theta = _interior_angles(c)
    theta_ref = _interior_angles(reference)
    weights = 0.5 * (np.roll(lr, 1) + lr)
    r_bend = np.sqrt(0.5 * beta * weights) * (theta / theta_ref - 1.0)
    return np.concatenate([r_fit, r_stretch, r_bend])


def register(
    template: ContourTemplate,
    mask: np.ndarray,
    kappa: float = 10.0,
    beta: float = 1.0,
    resolution: float = 1.0,
    max_rounds: int = 10,
) -> FittedContour:
    """Fit the template to the mask and return the deformed contour with the
    located feature points.

    The template is first translated so its centroid matches the mask
    foreground centroid, then rounds of LM minimization alternate with
    resampling and reference updates until the energy reduction stalls.
    """
    field = distance_field(mask, resolution)
    fg = np.argwhere(np.asarray(mask).astype(bool))
    mask_centroid = np.array([fg[:, 1].mean() + 0.5, fg[:, 0].mean() + 0.5]) * resolution
    t_centroid = template.vertices.mean(axis=0)
    diag = float(np.hypot(*mask.shape)) * resolution
    if float(np.linalg.norm(mask_centroid - t_centroid)) > 0.5 * diag:
        raise ValueError("template does not roughly overlap the mask")

    current = replace(template, vertices=template.vertices + (mask_centroid - t_centroid))
    split_threshold = 4.0 * resolution
    merge_threshold = 1.5 * resolution

    lm = LmOptions(delta=0.25 * resolution, max_iterations=30, step_norm_tol=1e-4 * resolution)
    best = None
    prev_energy = None
    rising = 0
    warning = None

    for _ in range(max_rounds):
        reference = current.vertices.copy()
        try:
            x_opt, _ = minimize(
                lambda x: _residuals(x, reference, field, kappa, beta),
                current.vertices.ravel(),
                lm,
            )
        except ValueError:
            warning = "contour left the distance field"
            break
        current = replace(current, vertices=x_opt.reshape(-1, 2))
        energy, parts = _total_energy(current.vertices, reference, field, kappa, beta)
        fitted = FittedContour(
            current.vertices.copy(), reference, current.feature_positions(), parts
        )
        if best is None or energy < best[0]:
            best = (energy, fitted)
        if prev_energy is not None:
            if energy > prev_energy:
                rising += 1
                if rising >= 5:
                    warning = "energy increased for 5 consecutive rounds"
                    break
            else:
                rising = 0
                if (prev_energy - energy) / max(prev_energy, 1e-300) < 1e-4:
                    prev_energy = energy
                    break
        prev_energy = energy
        current = resample(current, split_threshold, merge_threshold)

    result = best[1]
    result.warning = warning
    return result


# ---------------------------------------------------------------------------
# binary PGM (P5) masks


def save_pgm(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).astype(bool)
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((m.astype(np.uint8) * 255).tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif data[i : i + 1].isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ValueError(f"{path}: corrupt PGM header") from exc
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    raster = data[i + 1 : i + 1 + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w) > 127
