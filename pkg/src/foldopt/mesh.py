"""Garment meshes: construction from a 2D contour and geometric queries.

Meshes are built flat at z=0 from a garment contour, then mirrored into a
two-layer (two-sided) mesh so folded cloth shows layered geometry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import Delaunay
from shapely.geometry import Polygon as ShapelyPolygon


@dataclass(frozen=True)
class Polygon2D:
    """Simple closed polygon, counterclockwise, coordinates in meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise ValueError("polygon needs at least 3 2D points")
        poly = ShapelyPolygon(pts)
        if not poly.is_simple or poly.area <= 0.0:
            raise ValueError("polygon must be simple with positive area")
        if _signed_area(pts) <= 0.0:
            raise ValueError("polygon must be counterclockwise")
        object.__setattr__(self, "points", pts)

    @property
    def area(self) -> float:
        return _signed_area(self.points)

    def to_shapely(self) -> ShapelyPolygon:
        return ShapelyPolygon(self.points)


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass
class TriangleMesh:
    """Triangulated garment mesh with its rest (flat, spread) configuration."""

    vertices: np.ndarray
    triangles: np.ndarray
    rest_vertices: np.ndarray
    two_sided: bool = False

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if len(self.rest_vertices) != n:
            raise ValueError("rest_vertices and vertices must have identical length")
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= n):
            raise ValueError("triangle index out of range")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("triangle repeats a vertex")
        if np.any(_areas(self.rest_vertices, t) <= 0.0):
            raise ValueError("every triangle needs positive rest area")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(
            self.vertices.copy(), self.triangles.copy(), self.rest_vertices.copy(), self.two_sided
        )

    def transformed(self, matrix: np.ndarray, offset=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        """Apply x -> matrix @ x + offset to current and rest vertices."""
        m = np.asarray(matrix, dtype=float)
        off = np.asarray(offset, dtype=float)
        return TriangleMesh(
            self.vertices @ m.T + off, self.triangles.copy(), self.rest_vertices @ m.T + off, self.two_sided
        )

    def boundary_vertices(self) -> np.ndarray:
        """Indices of vertices on edges used by exactly one triangle."""
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return np.unique(uniq[counts == 1])


def _areas(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a = verts[tris[:, 1]] - verts[tris[:, 0]]
    b = verts[tris[:, 2]] - verts[tris[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def triangle_metrics(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-triangle barycenters (n,3) and areas (n,) from current vertices."""
    v, t = mesh.vertices, mesh.triangles
    barycenters = (v[t[:, 0]] + v[t[:, 1]] + v[t[:, 2]]) / 3.0
    return barycenters, _areas(v, t)


def triangulate_contour(contour: Polygon2D, target_edge: float) -> TriangleMesh:
    """Triangulate the inside of a contour into a flat mesh at z=0.

    Boundary edges are resampled to at most `target_edge`; interior points
    come from a regular grid at the same spacing, clipped to the polygon with
    a margin to avoid slivers. Delaunay triangles whose centroid falls
    outside the polygon are discarded. Deterministic for identical inputs.
    """
    if target_edge <= 0.0:
        raise ValueError("target_edge must be positive")
    poly = contour.to_shapely()

    boundary = _resample_boundary(contour.points, target_edge)
    interior = _interior_grid(poly, contour.points, target_edge)
    pts = np.concatenate([boundary, interior]) if len(interior) else boundary

    tri = Delaunay(pts)
    centroids = pts[tri.simplices].mean(axis=1)
    keep = shapely.contains_xy(poly, centroids[:, 0], centroids[:, 1])
    simplices = tri.simplices[keep]

    # drop points that ended up unused (e.g. interior points eaten by the filter)
    used = np.unique(simplices)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    simplices = remap[simplices]
    pts = pts[used]

    # orient counterclockwise seen from +z
    v0, v1, v2 = pts[simplices[:, 0]], pts[simplices[:, 1]], pts[simplices[:, 2]]
    cross = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v1[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])
    flip = cross < 0.0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]

    verts3 = np.column_stack([pts, np.zeros(len(pts))])
    return TriangleMesh(verts3, simplices, verts3.copy(), two_sided=False)


def _resample_boundary(pts: np.ndarray, spacing: float) -> np.ndarray:
    out = []
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        seg = float(np.hypot(*(b - a)))
        pieces = max(1, int(np.ceil(seg / spacing - 1e-12)))
        for k in range(pieces):
            out.append(a + (b - a) * (k / pieces))
    return np.asarray(out)


def _interior_grid(poly: ShapelyPolygon, pts: np.ndarray, spacing: float) -> np.ndarray:
    margin = 0.45 * spacing
    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    xs = np.arange(xmin + spacing, xmax - 0.5 * spacing, spacing)
    ys = np.arange(ymin + spacing, ymax - 0.5 * spacing, spacing)
    if not len(xs) or not len(ys):
        return np.empty((0, 2))
    gx, gy = np.meshgrid(xs, ys)
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    inside = shapely.contains_xy(poly, cand[:, 0], cand[:, 1])
    cand = cand[inside]
    if not len(cand):
        return cand
    dist = shapely.distance(shapely.points(cand), poly.exterior)
    return cand[dist >= margin]


def mirror_two_sided(mesh: TriangleMesh, offset: float = 0.001) -> TriangleMesh:
    """Duplicate a planar mesh into a second layer displaced along +z.

    The mirrored layer's triangles are reversed so outward normals stay
    consistent. Vertex i of the top layer corresponds to vertex i + n of the
    mirrored layer; the simulator welds boundary pairs into single particles.
    """
    if mesh.two_sided:
        raise ValueError("mesh is already two-sided")
    n = mesh.num_vertices
    shift = np.array([0.0, 0.0, float(offset)])
    verts = np.concatenate([mesh.vertices, mesh.vertices + shift])
    rest = np.concatenate([mesh.rest_vertices, mesh.rest_vertices + shift])
    mirrored = mesh.triangles[:, [0, 2, 1]] + n
    tris = np.concatenate([mesh.triangles, mirrored])
    return TriangleMesh(verts, tris, rest, two_sided=True)


# ---------------------------------------------------------------------------
# File formats: OBJ subset (v/f lines) and contour JSON ([[x, y], ...])

def save_obj(path, mesh: TriangleMesh) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path, two_sided: bool | None = None) -> TriangleMesh:
    """Read a v/f-only OBJ. If `two_sided` is None, mirror structure
    (second half of vertices equal to the first half displaced in z) is
    detected automatically."""
    verts, tris = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(p) for p in parts[1:]])
            elif parts[0] == "f" and len(parts) == 4:
                tris.append([int(p) - 1 for p in parts[1:]])
            else:
                raise ValueError(f"{path}:{lineno}: unsupported OBJ line: {line!r}")
    if not verts or not tris:
        raise ValueError(f"{path}: no mesh data")
    v = np.asarray(verts, dtype=float)
    t = np.asarray(tris, dtype=np.int64)
    if two_sided is None:
        two_sided = _looks_mirrored(v)
    return TriangleMesh(v, t, v.copy(), two_sided=two_sided)


def _looks_mirrored(v: np.ndarray) -> bool:
    n = len(v)
    if n % 2:
        return False
    a, b = v[: n // 2], v[n // 2 :]
    if not np.allclose(a[:, :2], b[:, :2], atol=1e-9):
        return False
    dz = b[:, 2] - a[:, 2]
    return bool(np.allclose(dz, dz[0], atol=1e-9))


def save_contour(path, contour: Polygon2D) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(contour.points.tolist(), fh, indent=2)
        fh.write("\n")


def load_contour(path) -> Polygon2D:
    with open(path, encoding="utf-8") as fh:
        pts = json.load(fh)
    return Polygon2D(np.asarray(pts, dtype=float))
