"""Deterministic cloth simulator for garment folding.

Dynamics: gravity and viscous damping applied explicitly, elastic terms
(stretch / in-plane / bend) as compliant constraint projections, table
contact with velocity-level Coulomb friction, and grasp constraints that
drag mesh vertices along a Bezier trajectory with a smoothstep speed
profile. Table tilt is modeled by rotating gravity, keeping the table plane
at z = table_height.

The constraint solver runs a fixed-order Gauss-Seidel sweep, so simulations
are bit-reproducible. That property is load-bearing: the trajectory
optimizer estimates derivatives by finite differences of simulated costs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import step_kernel
from .mesh import TriangleMesh
from .trajectory import BezierTrajectory

_COMPLIANCE_CAP = 1e30


class SimulationDiverged(RuntimeError):
    """A step produced a non-finite position."""

    def __init__(self, vertex: int, time: float):
        super().__init__(f"simulation diverged at t={time:.4f}s, first bad vertex {vertex}")
        self.vertex = vertex
        self.time = time


class SaturationError(RuntimeError):
    """A parameter search hit the end of its admissible range."""


@dataclass(frozen=True)
class SimParams:
    """Calibrated physical parameters of the cloth/table system.

    Stiffnesses are in force per unit strain; `damping` is a velocity decay
    rate (1/s); `table_tilt` rotates gravity about the y axis so the table
    plane itself stays at z = table_height.
    """

    stretch_stiffness: float = 800.0
    shear_stiffness: float = 10.0
    bend_stiffness: float = 0.05
    friction_mu: float = 0.4
    gravity: float = 9.81
    timestep: float = 1e-3
    damping: float = 2.0
    table_height: float = 0.0
    table_tilt: float = 0.0
    areal_density: float = 0.15
    solver_iterations: int = 10

    def __post_init__(self):
        if self.timestep <= 0.0:
            raise ValueError("timestep must be positive")
        if self.friction_mu < 0.0 or self.damping < 0.0:
            raise ValueError("friction_mu and damping must be non-negative")
        if min(self.stretch_stiffness, self.shear_stiffness, self.bend_stiffness) < 0.0:
            raise ValueError("stiffnesses must be non-negative")
        if self.solver_iterations < 1:
            raise ValueError("need at least one solver iteration")

    def gravity_vector(self) -> np.ndarray:
        g, t = self.gravity, self.table_tilt
        return np.array([g * math.sin(t), 0.0, -g * math.cos(t)])


@dataclass(frozen=True)
class GraspConstraint:
    """A set of vertices dragged rigidly along a trajectory.

    The vertex nearest the trajectory start acts as the anchor; the others
    keep their rest offsets relative to it, mimicking a gripper holding a
    small patch rather than a single point.
    """

    vertex_ids: tuple
    trajectory: BezierTrajectory
    start_time: float = 0.0
    duration: float = 4.0

    def __post_init__(self):
        ids = tuple(sorted(int(i) for i in self.vertex_ids))
        if not ids:
            raise ValueError("grasp needs at least one vertex")
        if self.duration <= 0.0:
            raise ValueError("grasp duration must be positive")
        object.__setattr__(self, "vertex_ids", ids)

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration


@dataclass
class SimState:
    mesh: TriangleMesh
    velocities: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        if len(self.velocities) != self.mesh.num_vertices:
            raise ValueError("velocities length must match vertex count")
        if not np.all(np.isfinite(self.velocities)):
            raise ValueError("velocities must be finite")


def grasp_parameter(start_time: float, duration: float, t: float) -> float:
    """Curve parameter u(t) with a smoothstep profile (zero endpoint speed)."""
    s = (t - start_time) / duration
    s = min(1.0, max(0.0, s))
    return s * s * (3.0 - 2.0 * s)


def grasp_region(mesh: TriangleMesh, vertex: int, radius: float = 0.01) -> tuple:
    """The grasp vertex plus its rest-space neighbors within `radius`."""
    d = np.linalg.norm(mesh.rest_vertices - mesh.rest_vertices[vertex], axis=1)
    return tuple(np.flatnonzero(d <= radius).tolist())


def starting_state(mesh: TriangleMesh) -> SimState:
    return SimState(mesh.copy(), np.zeros((mesh.num_vertices, 3)), 0.0)


# ---------------------------------------------------------------------------
# simulation context: welded particle system derived from the mesh


@dataclass
class _SimContext:
    sim_of: np.ndarray           # mesh vertex -> particle
    x: np.ndarray                # particle positions
    v: np.ndarray
    inv_mass: np.ndarray
    mass: np.ndarray
    edges: np.ndarray
    edge_rest: np.ndarray
    edge_at: np.ndarray
    tris: np.ndarray
    tri_rest_area: np.ndarray
    area_at: float
    bpairs: np.ndarray
    bpair_rest: np.ndarray
    bpair_at: np.ndarray
    spairs: np.ndarray
    spair_rest: np.ndarray
    time: float = 0.0

    def expand_positions(self) -> np.ndarray:
        return self.x[self.sim_of]

    def expand_velocities(self) -> np.ndarray:
        return self.v[self.sim_of]


def _weld_map(mesh: TriangleMesh) -> tuple[np.ndarray, int]:
    """Particle ids per mesh vertex. For a two-sided mesh, mirrored boundary
    vertices share the particle of their top-layer original."""
    n = mesh.num_vertices
    sim_of = np.arange(n, dtype=np.int64)
    if not mesh.two_sided:
        return sim_of, n
    half = n // 2
    top = TriangleMesh(
        mesh.vertices[:half], mesh.triangles[: mesh.num_triangles // 2],
        mesh.rest_vertices[:half], two_sided=False,
    )
    boundary = top.boundary_vertices()
    sim_of[boundary + half] = boundary
    # compact ids
    used = np.unique(sim_of)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return remap[sim_of], len(used)


def _unique_rows_first(rows: np.ndarray, payload: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, first = np.unique(rows, axis=0, return_index=True)
    first.sort()
    return rows[first], payload[first]


def _build_context(state: SimState, params: SimParams) -> _SimContext:
    mesh = state.mesh
    dt = params.timestep
    sim_of, n_sim = _weld_map(mesh)

    x = np.zeros((n_sim, 3))
    x[sim_of[::-1]] = mesh.vertices[::-1]  # first mesh copy wins for welds
    v = np.zeros((n_sim, 3))
    v[sim_of[::-1]] = state.velocities[::-1]

    from .mesh import _areas

    tri_area = _areas(mesh.rest_vertices, mesh.triangles)
    mass = np.zeros(n_sim)
    vert_mass = np.zeros(mesh.num_vertices)
    np.add.at(vert_mass, mesh.triangles.ravel(), np.repeat(tri_area / 3.0, 3))
    vert_mass *= params.areal_density
    np.add.at(mass, sim_of, vert_mass)
    inv_mass = 1.0 / mass

    # stretch constraints from unique mesh edges
    tri = mesh.triangles
    raw = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    rest_len = np.linalg.norm(
        mesh.rest_vertices[raw[:, 0]] - mesh.rest_vertices[raw[:, 1]], axis=1
    )
    sim_raw = np.sort(sim_of[raw], axis=1)
    edges, edge_rest = _unique_rows_first(sim_raw, rest_len)
    keep = edges[:, 0] != edges[:, 1]
    edges, edge_rest = edges[keep], edge_rest[keep]
    if params.stretch_stiffness > 0.0:
        edge_at = np.minimum(edge_rest / (params.stretch_stiffness * dt * dt), _COMPLIANCE_CAP)
    else:
        edge_at = np.full(len(edges), _COMPLIANCE_CAP)

    tris = sim_of[tri]
    area_at = 1.0 / (params.shear_stiffness * dt * dt) if params.shear_stiffness > 0.0 else _COMPLIANCE_CAP

    bpairs, bpair_rest = _bend_pairs(mesh, sim_of)
    if params.bend_stiffness > 0.0:
        bpair_at = np.minimum(bpair_rest / (params.bend_stiffness * dt * dt), _COMPLIANCE_CAP)
    else:
        bpair_at = np.full(len(bpairs), _COMPLIANCE_CAP)

    spairs, spair_rest = _separation_pairs(mesh, sim_of)
    return _SimContext(
        sim_of, x, v, inv_mass, mass, edges, edge_rest, edge_at,
        tris, tri_area, area_at, bpairs, bpair_rest, bpair_at,
        spairs, spair_rest, time=state.time,
    )


def _bend_pairs(mesh: TriangleMesh, sim_of: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Opposite-vertex pairs across interior edges (mass-spring bend proxy)."""
    tri = sim_of[mesh.triangles]
    seen: dict = {}
    pairs = []
    for t in range(len(tri)):
        for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            i, j, opp = tri[t, a], tri[t, b], tri[t, c]
            key = (min(i, j), max(i, j))
            if key in seen:
                other = seen[key]
                if other != opp:
                    pairs.append((min(other, opp), max(other, opp)))
            else:
                seen[key] = opp
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    pairs = np.asarray(sorted(set(pairs)), dtype=np.int64)
    # rest distance from any mesh vertex mapping to each particle
    rep = np.zeros(int(sim_of.max()) + 1, dtype=np.int64)
    rep[sim_of[::-1]] = np.arange(mesh.num_vertices)[::-1]
    rest = np.linalg.norm(
        mesh.rest_vertices[rep[pairs[:, 0]]] - mesh.rest_vertices[rep[pairs[:, 1]]], axis=1
    )
    keep = rest > 1e-12
    return pairs[keep], rest[keep]


def _separation_pairs(mesh: TriangleMesh, sim_of: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not mesh.two_sided:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    half = mesh.num_vertices // 2
    top = np.arange(half)
    bottom = top + half
    keep = sim_of[top] != sim_of[bottom]
    pairs = np.column_stack([sim_of[top[keep]], sim_of[bottom[keep]]])
    rest = np.linalg.norm(mesh.rest_vertices[top[keep]] - mesh.rest_vertices[bottom[keep]], axis=1)
    ok = rest > 1e-12
    return pairs[ok].astype(np.int64), rest[ok]


def _grasp_arrays(
    ctx: _SimContext,
    mesh: TriangleMesh,
    constraints: list[GraspConstraint],
    t: float,
    release_time: float,
):
    """Particle ids and pinned positions for all active grasps at time t."""
    if not constraints or t > release_time:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    ids, pos = [], []
    for c in constraints:
        anchor, offsets = _anchor_offsets(mesh, c)
        u = grasp_parameter(c.start_time, c.duration, t)
        target = c.trajectory.evaluate(u)
        sim_ids = ctx.sim_of[np.asarray(c.vertex_ids, dtype=np.int64)]
        uniq, first = np.unique(sim_ids, return_index=True)
        ids.append(uniq)
        pos.append(target + offsets[first])
    return np.concatenate(ids), np.concatenate(pos)


def _anchor_offsets(mesh: TriangleMesh, c: GraspConstraint) -> tuple[int, np.ndarray]:
    ids = np.asarray(c.vertex_ids, dtype=np.int64)
    start = c.trajectory.evaluate(0.0)
    d = np.linalg.norm(mesh.vertices[ids] - start, axis=1)
    anchor = ids[int(np.argmin(d))]
    offsets = mesh.rest_vertices[ids] - mesh.rest_vertices[anchor]
    return int(anchor), offsets


def _advance(
    ctx: _SimContext,
    mesh: TriangleMesh,
    params: SimParams,
    constraints: list[GraspConstraint],
    n_steps: int,
    release_time: float,
    on_step=None,
) -> None:
    dt = params.timestep
    gvec = params.gravity_vector()
    inv_mass = ctx.inv_mass
    for _ in range(n_steps):
        t_new = ctx.time + dt
        gids, gpos = _grasp_arrays(ctx, mesh, constraints, t_new, release_time)
        if len(gids):
            eff = inv_mass.copy()
            eff[gids] = 0.0
        else:
            eff = inv_mass
        bad = step_kernel(
            ctx.x, ctx.v, eff, gids, gpos,
            ctx.edges, ctx.edge_rest, ctx.edge_at,
            ctx.tris, ctx.tri_rest_area, ctx.area_at,
            ctx.bpairs, ctx.bpair_rest, ctx.bpair_at,
            ctx.spairs, ctx.spair_rest,
            gvec[0], gvec[1], gvec[2],
            params.damping, dt, params.table_height, params.friction_mu,
            params.solver_iterations,
        )
        ctx.time = t_new
        if bad >= 0:
            mesh_vertex = int(np.flatnonzero(ctx.sim_of == bad)[0])
            raise SimulationDiverged(mesh_vertex, ctx.time)
        if on_step is not None:
            on_step(ctx.time, ctx.expand_positions())


def _check_start_positions(mesh: TriangleMesh, constraints: list[GraspConstraint]) -> None:
    for c in constraints:
        anchor, _ = _anchor_offsets(mesh, c)
        gap = float(np.linalg.norm(mesh.vertices[anchor] - c.trajectory.evaluate(0.0)))
        if gap > 5e-3:
            raise ValueError(
                f"trajectory starts {gap * 1e3:.1f} mm away from grasp vertex {anchor} (limit 5 mm)"
            )


def step(state: SimState, params: SimParams, constraints: list[GraspConstraint] = ()) -> SimState:
    """Advance one timestep. Pure: returns a new state.

    For long runs prefer simulate_fold, which builds the particle system once.
    """
    for c in constraints:
        ids = np.asarray(c.vertex_ids)
        if ids.max() >= state.mesh.num_vertices:
            raise ValueError(f"grasp vertex {ids.max()} out of range")
    ctx = _build_context(state, params)
    release = max((c.end_time for c in constraints), default=math.inf)
    _advance(ctx, state.mesh, params, list(constraints), 1, release)
    new_mesh = state.mesh.copy()
    new_mesh.vertices = ctx.expand_positions()
    return SimState(new_mesh, ctx.expand_velocities(), ctx.time)


def simulate_fold(
    mesh: TriangleMesh,
    params: SimParams,
    constraints: list[GraspConstraint],
    settle_time: float = 1.0,
    on_step=None,
) -> TriangleMesh:
    """Run all grasp phases, release, then settle. Returns the final mesh."""
    constraints = list(constraints)
    _check_start_positions(mesh, constraints)
    state = starting_state(mesh)
    ctx = _build_context(state, params)
    dt = params.timestep
    release = max((c.end_time for c in constraints), default=0.0)
    n_motion = int(round(release / dt))
    _advance(ctx, mesh, params, constraints, n_motion, release, on_step)
    n_settle = int(round(settle_time / dt))
    _advance(ctx, mesh, params, [], n_settle, math.inf, on_step)
    out = mesh.copy()
    out.vertices = ctx.expand_positions()
    return out


def kinetic_energy_per_kg(ctx_mass: np.ndarray, velocities: np.ndarray) -> float:
    ke = 0.5 * float(np.sum(ctx_mass * np.sum(velocities**2, axis=1)))
    return ke / float(np.sum(ctx_mass))


def settle(mesh: TriangleMesh, params: SimParams, duration: float) -> tuple[TriangleMesh, float]:
    """Simulate with no actuation; returns final mesh and kinetic energy per kg."""
    state = starting_state(mesh)
    ctx = _build_context(state, params)
    _advance(ctx, mesh, params, [], int(round(duration / params.timestep)), math.inf)
    out = mesh.copy()
    out.vertices = ctx.expand_positions()
    return out, kinetic_energy_per_kg(ctx.mass, ctx.v)


def _equilibrium(ctx: _SimContext, mesh, params, constraints, release,
                 chunk: float = 0.25, speed_tol: float = 1e-4, max_time: float = 8.0) -> None:
    dt = params.timestep
    n_chunk = int(round(chunk / dt))
    while ctx.time < max_time:
        _advance(ctx, mesh, params, constraints, n_chunk, release)
        if float(np.max(np.linalg.norm(ctx.v, axis=1))) < speed_tol:
            return


def hang_lengths(mesh: TriangleMesh, params: SimParams, pick_vertex: int) -> tuple[float, float]:
    """Hang the garment from one vertex; return (L1, L2).

    L1 is the equilibrium distance from the pick point to the lowest vertex;
    L2 is the same two material points' distance in the rest configuration.
    The table is moved far below so the garment hangs freely.
    """
    if not 0 <= pick_vertex < mesh.num_vertices:
        raise ValueError(f"pick vertex {pick_vertex} out of range")
    diag = float(np.linalg.norm(mesh.rest_vertices.max(axis=0) - mesh.rest_vertices.min(axis=0)))
    p = replace(params, table_height=float(mesh.rest_vertices[:, 2].min()) - 2.0 * diag - 1.0, table_tilt=0.0)
    pin = mesh.vertices[pick_vertex]
    hold = BezierTrajectory(np.tile(pin, (4, 1)))
    c = GraspConstraint((pick_vertex,), hold, 0.0, 1e9)
    state = starting_state(mesh)
    ctx = _build_context(state, p)
    _equilibrium(ctx, mesh, p, [c], math.inf)
    final = ctx.expand_positions()
    low = int(np.argmin(final[:, 2]))
    l1 = float(np.linalg.norm(final[pick_vertex] - final[low]))
    l2 = float(np.linalg.norm(mesh.rest_vertices[pick_vertex] - mesh.rest_vertices[low]))
    return l1, l2


def _slides(mesh: TriangleMesh, params: SimParams, tilt: float,
            window: float = 2.0) -> bool:
    """Does the resting garment's centroid drift >5% of its diagonal?"""
    p = replace(params, table_tilt=tilt)
    rest = mesh.rest_vertices
    diag = float(np.linalg.norm(rest[:, :2].max(axis=0) - rest[:, :2].min(axis=0)))
    threshold = 0.05 * diag
    start = mesh.vertices[:, :2].mean(axis=0)
    state = starting_state(mesh)
    ctx = _build_context(state, p)
    dt = p.timestep
    n_chunk = int(round(0.1 / dt))
    moved = False
    while ctx.time < window - 1e-9:
        _advance(ctx, mesh, p, [], n_chunk, math.inf)
        drift = float(np.linalg.norm(ctx.expand_positions()[:, :2].mean(axis=0) - start))
        if drift > threshold:
            moved = True
            break
    return moved


def tilt_table_slide_angle(mesh: TriangleMesh, params: SimParams, angle_resolution: float = math.radians(0.5)) -> float:
    """Smallest table tilt (to within angle_resolution) at which the garment
    slides, found by bisection on the slide predicate."""
    if angle_resolution <= 0.0:
        raise ValueError("angle_resolution must be positive")
    hi = math.radians(89.0)
    if not _slides(mesh, params, hi):
        raise SaturationError("no sliding below 89 degrees")
    lo = 0.0
    while hi - lo > angle_resolution:
        mid = 0.5 * (lo + hi)
        if _slides(mesh, params, mid):
            hi = mid
        else:
            lo = mid
    return hi
