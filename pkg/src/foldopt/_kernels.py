"""Compiled inner loop of the cloth stepper.

Everything here runs single-threaded with a fixed constraint ordering, so
repeated runs on identical inputs are bit-identical. Positions update by
semi-implicit Euler prediction followed by compliant constraint projection;
table contact applies Coulomb friction at the velocity level, which
reproduces the block-on-incline law (slide onset at atan(mu)) exactly.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def step_kernel(
    x,
    v,
    inv_mass,
    grasp_idx,
    grasp_pos,
    edges,
    edge_rest,
    edge_at,
    tris,
    tri_rest_area,
    area_at,
    bpairs,
    bpair_rest,
    bpair_at,
    spairs,
    spair_rest,
    gx,
    gy,
    gz,
    damping,
    dt,
    table_z,
    mu,
    n_iter,
):
    n = x.shape[0]
    x_prev = x.copy()

    # velocity prediction with gravity and viscous damping
    for i in range(n):
        if inv_mass[i] <= 0.0:
            continue
        v[i, 0] += dt * (gx - damping * v[i, 0])
        v[i, 1] += dt * (gy - damping * v[i, 1])
        v[i, 2] += dt * (gz - damping * v[i, 2])

        # Coulomb friction for vertices currently on the table. The normal
        # impulse that cancels the into-plane velocity bounds the tangential
        # impulse; sticking zeroes the tangential velocity before positions
        # move, so resting cloth does not creep.
        if x[i, 2] <= table_z + 1e-7:
            vz = v[i, 2]
            if vz < 0.0:
                jn = -vz
                v[i, 2] = 0.0
                vt = (v[i, 0] * v[i, 0] + v[i, 1] * v[i, 1]) ** 0.5
                cap = mu * jn
                if vt <= cap or vt < 1e-15:
                    v[i, 0] = 0.0
                    v[i, 1] = 0.0
                else:
                    s = (vt - cap) / vt
                    v[i, 0] *= s
                    v[i, 1] *= s

        x[i, 0] += dt * v[i, 0]
        x[i, 1] += dt * v[i, 1]
        x[i, 2] += dt * v[i, 2]

    # grasped vertices are kinematic: exact placement, immovable below
    for k in range(grasp_idx.shape[0]):
        gi = grasp_idx[k]
        x[gi, 0] = grasp_pos[k, 0]
        x[gi, 1] = grasp_pos[k, 1]
        x[gi, 2] = grasp_pos[k, 2]

    n_e = edges.shape[0]
    n_t = tris.shape[0]
    n_b = bpairs.shape[0]
    n_s = spairs.shape[0]
    lam_e = np.zeros(n_e)
    lam_t = np.zeros(n_t)
    lam_b = np.zeros(n_b)

    for _ in range(n_iter):
        # stretch: C = |xi - xj| - rest
        for e in range(n_e):
            i = edges[e, 0]
            j = edges[e, 1]
            wsum = inv_mass[i] + inv_mass[j]
            if wsum <= 0.0:
                continue
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            d = (dx * dx + dy * dy + dz * dz) ** 0.5
            if d < 1e-12:
                continue
            c = d - edge_rest[e]
            at = edge_at[e]
            dlam = (-c - at * lam_e[e]) / (wsum + at)
            lam_e[e] += dlam
            s = dlam / d
            x[i, 0] += inv_mass[i] * s * dx
            x[i, 1] += inv_mass[i] * s * dy
            x[i, 2] += inv_mass[i] * s * dz
            x[j, 0] -= inv_mass[j] * s * dx
            x[j, 1] -= inv_mass[j] * s * dy
            x[j, 2] -= inv_mass[j] * s * dz

        # in-plane resistance: C = A/A0 - 1 per triangle
        if area_at < 1e29:
            for t in range(n_t):
                a = tris[t, 0]
                b = tris[t, 1]
                cc = tris[t, 2]
                e1x = x[b, 0] - x[a, 0]
                e1y = x[b, 1] - x[a, 1]
                e1z = x[b, 2] - x[a, 2]
                e2x = x[cc, 0] - x[a, 0]
                e2y = x[cc, 1] - x[a, 1]
                e2z = x[cc, 2] - x[a, 2]
                nx = e1y * e2z - e1z * e2y
                ny = e1z * e2x - e1x * e2z
                nz = e1x * e2y - e1y * e2x
                nn = (nx * nx + ny * ny + nz * nz) ** 0.5
                if nn < 1e-14:
                    continue
                nx /= nn
                ny /= nn
                nz /= nn
                area = 0.5 * nn
                a0 = tri_rest_area[t]
                c = area / a0 - 1.0
                # grad_a A = 0.5 * n_hat x (xc - xb), cyclic for b, c
                rbcx = x[cc, 0] - x[b, 0]
                rbcy = x[cc, 1] - x[b, 1]
                rbcz = x[cc, 2] - x[b, 2]
                rcax = x[a, 0] - x[cc, 0]
                rcay = x[a, 1] - x[cc, 1]
                rcaz = x[a, 2] - x[cc, 2]
                rabx = x[b, 0] - x[a, 0]
                raby = x[b, 1] - x[a, 1]
                rabz = x[b, 2] - x[a, 2]
                gax = 0.5 * (ny * rbcz - nz * rbcy) / a0
                gay = 0.5 * (nz * rbcx - nx * rbcz) / a0
                gaz = 0.5 * (nx * rbcy - ny * rbcx) / a0
                gbx = 0.5 * (ny * rcaz - nz * rcay) / a0
                gby = 0.5 * (nz * rcax - nx * rcaz) / a0
                gbz = 0.5 * (nx * rcay - ny * rcax) / a0
                gcx = 0.5 * (ny * rabz - nz * raby) / a0
                gcy = 0.5 * (nz * rabx - nx * rabz) / a0
                gcz = 0.5 * (nx * raby - ny * rabx) / a0
                denom = (
                    inv_mass[a] * (gax * gax + gay * gay + gaz * gaz)
                    + inv_mass[b] * (gbx * gbx + gby * gby + gbz * gbz)
                    + inv_mass[cc] * (gcx * gcx + gcy * gcy + gcz * gcz)
                    + area_at
                )
                if denom < 1e-14:
                    continue
                dlam = (-c - area_at * lam_t[t]) / denom
                lam_t[t] += dlam
                x[a, 0] += inv_mass[a] * dlam * gax
                x[a, 1] += inv_mass[a] * dlam * gay
                x[a, 2] += inv_mass[a] * dlam * gaz
                x[b, 0] += inv_mass[b] * dlam * gbx
                x[b, 1] += inv_mass[b] * dlam * gby
                x[b, 2] += inv_mass[b] * dlam * gbz
                x[cc, 0] += inv_mass[cc] * dlam * gcx
                x[cc, 1] += inv_mass[cc] * dlam * gcy
                x[cc, 2] += inv_mass[cc] * dlam * gcz

        # bending: distance constraint across each interior edge
        for p in range(n_b):
            i = bpairs[p, 0]
            j = bpairs[p, 1]
            wsum = inv_mass[i] + inv_mass[j]
            if wsum <= 0.0:
                continue
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            d = (dx * dx + dy * dy + dz * dz) ** 0.5
            if d < 1e-12:
                continue
            c = d - bpair_rest[p]
            at = bpair_at[p]
            dlam = (-c - at * lam_b[p]) / (wsum + at)
            lam_b[p] += dlam
            s = dlam / d
            x[i, 0] += inv_mass[i] * s * dx
            x[i, 1] += inv_mass[i] * s * dy
            x[i, 2] += inv_mass[i] * s * dz
            x[j, 0] -= inv_mass[j] * s * dx
            x[j, 1] -= inv_mass[j] * s * dy
            x[j, 2] -= inv_mass[j] * s * dz

        # layer separation: opposing layers may not come closer than the
        # mirror offset (unilateral, hard)
        for p in range(n_s):
            i = spairs[p, 0]
            j = spairs[p, 1]
            wsum = inv_mass[i] + inv_mass[j]
            if wsum <= 0.0:
                continue
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            d = (dx * dx + dy * dy + dz * dz) ** 0.5
            if d >= spair_rest[p] or d < 1e-12:
                continue
            s = (spair_rest[p] - d) / (wsum * d)
            x[i, 0] += inv_mass[i] * s * dx
            x[i, 1] += inv_mass[i] * s * dy
            x[i, 2] += inv_mass[i] * s * dz
            x[j, 0] -= inv_mass[j] * s * dx
            x[j, 1] -= inv_mass[j] * s * dy
            x[j, 2] -= inv_mass[j] * s * dz

    # table is impenetrable for dynamic vertices
    for i in range(n):
        if inv_mass[i] > 0.0 and x[i, 2] < table_z:
            x[i, 2] = table_z

    bad = -1
    for i in range(n):
        v[i, 0] = (x[i, 0] - x_prev[i, 0]) / dt
        v[i, 1] = (x[i, 1] - x_prev[i, 1]) / dt
        v[i, 2] = (x[i, 2] - x_prev[i, 2]) / dt
        if bad < 0 and not (
            np.isfinite(x[i, 0]) and np.isfinite(x[i, 1]) and np.isfinite(x[i, 2])
        ):
            bad = i
    return bad
