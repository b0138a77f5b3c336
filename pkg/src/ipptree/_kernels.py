"""Scalar voxel-traversal inner loops, jitted.

All kernels share one DDA convention: the start cell is floor((p - origin)/s);
axis ties at equal crossing time resolve x, y, z; a crossing exactly at the
segment end is excluded; a start exactly on a boundary with negative direction
does not immediately re-cross it.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_BIG = 1e30


@njit(cache=True)
def _dda_init(origin, d, t0, g0, s):
    cell = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    step = np.empty(3, dtype=np.int64)
    for a in range(3):
        p = origin[a] + t0 * d[a]
        c = int(np.floor((p - g0[a]) / s))
        cell[a] = c
        if d[a] > 1e-15:
            step[a] = 1
            tdelta[a] = s / d[a]
            tmax[a] = ((c + 1) * s + g0[a] - origin[a]) / d[a]
        elif d[a] < -1e-15:
            step[a] = -1
            tdelta[a] = s / -d[a]
            tmax[a] = (c * s + g0[a] - origin[a]) / d[a]
        else:
            step[a] = 0
            tdelta[a] = _BIG
            tmax[a] = _BIG
        if tmax[a] <= t0 + 1e-12:
            tmax[a] += tdelta[a]
    return cell, tmax, tdelta, step


@njit(cache=True)
def cast_rays_kernel(origin, dirs, t_start, t_rec, sponsor, gids, t_end,
                     g0, s, lk_lo, lshape, surf, exact,
                     recorded, min_depth, ray_count, first_ray):
    """Sequential hierarchical casting over rays in stage order.

    Returns (visits, eff_hit). Rays whose sponsor (sequence index) stopped at
    a surface before their start depth inherit that stop and are not cast.
    In exact mode rays walk from depth 0 and repair-record unknown cells met
    before their record depth; verify hits on known cells cost nothing.
    """
    n = dirs.shape[0]
    nx, ny, nz = lshape[0], lshape[1], lshape[2]
    eff_hit = np.full(n, np.inf)
    visits = 0
    for i in range(n):
        t0 = t_start[i]
        if t0 >= t_end - 1e-12:
            continue
        sp = sponsor[i]
        if sp >= 0 and eff_hit[sp] < t_rec[i] - 1e-9:
            eff_hit[i] = eff_hit[sp]
            continue
        d = dirs[i]
        cell, tmax, tdelta, step = _dda_init(origin, d, t0, g0, s)
        t_cur = t0
        while True:
            ix = cell[0] - lk_lo[0]
            iy = cell[1] - lk_lo[1]
            iz = cell[2] - lk_lo[2]
            if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
                break
            flat = (ix * ny + iy) * nz + iz
            rec_mode = t_cur >= t_rec[i] - 1e-12
            if recorded[flat] != 0:
                if rec_mode:
                    visits += 1
                    ray_count[flat] += 1
                    if t_cur < min_depth[flat]:
                        min_depth[flat] = t_cur
            elif rec_mode or exact:
                visits += 1
                recorded[flat] = 1
                first_ray[flat] = gids[i]
                ray_count[flat] += 1
                if t_cur < min_depth[flat]:
                    min_depth[flat] = t_cur
            if surf[flat] != 0:
                eff_hit[i] = t_cur
                break
            if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
                a = 0
            elif tmax[1] <= tmax[2]:
                a = 1
            else:
                a = 2
            t_next = tmax[a]
            if t_next >= t_end - 1e-12:
                break
            t_cur = t_next
            tmax[a] += tdelta[a]
            cell[a] += step[a]
    return visits, eff_hit


@njit(cache=True)
def single_ray_kernel(origin, direction, t_end, g0, s, surf, lo_key, shape):
    """Ordered cells of one ray; stops at (and includes) the first Surface."""
    kmax = int(3.0 * t_end / s) + 4
    out = np.empty((kmax, 3), dtype=np.int64)
    cell, tmax, tdelta, step = _dda_init(origin, direction, 0.0, g0, s)
    m = 0
    while m < kmax:
        out[m, 0] = cell[0]
        out[m, 1] = cell[1]
        out[m, 2] = cell[2]
        m += 1
        ix = cell[0] - lo_key[0]
        iy = cell[1] - lo_key[1]
        iz = cell[2] - lo_key[2]
        if (0 <= ix < shape[0] and 0 <= iy < shape[1] and 0 <= iz < shape[2]
                and surf[(ix * shape[1] + iy) * shape[2] + iz] != 0):
            break
        if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
            a = 0
        elif tmax[1] <= tmax[2]:
            a = 1
        else:
            a = 2
        if tmax[a] >= t_end - 1e-12:
            break
        tmax[a] += tdelta[a]
        cell[a] += step[a]
    return out[:m]


@njit(cache=True)
def ball_safe_kernel(points, ball, lo_key, shape, free_flat, radius, s, g0):
    """Exact clearance test: every voxel center within radius must be Free."""
    m = points.shape[0]
    out = np.zeros(m, dtype=np.uint8)
    r2 = radius * radius
    nx, ny, nz = shape[0], shape[1], shape[2]
    for i in range(m):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        cx = int(np.floor((px - g0[0]) / s))
        cy = int(np.floor((py - g0[1]) / s))
        cz = int(np.floor((pz - g0[2]) / s))
        ok = True
        for b in range(ball.shape[0]):
            kx = cx + ball[b, 0]
            ky = cy + ball[b, 1]
            kz = cz + ball[b, 2]
            dx = (kx + 0.5) * s + g0[0] - px
            dy = (ky + 0.5) * s + g0[1] - py
            dz = (kz + 0.5) * s + g0[2] - pz
            if dx * dx + dy * dy + dz * dz > r2:
                continue
            ix = kx - lo_key[0]
            iy = ky - lo_key[1]
            iz = kz - lo_key[2]
            if (ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz
                    or free_flat[(ix * ny + iy) * nz + iz] == 0):
                ok = False
                break
        out[i] = 1 if ok else 0
    return out


@njit(cache=True)
def integrate_kernel(origin, dirs, depths, trunc, g0, s, lo_key, shape, dw, dwd):
    """Accumulate one frame of ray updates into weight/weighted-distance sums.

    Free-space cells ahead of the truncation band get d_in = +trunc via the
    clipped center-projection formula; every update carries weight z^-2.
    """
    nx, ny, nz = shape[0], shape[1], shape[2]
    for i in range(dirs.shape[0]):
        z = depths[i]
        if z <= 1e-9:
            continue
        w_in = 1.0 / (z * z)
        t_end = z + trunc
        d = dirs[i]
        cell, tmax, tdelta, step = _dda_init(origin, d, 0.0, g0, s)
        while True:
            ix = cell[0] - lo_key[0]
            iy = cell[1] - lo_key[1]
            iz = cell[2] - lo_key[2]
            if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
                break
            t_c = (((cell[0] + 0.5) * s + g0[0] - origin[0]) * d[0]
                   + ((cell[1] + 0.5) * s + g0[1] - origin[1]) * d[1]
                   + ((cell[2] + 0.5) * s + g0[2] - origin[2]) * d[2])
            d_in = z - t_c
            if d_in > trunc:
                d_in = trunc
            elif d_in < -trunc:
                d_in = -trunc
            flat = (ix * ny + iy) * nz + iz
            dw[flat] += w_in
            dwd[flat] += w_in * d_in
            if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
                a = 0
            elif tmax[1] <= tmax[2]:
                a = 1
            else:
                a = 2
            if tmax[a] >= t_end - 1e-12:
                break
            tmax[a] += tdelta[a]
            cell[a] += step[a]
    return dw, dwd
