"""TSDF voxel map: weighted distance fusion and voxel classification.

Each voxel carries a signed distance d (clamped to the truncation band) and a
nonnegative weight w; w == 0 means unobserved. New measurements enter with the
quadratic depth weight w_in = z^-2 and fuse by weighted averaging. Storage is
a dense block over the map bounds (the sparse keyed view is derived from it),
which keeps integration and ray casting fully vectorized.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

from ._kernels import integrate_kernel
from .geometry import Aabb, Pose, rot_z

VoxelKey = tuple[int, int, int]


class VoxelClass(IntEnum):
    UNKNOWN = 0
    FREE = 1
    SURFACE = 2
    NEAR_SURFACE_UNKNOWN = 3


def input_weight(z):
    """Quadratic depth weight w_in = z^-2 for a measurement at depth z."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0.0):
        raise ValueError("measurement depth must be positive")
    w = z ** -2.0
    return float(w) if w.ndim == 0 else w


def fuse_distance(w, d, w_in, d_in, weight_cap=None):
    """Weighted-average TSDF update: returns (d_new, w_new).

    d_new = (w d + w_in d_in) / (w + w_in); w_new = w + w_in, capped after the
    average so the fused distance is unaffected by the cap.
    """
    w = np.asarray(w, dtype=float)
    w_in = np.asarray(w_in, dtype=float)
    total = w + w_in
    if np.any(total <= 0.0):
        raise ValueError("fused weight must be positive")
    d_new = (w * np.asarray(d, dtype=float) + w_in * np.asarray(d_in, dtype=float)) / total
    w_new = total if weight_cap is None else np.minimum(total, weight_cap)
    if d_new.ndim == 0:
        return float(d_new), float(w_new)
    return d_new, w_new


class TsdfGrid:
    """Dense-backed TSDF over an axis-aligned bounds box.

    Voxel (i, j, k) covers [origin + (i,j,k)*s, origin + (i+1,j+1,k+1)*s);
    its center is origin + (i+.5, j+.5, k+.5)*s.
    """

    def __init__(self, voxel_size, bounds: Aabb, truncation=None, weight_cap=1000.0,
                 origin=(0.0, 0.0, 0.0)):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if truncation is None:
            truncation = 2.0 * voxel_size
        if truncation < 2.0 * voxel_size:
            raise ValueError("truncation must be at least two voxels")
        self.voxel_size = float(voxel_size)
        self.bounds = bounds
        self.truncation = float(truncation)
        self.weight_cap = float(weight_cap)
        self.origin = np.asarray(origin, dtype=float)
        s = self.voxel_size
        self.lo_key = np.floor((bounds.lo - self.origin) / s + 1e-9).astype(np.int64)
        hi_key = np.ceil((bounds.hi - self.origin) / s - 1e-9).astype(np.int64)
        self.shape = tuple((hi_key - self.lo_key).tolist())
        if min(self.shape) <= 0:
            raise ValueError("bounds smaller than one voxel")
        self._d = np.zeros(self.shape, dtype=np.float64)
        self._w = np.zeros(self.shape, dtype=np.float64)
        self.version = 0
        self._mask_cache = {}

    # -- key/index/point conversions ------------------------------------

    def key_of(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return np.floor((p - self.origin) / self.voxel_size).astype(np.int64)

    def center(self, keys) -> np.ndarray:
        k = np.atleast_2d(np.asarray(keys, dtype=np.int64))
        return self.origin + (k + 0.5) * self.voxel_size

    def key_in_bounds(self, keys) -> np.ndarray:
        k = np.atleast_2d(np.asarray(keys, dtype=np.int64))
        idx = k - self.lo_key
        return np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)

    def _flat(self, keys):
        """(flat_index, in_bounds_mask) for keys (N, 3)."""
        idx = np.atleast_2d(np.asarray(keys, dtype=np.int64)) - self.lo_key
        ok = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        ii = np.where(ok[:, None], idx, 0)
        flat = np.ravel_multi_index((ii[:, 0], ii[:, 1], ii[:, 2]), self.shape)
        return flat, ok

    # -- raw voxel access -------------------------------------------------

    def distance_weight(self, keys):
        """Per-key (distance, weight); out-of-bounds keys read as unobserved."""
        flat, ok = self._flat(keys)
        d = np.where(ok, self._d.ravel()[flat], 0.0)
        w = np.where(ok, self._w.ravel()[flat], 0.0)
        return d, w

    def voxel(self, key):
        """Scalar (distance, weight) of one voxel."""
        d, w = self.distance_weight(np.asarray(key)[None])
        return float(d[0]), float(w[0])

    @property
    def distance_array(self) -> np.ndarray:
        return self._d

    @property
    def weight_array(self) -> np.ndarray:
        return self._w

    def stored_keys(self) -> np.ndarray:
        """Keys of all voxels with weight > 0, (N, 3)."""
        idx = np.argwhere(self._w > 0)
        return idx + self.lo_key

    # -- class masks (cached per map version) ----------------------------

    def _mask(self, name):
        cached = self._mask_cache.get(name)
        if cached is not None and cached[0] == self.version:
            return cached[1]
        s = self.voxel_size
        if name == "surface":
            m = (self._w > 0) & (np.abs(self._d) < s)
        elif name == "free":
            m = (self._w > 0) & (self._d >= s)
        elif name == "near_surface":
            surf = self._mask("surface")
            m = np.zeros_like(surf)
            for a in range(3):
                lo = [slice(None)] * 3
                hi = [slice(None)] * 3
                lo[a] = slice(1, None)
                hi[a] = slice(None, -1)
                m[tuple(lo)] |= surf[tuple(hi)]
                m[tuple(hi)] |= surf[tuple(lo)]
            m &= self._w == 0
        elif name == "classes":
            m = np.zeros(self.shape, dtype=np.uint8)
            m[self._mask("free")] = VoxelClass.FREE
            m[self._mask("surface")] = VoxelClass.SURFACE
            m[self._mask("near_surface")] = VoxelClass.NEAR_SURFACE_UNKNOWN
        else:
            raise KeyError(name)
        self._mask_cache[name] = (self.version, m)
        return m

    @property
    def surface_mask(self) -> np.ndarray:
        return self._mask("surface")

    @property
    def free_mask(self) -> np.ndarray:
        return self._mask("free")

    def surface_keys(self) -> np.ndarray:
        return np.argwhere(self.surface_mask) + self.lo_key

    def snapshot(self) -> "TsdfGrid":
        """Independent copy safe to hand to another thread for gain evaluation."""
        g = TsdfGrid.__new__(TsdfGrid)
        g.__dict__.update(self.__dict__)
        g._d = self._d.copy()
        g._w = self._w.copy()
        g._mask_cache = {}
        return g

    # -- classification ---------------------------------------------------

    def classify_batch(self, keys) -> np.ndarray:
        """VoxelClass codes for keys (N, 3)."""
        k = np.atleast_2d(np.asarray(keys, dtype=np.int64))
        flat, ok = self._flat(k)
        classes = self._mask("classes").ravel()
        out = np.where(ok, classes[flat], np.uint8(VoxelClass.UNKNOWN)).astype(np.uint8)
        oob = ~ok
        if np.any(oob):
            # Keys outside the stored block can still neighbor a surface voxel.
            surf = self.surface_mask.ravel()
            near = np.zeros(int(oob.sum()), dtype=bool)
            ku = k[oob]
            for a in range(3):
                for sgn in (-1, 1):
                    nb = ku.copy()
                    nb[:, a] += sgn
                    nflat, nok = self._flat(nb)
                    near |= nok & surf[nflat]
            idx = np.where(oob)[0]
            out[idx[near]] = VoxelClass.NEAR_SURFACE_UNKNOWN
        return out

    # -- fusion -----------------------------------------------------------

    def apply_updates(self, keys, d_in, w_in):
        """Fuse a batch of (key, d_in, w_in) updates; out-of-bounds skipped.

        Repeated keys accumulate exactly as sequential weighted averaging.
        """
        flat, ok = self._flat(keys)
        if not np.any(ok):
            return
        flat = flat[ok]
        d_in = np.broadcast_to(np.asarray(d_in, dtype=float), ok.shape)[ok]
        w_in = np.broadcast_to(np.asarray(w_in, dtype=float), ok.shape)[ok]
        ncell = self._w.size
        dw = np.bincount(flat, weights=w_in, minlength=ncell)
        dwd = np.bincount(flat, weights=w_in * d_in, minlength=ncell)
        self.apply_accumulated(dw, dwd)

    def apply_accumulated(self, dw, dwd):
        """Fuse per-cell accumulated weight and weighted-distance sums.

        Equivalent to sequential weighted averaging; the weight cap applies
        after the batch so the fused distance is unaffected by it.
        """
        touched = dw > 0
        w = self._w.ravel()
        d = self._d.ravel()
        total = w[touched] + dw[touched]
        d[touched] = (w[touched] * d[touched] + dwd[touched]) / total
        w[touched] = np.minimum(total, self.weight_cap)
        self.version += 1


def classify(grid: TsdfGrid, key) -> VoxelClass:
    """Class of one voxel: Unknown, Free, Surface, or NearSurfaceUnknown."""
    return VoxelClass(int(grid.classify_batch(np.asarray(key, dtype=np.int64)[None])[0]))


def impact_factor(grid: TsdfGrid, key, z: float, n_rays: int) -> float:
    """Fractional shift a new view at depth z causes on this voxel (0, 1]."""
    if z <= 0:
        raise ValueError("depth must be positive")
    if n_rays < 1:
        raise ValueError("n_rays must be at least 1")
    return float(impact_factor_batch(grid, np.asarray(key, dtype=np.int64)[None],
                                     np.array([z]), np.array([n_rays]))[0])


def impact_factor_batch(grid: TsdfGrid, keys, z, n_rays) -> np.ndarray:
    """Vectorized impact factor; unobserved voxels read weight 0."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    d, w = grid.distance_weight(keys)
    observed = (w > 0) & ((np.abs(d) < grid.voxel_size) | (d >= grid.voxel_size))
    w_eff = np.where(observed, w, 0.0)
    return 1.0 / (1.0 + z * z * w_eff / np.asarray(n_rays, dtype=float))


def integrate_pointcloud(grid: TsdfGrid, sensor_pose: Pose, points) -> TsdfGrid:
    """Fuse one depth frame (points in the sensor frame) into the grid.

    Every ray carves free space (d_in = +truncation) from the sensor up to
    the truncation band, then writes the signed distance to the measured
    point inside the band; all updates use the z^-2 input weight.
    """
    p = np.asarray(points, dtype=float)
    if p.size == 0:
        return grid
    rot = rot_z(sensor_pose.yaw)
    pw = p @ rot.T + sensor_pose.position
    o = sensor_pose.position
    delta = pw - o
    z = np.linalg.norm(delta, axis=1)
    keep = z > 1e-9
    if not np.any(keep):
        return grid
    delta, z = delta[keep], z[keep]
    dirs = delta / z[:, None]
    dw = np.zeros(grid._w.size)
    dwd = np.zeros(grid._w.size)
    integrate_kernel(o, np.ascontiguousarray(dirs), z, grid.truncation,
                     grid.origin, grid.voxel_size, grid.lo_key,
                     np.array(grid.shape, dtype=np.int64), dw, dwd)
    grid.apply_accumulated(dw, dwd)
    return grid
