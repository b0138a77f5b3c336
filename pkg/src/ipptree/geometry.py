"""Shared geometric primitives: axis-aligned boxes, poses, ray/box intersection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % TWO_PI - np.pi


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Z-Y-X intrinsic rotation matrix."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rot_z(yaw) @ ry @ rx


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by min/max corners (meters)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.hi < self.lo):
            raise ValueError(f"degenerate box: lo={self.lo}, hi={self.hi}")

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        inside = np.all((p >= self.lo) & (p <= self.hi), axis=1)
        return inside if np.ndim(points) > 1 else bool(inside[0])

    def contains_box(self, other: "Aabb") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def shrink(self, margin: float) -> "Aabb":
        lo, hi = self.lo + margin, self.hi - margin
        if np.any(hi < lo):
            raise ValueError("margin larger than box")
        return Aabb(lo, hi)


@dataclass
class Pose:
    """Position plus heading; the planner reasons in yaw only."""

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.yaw = float(wrap_angle(self.yaw))

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.yaw)


def boxes_array(boxes) -> np.ndarray:
    """Stack a list of Aabb into a (B, 2, 3) array; (0, 2, 3) when empty."""
    if len(boxes) == 0:
        return np.zeros((0, 2, 3))
    return np.stack([np.stack([b.lo, b.hi]) for b in boxes])


def box_sdf(points, boxes: np.ndarray) -> np.ndarray:
    """Exact signed distance from points (N, 3) to the union of boxes (B, 2, 3).

    Positive outside, negative inside. For overlapping boxes this is the usual
    min-of-SDFs approximation, exact everywhere except deep inside overlaps.
    Returns +inf when there are no boxes.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if boxes.shape[0] == 0:
        return np.full(p.shape[0], np.inf)
    lo = boxes[:, 0][None, :, :]  # (1, B, 3)
    hi = boxes[:, 1][None, :, :]
    q = np.maximum(lo - p[:, None, :], p[:, None, :] - hi)  # (N, B, 3)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=2)
    inside = np.minimum(np.max(q, axis=2), 0.0)
    return np.min(outside + inside, axis=1)


def ray_box_hits(origins, dirs, boxes: np.ndarray, max_len: float) -> np.ndarray:
    """First-hit distance of each ray against a set of boxes (slab method).

    origins/dirs are (N, 3); returns (N,) distances, +inf where nothing is hit
    within max_len. Rays starting inside a box report distance 0.
    """
    o = np.atleast_2d(origins)
    d = np.atleast_2d(dirs)
    n = d.shape[0]
    if o.shape[0] == 1 and n > 1:
        o = np.broadcast_to(o, d.shape)
    if boxes.shape[0] == 0:
        return np.full(n, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d  # inf where a component is 0 is fine for the slab test
        t1 = (boxes[None, :, 0, :] - o[:, None, :]) * inv[:, None, :]
        t2 = (boxes[None, :, 1, :] - o[:, None, :]) * inv[:, None, :]
    # Rays parallel to a slab: replace nan (0 * inf) by -inf/+inf so the slab
    # is ignored when the origin lies inside it and rejects otherwise.
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    par = d[:, None, :] == 0.0
    inside = (o[:, None, :] >= boxes[None, :, 0, :]) & (o[:, None, :] <= boxes[None, :, 1, :])
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_enter = np.max(lo, axis=2)
    t_exit = np.min(hi, axis=2)
    hit = (t_enter <= t_exit) & (t_exit >= 0.0) & (t_enter <= max_len)
    t_hit = np.where(hit, np.maximum(t_enter, 0.0), np.inf)
    return np.min(t_hit, axis=1)


def segment_blocked(p0, p1, boxes: np.ndarray, standoff: float = 0.0) -> bool:
    """True when the segment p0 -> p1 hits a box more than `standoff` before p1."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    delta = p1 - p0
    length = float(np.linalg.norm(delta))
    if length < 1e-12:
        return False
    t = ray_box_hits(p0[None], (delta / length)[None], boxes, length)[0]
    return bool(t < length - standoff)
