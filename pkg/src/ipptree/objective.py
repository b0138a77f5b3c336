"""Gain, cost, and value formulations the planner maximizes.

Gains score a viewpoint from the set of voxels visible from it; the cost of a
tree edge is its expected execution time; values fuse cached gains and costs
along root paths into a total node utility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, wrap_angle
from .raycast import CameraModel, VisibleSet, panoramic_visible_voxels
from .tsdf_map import TsdfGrid, VoxelClass, impact_factor_batch, input_weight

YAW_SECTION_DEG = 30.0
N_YAW_SECTIONS = int(round(360.0 / YAW_SECTION_DEG))

# Reference weight for "normalized" TSDF confidence: one observation at 1 m.
CONFIDENCE_REF_WEIGHT = input_weight(1.0)


@dataclass(frozen=True)
class GainSpec:
    """Which information gain to use, with its parameters.

    kind:
      unknown_volume            count of visible unknown voxels
      voxel_impact              TSDF reconstruction gain (eta_min cutoff)
      surface_frontiers         capped count of unknown-near-surface voxels
      voxel_confidence          unknown plus low-confidence surface voxels
    """

    kind: str = "unknown_volume"
    eta_min: float = 0.01
    t_m: int = 50
    d_s: float = 1.0
    theta_conf: float = 0.4

    KINDS = ("unknown_volume", "voxel_impact", "surface_frontiers", "voxel_confidence")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown gain kind {self.kind!r}")
        if not 0.0 <= self.eta_min < 1.0:
            raise ValueError("eta_min must be in [0, 1)")
        if self.t_m < 1 or self.d_s < 0:
            raise ValueError("t_m >= 1 and d_s >= 0 required")
        if not 0.0 < self.theta_conf < 1.0:
            raise ValueError("theta_conf must be in (0, 1)")


@dataclass(frozen=True)
class ValueSpec:
    """Value formulation: exponential, linear, or global_normalization."""

    kind: str = "global_normalization"
    lam: float = 0.5
    alpha: float = 3.0

    KINDS = ("exponential", "linear", "global_normalization")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown value kind {self.kind!r}")
        if self.lam <= 0 or self.alpha <= 0:
            raise ValueError("lam and alpha must be positive")


@dataclass(frozen=True)
class MotionLimits:
    v_max: float = 1.0
    a_max: float = 1.0
    yaw_rate_max: float = np.pi / 2.0

    def __post_init__(self):
        if min(self.v_max, self.a_max, self.yaw_rate_max) <= 0:
            raise ValueError("motion limits must be positive")


@dataclass
class Trajectory:
    """Straight-line segment between two yawed viewpoints."""

    start: Pose
    end: Pose
    duration: float = 0.0

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end.position - self.start.position))

    @property
    def yaw_change(self) -> float:
        return float(wrap_angle(self.end.yaw - self.start.yaw))

    @classmethod
    def timed(cls, start: Pose, end: Pose, limits: MotionLimits) -> "Trajectory":
        traj = cls(start, end)
        traj.duration = cost_time(traj, limits)
        return traj


def translation_time(distance: float, limits: MotionLimits) -> float:
    """Rest-to-rest trapezoidal profile time over a straight distance."""
    d = abs(distance)
    if d == 0.0:
        return 0.0
    v, a = limits.v_max, limits.a_max
    d_ramp = v * v / a  # accel plus decel distance at full speed
    if d >= d_ramp:
        return d / v + v / a
    return 2.0 * math.sqrt(d / a)


def translation_profile(distance: float, limits: MotionLimits, t) -> np.ndarray:
    """Distance covered at time t under the rest-to-rest trapezoidal profile."""
    t = np.asarray(t, dtype=float)
    d = abs(distance)
    if d == 0.0:
        return np.zeros_like(t)
    v, a = limits.v_max, limits.a_max
    if d >= v * v / a:
        t_acc = v / a
        t_total = d / v + v / a
        s = np.where(
            t < t_acc,
            0.5 * a * t * t,
            np.where(
                t < t_total - t_acc,
                0.5 * v * t_acc + v * (t - t_acc),
                d - 0.5 * a * np.maximum(t_total - t, 0.0) ** 2,
            ),
        )
    else:
        t_half = np.sqrt(d / a)
        s = np.where(
            t < t_half,
            0.5 * a * t * t,
            d - 0.5 * a * np.maximum(2 * t_half - t, 0.0) ** 2,
        )
    return np.clip(s, 0.0, d)


def yaw_time(yaw_change: float, limits: MotionLimits) -> float:
    return abs(float(wrap_angle(yaw_change))) / limits.yaw_rate_max


def edge_time(p0, yaw0: float, p1, yaw1: float, limits: MotionLimits) -> float:
    """Execution time of a straight edge without building Trajectory objects."""
    dx = float(p1[0]) - float(p0[0])
    dy = float(p1[1]) - float(p0[1])
    dz = float(p1[2]) - float(p0[2])
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    dyaw = abs((yaw1 - yaw0 + math.pi) % (2.0 * math.pi) - math.pi)
    return max(translation_time(dist, limits), dyaw / limits.yaw_rate_max)


def cost_time(trajectory: Trajectory, limits: MotionLimits) -> float:
    """Expected execution time: position and yaw move simultaneously."""
    return edge_time(trajectory.start.position, trajectory.start.yaw,
                     trajectory.end.position, trajectory.end.yaw, limits)


# -- per-voxel gain contributions --------------------------------------------


def _voxel_contributions(spec: GainSpec, grid: TsdfGrid, keys, min_depth, ray_count):
    """Per visible voxel gain contribution under `spec`, (N,) array."""
    if keys.shape[0] == 0:
        return np.zeros(0)
    cls = grid.classify_batch(keys)
    unknownish = (cls == VoxelClass.UNKNOWN) | (cls == VoxelClass.NEAR_SURFACE_UNKNOWN)
    surface = cls == VoxelClass.SURFACE
    if spec.kind == "unknown_volume":
        return unknownish.astype(float)
    if spec.kind == "voxel_impact":
        out = (cls == VoxelClass.NEAR_SURFACE_UNKNOWN).astype(float)
        if np.any(surface):
            eta = impact_factor_batch(grid, keys[surface],
                                      np.maximum(min_depth[surface], 1e-6),
                                      np.maximum(ray_count[surface], 1))
            contrib = np.where(eta > spec.eta_min,
                               (eta - spec.eta_min) / (1.0 - spec.eta_min), 0.0)
            out[surface] = contrib
        return out
    if spec.kind == "surface_frontiers":
        return (cls == VoxelClass.NEAR_SURFACE_UNKNOWN).astype(float)
    if spec.kind == "voxel_confidence":
        out = unknownish.astype(float)
        if np.any(surface):
            _, w = grid.distance_weight(keys[surface])
            norm_w = np.minimum(1.0, w / CONFIDENCE_REF_WEIGHT)
            out[surface] = (norm_w < spec.theta_conf).astype(float)
        return out
    raise ValueError(spec.kind)


def _near_occupied(grid: TsdfGrid, viewpoint, d_s: float) -> bool:
    """True when any Surface voxel center lies within d_s of the viewpoint."""
    p = np.asarray(viewpoint, dtype=float)
    s = grid.voxel_size
    lo = grid.key_of((p - d_s)[None])[0]
    hi = grid.key_of((p + d_s)[None])[0] + 1
    lo = np.maximum(lo - grid.lo_key, 0)
    hi = np.minimum(hi - grid.lo_key, np.array(grid.shape))
    if np.any(hi <= lo):
        return False
    sub = grid.surface_mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    if not sub.any():
        return False
    idx = np.argwhere(sub) + lo + grid.lo_key
    centers = grid.center(idx)
    return bool(np.any(np.linalg.norm(centers - p, axis=1) <= d_s))


def gain_unknown_volume(visible: VisibleSet, grid: TsdfGrid) -> float:
    """Number of visible voxels still unknown (incl. unknown near surfaces)."""
    spec = GainSpec(kind="unknown_volume")
    return float(_voxel_contributions(spec, grid, visible.keys,
                                      visible.min_depth, visible.ray_count).sum())


def gain_reconstruction(visible: VisibleSet, grid: TsdfGrid, eta_min: float = 0.01) -> float:
    """TSDF reconstruction gain: unit per near-surface unknown voxel plus the
    normalized impact factor of each visible surface voxel above eta_min."""
    spec = GainSpec(kind="voxel_impact", eta_min=eta_min)
    return float(_voxel_contributions(spec, grid, visible.keys,
                                      visible.min_depth, visible.ray_count).sum())


def gain_surface_frontiers(visible: VisibleSet, grid: TsdfGrid, t_m: int,
                           d_s: float, viewpoint) -> float:
    """Capped count of unknown-near-surface voxels; zero too close to surfaces."""
    if _near_occupied(grid, viewpoint, d_s):
        return 0.0
    spec = GainSpec(kind="surface_frontiers", t_m=t_m, d_s=d_s)
    n = _voxel_contributions(spec, grid, visible.keys,
                             visible.min_depth, visible.ray_count).sum()
    return float(min(float(t_m), n))


def gain_voxel_confidence(visible: VisibleSet, grid: TsdfGrid, theta_conf: float = 0.4) -> float:
    """Count of unknown voxels plus surface voxels with low normalized weight."""
    spec = GainSpec(kind="voxel_confidence", theta_conf=theta_conf)
    return float(_voxel_contributions(spec, grid, visible.keys,
                                      visible.min_depth, visible.ray_count).sum())


def evaluate_gain(spec: GainSpec, visible: VisibleSet, grid: TsdfGrid, viewpoint) -> float:
    """Dispatch a GainSpec against a visible set."""
    if spec.kind == "unknown_volume":
        return gain_unknown_volume(visible, grid)
    if spec.kind == "voxel_impact":
        return gain_reconstruction(visible, grid, spec.eta_min)
    if spec.kind == "surface_frontiers":
        return gain_surface_frontiers(visible, grid, spec.t_m, spec.d_s, viewpoint)
    return gain_voxel_confidence(visible, grid, spec.theta_conf)


# -- values -------------------------------------------------------------------


def value_exponential(parent_value: float, g: float, c: float, lam: float) -> float:
    """v = v_parent + g * exp(-lam * c); strictly increasing along paths."""
    if c < 0:
        raise ValueError("cost must be nonnegative")
    return parent_value + g * np.exp(-lam * c)


def value_linear(parent_value: float, g: float, c: float, alpha: float) -> float:
    """v = v_parent + g - alpha * c."""
    if c < 0:
        raise ValueError("cost must be nonnegative")
    return parent_value + g - alpha * c


def value_global_normalization(tree, node_id: int) -> float:
    """Best accumulated gain per accumulated cost over any root path through
    the subtree of node_id; all-zero-cost paths evaluate to 0."""
    node = tree.nodes[node_id]
    g_sum, c_sum = 0.0, 0.0
    cur = node
    while cur.parent is not None:
        g_sum += cur.gain
        c_sum += cur.cost
        cur = tree.nodes[cur.parent]

    best = -np.inf

    def visit(nid, gs, cs):
        nonlocal best
        ratio = gs / cs if cs > 0 else 0.0
        best = max(best, ratio)
        for ch in tree.nodes[nid].children:
            child = tree.nodes[ch]
            visit(ch, gs + child.gain, cs + child.cost)

    visit(node_id, g_sum, c_sum)
    return float(best)


# -- yaw optimization ----------------------------------------------------------


@dataclass
class YawEvaluation:
    """Gain binned into 30 degree yaw sections plus the best FOV window."""

    section_gains: np.ndarray
    best_yaw: float
    best_gain: float


def yaw_optimize(grid: TsdfGrid, position, camera: CameraModel, gain_spec: GainSpec,
                 f_sub: float = 1.0) -> YawEvaluation:
    """Cast the full 360 degree spectrum once and pick the best yaw window.

    Each visible voxel's gain contribution is binned by the azimuth of the ray
    that first recorded it; the yaw maximizing the sum over a contiguous run
    of sections covering the horizontal FOV is selected (ties: lowest section).
    """
    vis = panoramic_visible_voxels(grid, position, camera, f_sub)
    contrib = _voxel_contributions(gain_spec, grid, vis.keys, vis.min_depth, vis.ray_count)
    section_width = 2.0 * np.pi / N_YAW_SECTIONS
    sections = np.zeros(N_YAW_SECTIONS)
    if contrib.size:
        az = np.mod(vis.azimuth, 2.0 * np.pi)
        bins = np.minimum((az / section_width).astype(int), N_YAW_SECTIONS - 1)
        np.add.at(sections, bins, contrib)
    if gain_spec.kind == "surface_frontiers" and _near_occupied(grid, position, gain_spec.d_s):
        sections[:] = 0.0

    window = int(np.ceil(camera.fov_h_rad / section_width - 1e-9))
    window = max(1, min(window, N_YAW_SECTIONS))
    # Windows are indexed by their center section; ties pick the lowest one.
    doubled = np.concatenate([sections, sections])
    starts = (np.arange(N_YAW_SECTIONS) - window // 2) % N_YAW_SECTIONS
    sums = np.array([doubled[a:a + window].sum() for a in starts])
    best_center = int(np.argmax(sums))
    best_gain = float(sums[best_center])
    if gain_spec.kind == "surface_frontiers":
        best_gain = min(best_gain, float(gain_spec.t_m))
    best_yaw = float(wrap_angle((starts[best_center] + window / 2.0) * section_width))
    return YawEvaluation(sections, best_yaw, best_gain)
