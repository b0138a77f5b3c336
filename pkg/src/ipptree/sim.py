"""Deterministic ground-truth world, noisy depth sensing, pose drift, and
kinematic trajectory execution.

Scenes are unions of axis-aligned boxes. The map is built from reported poses
while collisions are checked against true poses; the gap between the two is a
bounded random-walk drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .geometry import Aabb, Pose, boxes_array, box_sdf, ray_box_hits, rot_rpy, wrap_angle
from .objective import MotionLimits, Trajectory, translation_profile, translation_time, yaw_time
from .raycast import CameraModel


class CollisionError(RuntimeError):
    """The true robot position violated the collision radius."""


@dataclass
class Scene:
    """Ground-truth world: occupied boxes, world bounds, region of interest."""

    boxes: list
    world_bounds: Aabb
    roi: Aabb
    start: Pose

    def __post_init__(self):
        if not self.world_bounds.contains_box(self.roi):
            raise ValueError("region of interest must lie inside world bounds")
        self._arr = boxes_array(self.boxes)

    @property
    def boxes_arr(self) -> np.ndarray:
        return self._arr

    def clearance(self, points) -> np.ndarray:
        """Signed distance from points to the union of solids."""
        return box_sdf(points, self._arr)

    def validate_start(self, collision_radius: float):
        if self.clearance(self.start.position[None])[0] < collision_radius:
            raise ValueError("start pose violates the collision radius")

    @classmethod
    def from_yaml(cls, path) -> "Scene":
        raw = yaml.safe_load(Path(path).read_text())
        try:
            boxes = [Aabb(b["min"], b["max"]) for b in raw.get("boxes", [])]
            world = Aabb(raw["world_bounds"]["min"], raw["world_bounds"]["max"])
            roi = Aabb(raw["roi"]["min"], raw["roi"]["max"])
            start = Pose(raw["start"]["position"], float(raw["start"].get("yaw", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scene file {path}: {exc}") from exc
        return cls(boxes, world, roi, start)


@dataclass
class DriftState:
    """Bounded random-walk offset between true and reported pose."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    position_bound: float = 0.05
    rollpitch_bound: float = np.deg2rad(1.5)
    yaw_bound: float = np.deg2rad(5.0)
    step_fraction: float = 0.02  # step scale as a fraction of each bound

    def copy(self) -> "DriftState":
        return DriftState(self.position.copy(), self.roll, self.pitch, self.yaw,
                          self.position_bound, self.rollpitch_bound, self.yaw_bound,
                          self.step_fraction)


@dataclass
class SensorConfig:
    camera: CameraModel = field(default_factory=CameraModel)
    noise_coefficient: float = 0.0024  # Gaussian depth error, mean = std = c * z^2
    frame_rate: float = 3.0
    resolution: tuple = (90, 64)

    def __post_init__(self):
        if self.noise_coefficient < 0:
            raise ValueError("noise coefficient must be nonnegative")
        if self.frame_rate <= 0:
            raise ValueError("frame rate must be positive")


@dataclass
class RobotState:
    true: Pose
    reported: Pose
    time: float = 0.0

    def copy(self) -> "RobotState":
        return RobotState(self.true.copy(), self.reported.copy(), self.time)


def render_depth(scene: Scene, true_pose: Pose, camera: CameraModel,
                 resolution=(90, 64)) -> np.ndarray:
    """Ray-cast the box world: per-pixel hit points in the sensor frame.

    Pixels are uniformly spaced in angle; rays that hit nothing within range
    are omitted.
    """
    w, h = resolution
    az = np.linspace(-camera.fov_h_rad / 2.0, camera.fov_h_rad / 2.0, w)
    el = np.linspace(-camera.fov_v_rad / 2.0, camera.fov_v_rad / 2.0, h)
    az_g, el_g = np.meshgrid(az, el, indexing="ij")
    dirs_s = np.stack([
        np.cos(el_g) * np.cos(az_g),
        np.cos(el_g) * np.sin(az_g),
        np.sin(el_g),
    ], axis=-1).reshape(-1, 3)
    c, s = np.cos(true_pose.yaw), np.sin(true_pose.yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dirs_w = dirs_s @ rz.T
    t = ray_box_hits(true_pose.position[None], dirs_w, scene.boxes_arr, camera.range)
    hit = np.isfinite(t) & (t > 1e-9) & (t <= camera.range)
    return dirs_s[hit] * t[hit][:, None]


def apply_noise(points, cfg: SensorConfig, rng: np.random.Generator) -> np.ndarray:
    """Scale each point along its ray by a Gaussian depth error, mean and std
    both noise_coefficient * z^2."""
    p = np.asarray(points, dtype=float)
    if p.size == 0 or cfg.noise_coefficient == 0.0:
        return p.copy()
    z = np.linalg.norm(p, axis=1)
    mu = cfg.noise_coefficient * z * z
    z_new = np.maximum(z + mu + mu * rng.standard_normal(z.shape), 1e-3)
    return p * (z_new / np.maximum(z, 1e-12))[:, None]


def _reflect(x: float, bound: float) -> float:
    # reflect a scalar into [-bound, bound]
    period = 4.0 * bound
    x = (x + bound) % period
    if x < 0:
        x += period
    if x > 2.0 * bound:
        x = period - x
    return x - bound


def drift_step(drift: DriftState, dt: float, rng: np.random.Generator,
               frame_rate_ref: float = 3.0) -> DriftState:
    """One random-walk step with reflecting bounds.

    The per-step scale is bound * step_fraction at the reference frame period,
    scaled with sqrt(dt) so the walk's diffusion is step-size independent.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = drift.copy()
    scale = np.sqrt(dt * frame_rate_ref) * drift.step_fraction
    if scale == 0.0:
        return out
    step = rng.standard_normal(3) * (drift.position_bound * scale)
    pos = out.position + step
    norm = float(np.linalg.norm(pos))
    if norm > drift.position_bound:
        # radial reflection at the sphere boundary
        pos *= max(2.0 * drift.position_bound - norm, 0.0) / norm
    out.position = pos
    rp_scale = drift.rollpitch_bound * scale
    out.roll = _reflect(out.roll + float(rng.standard_normal()) * rp_scale,
                        drift.rollpitch_bound)
    out.pitch = _reflect(out.pitch + float(rng.standard_normal()) * rp_scale,
                         drift.rollpitch_bound)
    out.yaw = _reflect(out.yaw + float(rng.standard_normal()) * drift.yaw_bound * scale,
                       drift.yaw_bound)
    return out


def apply_drift(reported: Pose, drift: DriftState) -> Pose:
    """True pose implied by a reported pose under the current drift offset."""
    return Pose(reported.position - drift.position, reported.yaw - drift.yaw)


def distort_cloud(points, drift: DriftState) -> np.ndarray:
    """Rotate a sensor-frame cloud by the roll/pitch estimation error."""
    if len(points) == 0 or (drift.roll == 0.0 and drift.pitch == 0.0):
        return np.asarray(points, dtype=float)
    rot = rot_rpy(drift.roll, drift.pitch, 0.0)
    return np.asarray(points, dtype=float) @ rot.T


def trajectory_pose(trajectory: Trajectory, limits: MotionLimits, t: float) -> Pose:
    """Pose along the trapezoidal/rate-limited profile at time t."""
    length = trajectory.length
    p0 = trajectory.start.position
    if length > 0:
        s = float(translation_profile(length, limits, np.array([t]))[0])
        pos = p0 + (trajectory.end.position - p0) * (s / length)
    else:
        pos = p0.copy()
    dyaw = trajectory.yaw_change
    t_yaw = yaw_time(dyaw, limits)
    if t_yaw > 0:
        frac = min(t / t_yaw, 1.0)
        yaw = trajectory.start.yaw + dyaw * frac
    else:
        yaw = trajectory.end.yaw
    return Pose(pos, yaw)


def execute_trajectory(robot: RobotState, trajectory: Trajectory, dt: float,
                       scene: Scene, *, limits: MotionLimits,
                       sensor: SensorConfig, drift: DriftState,
                       rng: np.random.Generator, collision_radius: float):
    """Integrate one segment; emit robot states at sensor frame times.

    Returns (frames, frame_drifts, robot_end, drift_end); frame_drifts holds
    the drift state at each emitted frame (integration needs its roll/pitch
    error). The drift walks once per frame; collisions are checked on the
    true position every dt step and raise CollisionError.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if np.linalg.norm(trajectory.start.position - robot.reported.position) > 1e-6:
        raise ValueError("trajectory does not start at the robot's reported pose")
    t_total = max(translation_time(trajectory.length, limits),
                  yaw_time(trajectory.yaw_change, limits))
    frame_dt = 1.0 / sensor.frame_rate
    frames = []
    frame_drifts = []
    t0 = robot.time
    next_frame = (np.floor(t0 / frame_dt + 1e-9) + 1) * frame_dt
    t_local = 0.0
    drift = drift.copy()
    while t_local < t_total - 1e-9:
        t_local = min(t_local + dt, t_total)
        reported = trajectory_pose(trajectory, limits, t_local)
        true = apply_drift(reported, drift)
        if scene.clearance(true.position[None])[0] < collision_radius:
            raise CollisionError(f"collision at t={t0 + t_local:.2f}s")
        while next_frame <= t0 + t_local + 1e-9:
            drift = drift_step(drift, frame_dt, rng)
            true = apply_drift(reported, drift)
            frames.append(RobotState(true, reported.copy(), next_frame))
            frame_drifts.append(drift.copy())
            next_frame += frame_dt
    end_reported = trajectory_pose(trajectory, limits, t_total)
    robot_end = RobotState(apply_drift(end_reported, drift), end_reported, t0 + t_total)
    return frames, frame_drifts, robot_end, drift
