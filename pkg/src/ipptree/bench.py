"""Scenario runner, metrics, and aggregation.

One run is a deterministic function of (scenario, seed): the sense, integrate,
plan, execute loop repeats until the simulated-time budget is exhausted, the
tree has nothing left to expand, or the robot collides.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import Aabb, Pose, ray_box_hits
from .objective import GainSpec, MotionLimits, ValueSpec
from .planner import (
    ExhaustedTreeError,
    PlannerConfig,
    PlannerTree,
    plan_step,
)
from .raycast import CameraModel
from .sim import (
    CollisionError,
    DriftState,
    RobotState,
    Scene,
    SensorConfig,
    apply_noise,
    distort_cloud,
    execute_trajectory,
    render_depth,
)
from .tsdf_map import TsdfGrid, integrate_pointcloud

METRICS_COLUMNS = ("t_s", "exploration_ratio", "reconstruction_error_m",
                   "distance_m", "tree_size", "gain_evals")


class ConfigError(ValueError):
    """Scenario configuration is invalid or references missing files."""


@dataclass
class MetricsRecord:
    t: float
    exploration_ratio: float
    reconstruction_error: float | None
    distance_traveled: float
    tree_size: int
    gain_evaluations: int

    def csv_row(self) -> str:
        err = "" if self.reconstruction_error is None else f"{self.reconstruction_error:.6f}"
        return (f"{self.t:.3f},{self.exploration_ratio:.6f},{err},"
                f"{self.distance_traveled:.3f},{self.tree_size},{self.gain_evaluations}")


@dataclass
class ScenarioConfig:
    name: str
    scene_path: Path
    seed: int = 0
    budget_s: float = 300.0
    metrics_period_s: float = 5.0
    voxel_size: float = 0.2
    truncation: float = 0.4
    weight_cap: float = 1000.0
    sim_dt: float = 1.0 / 30.0
    drift_enabled: bool = True
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    drift: DriftState = field(default_factory=DriftState)

    def __post_init__(self):
        if self.budget_s < 0:
            raise ConfigError("budget_s must be nonnegative")
        if self.metrics_period_s <= 0:
            raise ConfigError("metrics_period_s must be positive")
        if not Path(self.scene_path).is_file():
            raise ConfigError(f"scene file not found: {self.scene_path}")

    @property
    def limits(self) -> MotionLimits:
        return self.planner.limits

    @classmethod
    def from_yaml(cls, path, seed=None) -> "ScenarioConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"scenario file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict) or "scene" not in raw:
            raise ConfigError(f"{path}: scenario must define a scene file")
        try:
            cam_raw = raw.get("camera", {})
            camera = CameraModel(
                fov_horizontal=float(cam_raw.get("fov_h_deg", 90.0)),
                fov_vertical=float(cam_raw.get("fov_v_deg", 73.7)),
                range=float(cam_raw.get("range_m", 5.0)),
            )
            mot = raw.get("motion", {})
            limits = MotionLimits(
                v_max=float(mot.get("v_max_mps", 1.0)),
                a_max=float(mot.get("a_max_mps2", 1.0)),
                yaw_rate_max=float(mot.get("yaw_rate_max_radps", np.pi / 2.0)),
            )
            pl = raw.get("planner", {})
            gain_raw = dict(pl.get("gain", {"name": "unknown_volume"}))
            gain = GainSpec(
                kind=gain_raw.pop("name"),
                eta_min=float(gain_raw.pop("eta_min", 0.01)),
                t_m=int(gain_raw.pop("t_m", 50)),
                d_s=float(gain_raw.pop("d_s_m", 1.0)),
                theta_conf=float(gain_raw.pop("theta_conf", 0.4)),
            )
            value_raw = dict(pl.get("value", {"name": "global_normalization"}))
            value = ValueSpec(
                kind=value_raw.pop("name"),
                lam=float(value_raw.pop("lambda", 0.5)),
                alpha=float(value_raw.pop("alpha", 3.0)),
            )
            sb = pl.get("sampling_bounds")
            scene_path = (path.parent / raw["scene"]).resolve()
            if not scene_path.is_file():
                raise ConfigError(f"scene file not found: {scene_path}")
            scene = Scene.from_yaml(scene_path)
            bounds = Aabb(sb["min"], sb["max"]) if sb else scene.world_bounds
            planner = PlannerConfig(
                camera=camera,
                gain=gain,
                value=value,
                limits=limits,
                sampling_bounds=bounds,
                n_local=int(pl.get("n_local", 10)),
                r_local=float(pl.get("r_local_m", 1.5)),
                r_update=float(pl.get("r_update_m", 3.0)),
                l_max=float(pl.get("l_max_m", 1.5)),
                collision_radius=float(pl.get("collision_radius_m", 1.2)),
                expansion_rate=float(pl.get("expansion_rate_hz", 30.0)),
                f_sub=float(pl.get("f_sub", 3.0)),
                variant=str(pl.get("variant", "full")),
                max_tree_size=(int(pl["max_tree_size"])
                               if pl.get("max_tree_size") is not None else None),
            )
            sen = raw.get("sensor", {})
            sensor = SensorConfig(
                camera=camera,
                noise_coefficient=float(sen.get("noise_coefficient", 0.0024)),
                frame_rate=float(sen.get("frame_rate_hz", 3.0)),
                resolution=tuple(sen.get("resolution", (90, 64))),
            )
            dr = raw.get("drift", {})
            drift = DriftState(
                position_bound=float(dr.get("position_bound_m", 0.05)),
                rollpitch_bound=np.deg2rad(float(dr.get("rollpitch_bound_deg", 1.5))),
                yaw_bound=np.deg2rad(float(dr.get("yaw_bound_deg", 5.0))),
                step_fraction=float(dr.get("step_fraction", 0.02)),
            )
            mp = raw.get("map", {})
            cfg = cls(
                name=str(raw.get("name", path.stem)),
                scene_path=scene_path,
                seed=int(raw.get("seed", 0)) if seed is None else int(seed),
                budget_s=float(raw.get("budget_s", 300.0)),
                metrics_period_s=float(raw.get("metrics_period_s", 5.0)),
                voxel_size=float(mp.get("voxel_size_m", 0.2)),
                truncation=float(mp.get("truncation_m", 0.4)),
                weight_cap=float(mp.get("weight_cap", 1000.0)),
                sim_dt=float(raw.get("sim_dt_s", 1.0 / 30.0)),
                drift_enabled=bool(dr.get("enabled", True)),
                planner=planner,
                sensor=sensor,
                drift=drift,
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cfg


# -- ground-truth metrics ------------------------------------------------------


_observable_cache: dict = {}


def observable_set(scene: Scene, start, camera: CameraModel, voxel_size: float,
                   collision_radius: float = 1.2) -> np.ndarray:
    """Voxel keys the robot could ever observe, (N, 3), lexicographically sorted.

    Flood fill of clearance-free voxels reachable from the start, plus surface
    voxels within camera range and line of sight of some reachable voxel;
    restricted to the scene's region of interest.
    """
    start = np.asarray(start, dtype=float)
    if scene.clearance(start[None])[0] < 0:
        raise ValueError("start position lies inside a solid")
    if scene.clearance(start[None])[0] < collision_radius:
        raise ValueError("start position violates the collision radius")
    s = float(voxel_size)
    lo_key = np.floor(scene.world_bounds.lo / s + 1e-9).astype(np.int64)
    hi_key = np.ceil(scene.world_bounds.hi / s - 1e-9).astype(np.int64)
    shape = tuple((hi_key - lo_key).tolist())
    idx = np.indices(shape).reshape(3, -1).T
    centers = (idx + lo_key + 0.5) * s
    d_gt = scene.clearance(centers)

    flyable = (d_gt >= collision_radius).reshape(shape)
    labels, _ = ndimage.label(flyable, structure=ndimage.generate_binary_structure(3, 1))
    start_idx = tuple(np.floor(start / s).astype(np.int64) - lo_key)
    start_label = labels[start_idx]
    if start_label == 0:
        raise ValueError("start cell is not clearance-free at this voxel size")
    reachable = (labels == start_label).ravel()

    surface = np.abs(d_gt) < s
    reach_centers = centers[reachable]
    surf_centers = centers[surface]
    visible = np.zeros(surf_centers.shape[0], dtype=bool)
    if surf_centers.shape[0] and reach_centers.shape[0]:
        k = min(64, reach_centers.shape[0])
        tree = cKDTree(reach_centers)
        dist, nn = tree.query(surf_centers, k=k, distance_upper_bound=camera.range)
        if k == 1:
            dist, nn = dist[:, None], nn[:, None]
        standoff = np.sqrt(3.0) * s
        unresolved = np.arange(surf_centers.shape[0])
        for col in range(k):
            if unresolved.size == 0:
                break
            d_col = dist[unresolved, col]
            ok = np.isfinite(d_col)
            cand = unresolved[ok]
            if cand.size == 0:
                break
            p0 = reach_centers[nn[cand, col]]
            p1 = surf_centers[cand]
            delta = p1 - p0
            lengths = np.linalg.norm(delta, axis=1)
            lengths = np.maximum(lengths, 1e-12)
            t_hit = ray_box_hits(p0, delta / lengths[:, None], scene.boxes_arr,
                                 np.max(lengths))
            clear = t_hit >= lengths - standoff
            visible[cand[clear]] = True
            unresolved = np.concatenate([unresolved[~ok], cand[~clear]])
    observable = reachable.copy()
    surf_flat = np.nonzero(surface)[0]
    observable[surf_flat[visible]] = True

    roi = scene.roi.contains(centers)
    keys = idx[observable & roi] + lo_key
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    return keys[order]


def cached_observable_set(scene_path, scene, camera, voxel_size, collision_radius):
    key = (str(scene_path), round(voxel_size, 9), round(collision_radius, 9),
           round(camera.range, 9))
    if key not in _observable_cache:
        _observable_cache[key] = observable_set(scene, scene.start.position, camera,
                                                voxel_size, collision_radius)
    return _observable_cache[key]


def exploration_ratio(grid: TsdfGrid, observable: np.ndarray) -> float:
    """Fraction of the observable set already observed (weight > 0)."""
    if observable.shape[0] == 0:
        raise ValueError("observable set must be nonempty")
    _, w = grid.distance_weight(observable)
    return float(np.count_nonzero(w > 0) / observable.shape[0])


def reconstruction_error(grid: TsdfGrid, scene: Scene):
    """Mean |true signed distance - fused distance| over Surface voxels; None
    when the map holds no surface yet."""
    keys = grid.surface_keys()
    if keys.shape[0] == 0:
        return None
    centers = grid.center(keys)
    d_gt = scene.clearance(centers)
    d, _ = grid.distance_weight(keys)
    return float(np.mean(np.abs(d_gt - d)))


# -- experiment loop -------------------------------------------------------------


def _bootstrap_map(grid: TsdfGrid, scene: Scene, start, radius: float):
    """Mark the take-off ball as free space (the robot occupies it).

    Cells keep their true clipped distance, and only cells at least one voxel
    clear of any solid are touched, so no fake surfaces enter the map.
    """
    s = grid.voxel_size
    lo = grid.key_of((np.asarray(start) - radius)[None])[0]
    hi = grid.key_of((np.asarray(start) + radius)[None])[0] + 1
    ii, jj, kk = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
    keys = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    centers = grid.center(keys)
    near = np.linalg.norm(centers - np.asarray(start), axis=1) <= radius
    d_gt = scene.clearance(centers)
    pick = near & (d_gt >= s - 1e-9)
    if np.any(pick):
        grid.apply_updates(keys[pick], np.clip(d_gt[pick], s, grid.truncation),
                           np.full(int(pick.sum()), 0.5))


def run_experiment(cfg: ScenarioConfig, out_dir=None):
    """Run one seeded scenario; returns (records, summary)."""
    t_wall = time.perf_counter()
    scene = Scene.from_yaml(cfg.scene_path)
    scene.validate_start(cfg.planner.collision_radius)
    records: list[MetricsRecord] = []
    summary = {
        "scenario": cfg.name,
        "seed": cfg.seed,
        "status": "budget",
        "t_end_s": 0.0,
        "exploration_ratio": 0.0,
        "reconstruction_error_m": None,
        "distance_m": 0.0,
        "tree_size": 1,
        "gain_evals": 0,
        "segments": 0,
    }
    if cfg.budget_s <= 0:
        summary["wall_s"] = time.perf_counter() - t_wall
        if out_dir is not None:
            _write_outputs(out_dir, cfg, records, summary, None)
        return records, summary

    grid = TsdfGrid(cfg.voxel_size, scene.world_bounds, cfg.truncation, cfg.weight_cap)
    observable = cached_observable_set(cfg.scene_path, scene, cfg.planner.camera,
                                       cfg.voxel_size, cfg.planner.collision_radius)
    ss = np.random.SeedSequence(cfg.seed)
    rng_plan, rng_noise, rng_drift = (np.random.default_rng(c) for c in ss.spawn(3))

    drift = cfg.drift.copy()
    if not cfg.drift_enabled:
        drift.step_fraction = 0.0
    robot = RobotState(scene.start.copy(), scene.start.copy(), 0.0)
    tree = PlannerTree(scene.start.copy())
    tree.last_plan_time = -1.0  # grant the first planning cycle one second of budget
    _bootstrap_map(grid, scene, scene.start.position,
                   cfg.planner.collision_radius + 3.0 * cfg.voxel_size)

    def sense(state: RobotState, dstate: DriftState):
        cloud = render_depth(scene, state.true, cfg.sensor.camera, cfg.sensor.resolution)
        cloud = apply_noise(cloud, cfg.sensor, rng_noise)
        cloud = distort_cloud(cloud, dstate)
        integrate_pointcloud(grid, state.reported, cloud)
        tree.mark_gain_dirty(state.reported.position, cfg.planner.r_update)

    distance = 0.0
    segments = 0
    next_metric = 0.0

    def record(t: float):
        nonlocal next_metric
        records.append(MetricsRecord(
            t=t,
            exploration_ratio=exploration_ratio(grid, observable),
            reconstruction_error=reconstruction_error(grid, scene),
            distance_traveled=distance,
            tree_size=len(tree),
            gain_evaluations=tree.gain_evaluations,
        ))
        next_metric += cfg.metrics_period_s

    sense(robot, drift)
    record(0.0)
    status = "budget"
    while robot.time < cfg.budget_s - 1e-9:
        try:
            traj = plan_step(tree, grid, robot, cfg.planner, rng_plan)
        except ExhaustedTreeError:
            status = "complete"
            break
        try:
            frames, frame_drifts, robot_new, drift = execute_trajectory(
                robot, traj, cfg.sim_dt, scene, limits=cfg.limits, sensor=cfg.sensor,
                drift=drift, rng=rng_drift,
                collision_radius=cfg.planner.collision_radius)
        except CollisionError:
            status = "collision"
            break
        prev = robot.reported.position
        for state, dstate in zip(frames, frame_drifts):
            distance += float(np.linalg.norm(state.reported.position - prev))
            prev = state.reported.position
            sense(state, dstate)
            if state.time >= next_metric - 1e-9:
                record(state.time)
        distance += float(np.linalg.norm(robot_new.reported.position - prev))
        robot = robot_new
        segments += 1
    record(robot.time)

    summary.update(
        status=status,
        t_end_s=robot.time,
        exploration_ratio=records[-1].exploration_ratio,
        reconstruction_error_m=records[-1].reconstruction_error,
        distance_m=distance,
        tree_size=len(tree),
        gain_evals=tree.gain_evaluations,
        segments=segments,
        wall_s=time.perf_counter() - t_wall,
    )
    if out_dir is not None:
        _write_outputs(out_dir, cfg, records, summary, (grid, scene))
    return records, summary


def metrics_csv(records) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    lines.extend(r.csv_row() for r in records)
    return "\n".join(lines) + "\n"


def _write_outputs(out_dir, cfg, records, summary, map_and_scene):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(records))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if map_and_scene is not None:
        grid, scene = map_and_scene
        np.savez_compressed(
            out / "final_map.npz",
            distance=grid.distance_array,
            weight=grid.weight_array,
            voxel_size=grid.voxel_size,
            origin=grid.origin,
            bounds_lo=grid.bounds.lo,
            bounds_hi=grid.bounds.hi,
            truncation=grid.truncation,
            boxes=scene.boxes_arr,
        )


def load_final_map(run_dir):
    """Rebuild (grid, boxes) from a run directory's final_map.npz."""
    data = np.load(Path(run_dir) / "final_map.npz")
    grid = TsdfGrid(float(data["voxel_size"]),
                    Aabb(data["bounds_lo"], data["bounds_hi"]),
                    float(data["truncation"]), origin=data["origin"])
    grid._d[:] = data["distance"]
    grid._w[:] = data["weight"]
    grid.version += 1
    return grid, data["boxes"]


def export_surface_ply(grid: TsdfGrid, boxes: np.ndarray, path):
    """ASCII PLY of Surface voxel centers with |reconstruction error| scalar."""
    from .geometry import box_sdf

    keys = grid.surface_keys()
    centers = grid.center(keys) if keys.shape[0] else np.zeros((0, 3))
    d, _ = grid.distance_weight(keys) if keys.shape[0] else (np.zeros(0), None)
    err = np.abs(box_sdf(centers, boxes) - d) if keys.shape[0] else np.zeros(0)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {keys.shape[0]}",
        "property float x", "property float y", "property float z",
        "property float error", "end_header",
    ]
    lines.extend(f"{c[0]:.4f} {c[1]:.4f} {c[2]:.4f} {e:.6f}"
                 for c, e in zip(centers, err))
    Path(path).write_text("\n".join(lines) + "\n")
    return keys.shape[0]


def aggregate(summaries: list) -> dict:
    """Sample mean and std (n-1) per metric over run summaries."""
    if not summaries:
        raise ValueError("need at least one summary")
    out = {"runs": len(summaries),
           "failed": sum(1 for s in summaries if s["status"] == "collision")}
    for key in ("exploration_ratio", "reconstruction_error_m", "distance_m",
                "t_end_s", "gain_evals", "tree_size"):
        vals = np.array([s[key] for s in summaries if s.get(key) is not None],
                        dtype=float)
        if vals.size == 0:
            out[key] = {"mean": None, "std": None, "n": 0}
            continue
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out[key] = {"mean": float(np.mean(vals)), "std": std, "n": int(vals.size)}
    return out
