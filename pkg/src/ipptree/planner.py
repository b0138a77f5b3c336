"""A single, continuously expanded and rewired trajectory tree.

Receding-horizon execution: the tree is expanded while the current segment
executes; on completion the best adjacent node is selected, becomes the new
root (its siblings are rewired to stay alive), gains near the robot are
refreshed against the updated map, values are recomputed in one pass, and a
breadth-first rewiring step re-optimizes the whole tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._kernels import ball_safe_kernel
from .geometry import Aabb, Pose
from .objective import (
    GainSpec,
    MotionLimits,
    Trajectory,
    ValueSpec,
    cost_time,
    edge_time,
    yaw_optimize,
)
from .raycast import CameraModel
from .tsdf_map import TsdfGrid

PLANNER_VARIANTS = ("full", "no_rewire", "discard_tree")


class ExhaustedTreeError(RuntimeError):
    """The tree has no executable child and sampling keeps failing."""


@dataclass
class PlannerConfig:
    camera: CameraModel = field(default_factory=CameraModel)
    gain: GainSpec = field(default_factory=GainSpec)
    value: ValueSpec = field(default_factory=ValueSpec)
    limits: MotionLimits = field(default_factory=MotionLimits)
    sampling_bounds: Aabb = field(default_factory=lambda: Aabb([0, 0, 0], [10, 10, 3]))
    n_local: int = 10
    r_local: float = 1.5
    r_update: float = 3.0
    l_max: float = 1.5
    collision_radius: float = 1.2
    expansion_rate: float = 30.0  # expansion attempts per simulated second
    f_sub: float = 3.0
    variant: str = "full"
    max_sample_failures: int = 1000
    # Extra clearance on top of the collision radius covering pose drift and
    # the half-step gap between collision samples.
    safety_margin: float = 0.1
    # Soft cap standing in for the paper's real-time resource bound: above it,
    # exhausted (zero-gain) leaves are pruned before expanding further.
    max_tree_size: int | None = None

    def __post_init__(self):
        if self.variant not in PLANNER_VARIANTS:
            raise ValueError(f"unknown planner variant {self.variant!r}")
        for name in ("r_local", "r_update", "l_max", "collision_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_local < 1 or self.expansion_rate < 0:
            raise ValueError("n_local >= 1 and expansion_rate >= 0 required")


@dataclass
class TreeNode:
    id: int
    parent: int | None
    trajectory: Trajectory
    gain: float = 0.0
    cost: float = 0.0
    value: float = 0.0
    best_yaw: float = 0.0
    gain_dirty: bool = False
    children: list = field(default_factory=list)
    # cached root-path sums of gain and cost (global-normalization value)
    path_gain: float = 0.0
    path_cost: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.trajectory.end.position


def _degenerate(pose: Pose) -> Trajectory:
    return Trajectory(pose.copy(), pose.copy(), 0.0)


class PlannerTree:
    """Node storage with parent/child links and an exact position index."""

    def __init__(self, root_pose: Pose):
        self.nodes: dict[int, TreeNode] = {}
        self._next_id = 0
        self.gain_evaluations = 0
        self.last_plan_time = 0.0
        self.consecutive_failures = 0
        root = TreeNode(self._take_id(), None, _degenerate(root_pose),
                        best_yaw=root_pose.yaw)
        self.nodes[root.id] = root
        self.root_id = root.id
        self._index_dirty = True
        self._index_n = 0
        self._ids = None
        self._positions = None

    def _take_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def __len__(self):
        return len(self.nodes)

    def reset(self, root_pose: Pose):
        self.nodes.clear()
        self._next_id = 0
        root = TreeNode(self._take_id(), None, _degenerate(root_pose),
                        best_yaw=root_pose.yaw)
        self.nodes[root.id] = root
        self.root_id = root.id
        self._index_dirty = True
        self._index_n = 0

    # -- position index (exact radius / nearest queries) ------------------

    def _refresh_index(self):
        if not self._index_dirty:
            return
        ids = sorted(self.nodes)
        n = len(ids)
        cap = max(64, 2 * n)
        self._ids = np.empty(cap, dtype=np.int64)
        self._positions = np.empty((cap, 3))
        self._ids[:n] = ids
        for row, nid in enumerate(ids):
            self._positions[row] = self.nodes[nid].position
        self._index_n = n
        self._index_dirty = False

    def _index_append(self, node: TreeNode):
        # New ids are strictly increasing, so appending keeps sorted order.
        if self._index_dirty or self._index_n >= self._ids.shape[0]:
            self._index_dirty = True
            return
        self._ids[self._index_n] = node.id
        self._positions[self._index_n] = node.position
        self._index_n += 1

    def radius_ids(self, center, radius: float) -> list[int]:
        """Ids of nodes with end position within radius, ascending id."""
        self._refresh_index()
        n = self._index_n
        if n == 0:
            return []
        delta = self._positions[:n] - np.asarray(center)
        d2 = np.einsum("ij,ij->i", delta, delta)
        return [int(i) for i in self._ids[:n][d2 <= (radius + 1e-12) ** 2]]

    def nearest_id(self, point) -> int:
        self._refresh_index()
        n = self._index_n
        delta = self._positions[:n] - np.asarray(point)
        d2 = np.einsum("ij,ij->i", delta, delta)
        return int(self._ids[:n][int(np.argmin(d2))])

    # -- structure edits ----------------------------------------------------

    def attach(self, node: TreeNode, parent_id: int):
        node.parent = parent_id
        self.nodes[parent_id].children.append(node.id)
        self.nodes[node.id] = node
        self._index_append(node)

    def detach(self, node_id: int):
        node = self.nodes[node_id]
        if node.parent is not None:
            self.nodes[node.parent].children.remove(node_id)
            node.parent = None

    def remove_subtree(self, node_id: int):
        self.detach(node_id)
        for nid in self.subtree_ids(node_id):
            del self.nodes[nid]
        self._index_dirty = True

    def subtree_ids(self, node_id: int) -> list[int]:
        out, stack = [], [node_id]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return out

    def is_ancestor(self, maybe_ancestor: int, node_id: int) -> bool:
        cur = self.nodes[node_id].parent
        while cur is not None:
            if cur == maybe_ancestor:
                return True
            cur = self.nodes[cur].parent
        return False

    def bfs_ids(self) -> list[int]:
        order, queue = [], [self.root_id]
        while queue:
            nid = queue.pop(0)
            order.append(nid)
            queue.extend(self.nodes[nid].children)
        return order

    def mark_gain_dirty(self, center, radius: float):
        for nid in self.radius_ids(center, radius):
            self.nodes[nid].gain_dirty = True


# -- collision clearance -------------------------------------------------------


class SafetyField:
    """Clearance queries: a point is safe iff every voxel any part of which
    lies within the collision radius (plus margin) is observed Free; unknown
    counts as unsafe.

    Because voxels are cubes, "within the radius" means the cell center falls
    inside radius + half diagonal; this makes map-certified clearance at least
    the collision radius itself, and the margin absorbs pose drift and the
    spacing of collision samples along an edge.
    """

    def __init__(self, grid: TsdfGrid, radius: float, margin: float = 0.1):
        self.grid = grid
        s = grid.voxel_size
        self._halfdiag = 0.5 * np.sqrt(3.0) * s
        self.radius = float(radius) + float(margin) + self._halfdiag
        free = np.pad(grid.free_mask, 1, constant_values=False)
        # Distance (m) from each cell center to the nearest not-free center;
        # the pad ring stands in for everything outside the map bounds.
        self._edt = ndimage.distance_transform_edt(free)[1:-1, 1:-1, 1:-1] * s
        r_cells = int(np.ceil(self.radius / s + 0.5 * np.sqrt(3.0)))
        rng = np.arange(-r_cells, r_cells + 1)
        oi, oj, ok = np.meshgrid(rng, rng, rng, indexing="ij")
        ball = np.stack([oi.ravel(), oj.ravel(), ok.ravel()], axis=1)
        # Offsets whose cell could hold a center within radius of some point
        # of the query cell; anything farther can never matter.
        reach = (np.linalg.norm(ball, axis=1) - np.sqrt(3.0)) * s <= self.radius
        self._ball = np.ascontiguousarray(ball[reach], dtype=np.int64)
        self._free_flat = np.ascontiguousarray(grid.free_mask, dtype=np.uint8).ravel()

    @classmethod
    def cached(cls, grid: TsdfGrid, radius: float, margin: float = 0.1) -> "SafetyField":
        cache = getattr(grid, "_safety_cache", None)
        key = (grid.version, round(radius, 9), round(margin, 9))
        if cache is not None and key in cache:
            return cache[key]
        sf = cls(grid, radius, margin)
        grid._safety_cache = {key: sf}
        return sf

    def _exact(self, points) -> np.ndarray:
        """Per-point ball test for points in the EDT's uncertainty band."""
        out = ball_safe_kernel(np.ascontiguousarray(points), self._ball,
                               self.grid.lo_key, np.array(self.grid.shape, dtype=np.int64),
                               self._free_flat, self.radius, self.grid.voxel_size,
                               self.grid.origin)
        return out.astype(bool)

    def points_safe(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        flat, inb = self.grid._flat(self.grid.key_of(p))
        edt = np.where(inb, self._edt.ravel()[flat], 0.0)
        safe = edt - self._halfdiag > self.radius
        unsafe = edt + self._halfdiag <= self.radius
        border = ~safe & ~unsafe
        if np.any(border):
            safe[border] = self._exact(p[border])
        return safe

    def point_safe(self, point) -> bool:
        return bool(self.points_safe(np.asarray(point)[None])[0])

    def _segment_points(self, p0, p1):
        length = float(np.linalg.norm(p1 - p0))
        n = max(1, int(np.ceil(length / (0.5 * self.grid.voxel_size))))
        ts = np.linspace(0.0, 1.0, n + 1)
        return p0 + ts[:, None] * (p1 - p0)

    def segment_safe(self, p0, p1) -> bool:
        """Sampled every half voxel; endpoints included."""
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        return bool(np.all(self.points_safe(self._segment_points(p0, p1))))


# -- values ---------------------------------------------------------------------


def _leaf_value(tree: PlannerTree, spec: ValueSpec, parent: TreeNode,
                gain: float, cost: float) -> float:
    if spec.kind == "exponential":
        return parent.value + gain * float(np.exp(-spec.lam * cost))
    if spec.kind == "linear":
        return parent.value + gain - spec.alpha * cost
    g = parent.path_gain + gain
    c = parent.path_cost + cost
    return g / c if c > 0 else 0.0


def _subtree_offsets(tree: PlannerTree, node: TreeNode):
    """Root-path gain/cost sums of the subtree, relative to the node's parent.

    Uses the cached per-node path sums (differences stay valid even while the
    subtree is detached); reusable across candidate parents.
    """
    ids = tree.subtree_ids(node.id)
    pg = np.fromiter((tree.nodes[k].path_gain for k in ids), float, len(ids))
    pc = np.fromiter((tree.nodes[k].path_cost for k in ids), float, len(ids))
    return pg - (node.path_gain - node.gain), pc - node.path_cost


def _subtree_value_under(tree: PlannerTree, spec: ValueSpec, node: TreeNode,
                         parent: TreeNode, edge_cost: float, offsets=None) -> float:
    """Value node would take if re-parented under `parent` with `edge_cost`."""
    if spec.kind == "exponential":
        return parent.value + node.gain * float(np.exp(-spec.lam * edge_cost))
    if spec.kind == "linear":
        return parent.value + node.gain - spec.alpha * edge_cost
    pg, pc = _subtree_offsets(tree, node) if offsets is None else offsets
    g0 = parent.path_gain
    c0 = parent.path_cost + edge_cost
    if pg.size <= 48:  # typical subtrees are tiny; skip array overhead
        best = -np.inf
        for i in range(pg.size):
            c = c0 + pc[i]
            r = (g0 + pg[i]) / c if c > 0 else 0.0
            if r > best:
                best = r
        return best
    c = c0 + pc
    safe_c = np.where(c > 0, c, 1.0)
    return float(np.max(np.where(c > 0, (g0 + pg) / safe_c, 0.0)))


def recompute_values(tree: PlannerTree, value_spec: ValueSpec) -> PlannerTree:
    """One pass making every node value consistent with the cached gains/costs."""
    root = tree.root
    root.gain = root.cost = 0.0
    root.path_gain = root.path_cost = 0.0
    order = tree.bfs_ids()
    for nid in order[1:]:
        node = tree.nodes[nid]
        parent = tree.nodes[node.parent]
        node.path_gain = parent.path_gain + node.gain
        node.path_cost = parent.path_cost + node.cost
        if value_spec.kind == "exponential":
            node.value = parent.value + node.gain * float(np.exp(-value_spec.lam * node.cost))
        elif value_spec.kind == "linear":
            node.value = parent.value + node.gain - value_spec.alpha * node.cost
    if value_spec.kind == "global_normalization":
        for nid in reversed(order):
            node = tree.nodes[nid]
            ratio = node.path_gain / node.path_cost if node.path_cost > 0 else 0.0
            best = max([tree.nodes[c].value for c in node.children], default=-np.inf)
            node.value = max(ratio, best)
        root.value = 0.0
    else:
        root.value = 0.0
    return tree


def _refresh_subtree(tree: PlannerTree, spec: ValueSpec, node_id: int):
    """Recompute path sums and values inside one subtree (parent data current)."""
    stack = [node_id]
    order = []
    while stack:
        nid = stack.pop()
        order.append(nid)
        node = tree.nodes[nid]
        parent = tree.nodes[node.parent]
        node.path_gain = parent.path_gain + node.gain
        node.path_cost = parent.path_cost + node.cost
        if spec.kind == "exponential":
            node.value = parent.value + node.gain * float(np.exp(-spec.lam * node.cost))
        elif spec.kind == "linear":
            node.value = parent.value + node.gain - spec.alpha * node.cost
        stack.extend(node.children)
    if spec.kind == "global_normalization":
        for nid in reversed(order):
            node = tree.nodes[nid]
            ratio = node.path_gain / node.path_cost if node.path_cost > 0 else 0.0
            best = max([tree.nodes[c].value for c in node.children], default=-np.inf)
            node.value = max(ratio, best)


def _bubble_up(tree: PlannerTree, spec: ValueSpec, from_id: int | None):
    """Re-derive subtree-max values along the ancestor chain (v_GN only)."""
    if spec.kind != "global_normalization":
        return
    cur = from_id
    while cur is not None:
        node = tree.nodes[cur]
        if cur == tree.root_id:
            node.value = 0.0
            break
        ratio = node.path_gain / node.path_cost if node.path_cost > 0 else 0.0
        best = max([tree.nodes[c].value for c in node.children], default=-np.inf)
        node.value = max(ratio, best)
        cur = node.parent


# -- planner operations -----------------------------------------------------------


def sample_viewpoint(tree: PlannerTree, robot_pose: Pose, grid: TsdfGrid,
                     cfg: PlannerConfig, rng: np.random.Generator) -> np.ndarray:
    """Two-stage sampling: local sphere until n_local nearby nodes, then global."""
    n_near = len(tree.radius_ids(robot_pose.position, cfg.r_local))
    bounds = cfg.sampling_bounds
    if n_near < cfg.n_local:
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm > 1e-12:
            r = cfg.r_local * rng.uniform() ** (1.0 / 3.0)
            p = robot_pose.position + direction / norm * r
            # Clamp into the sampling box (degenerate boxes, e.g. a fixed
            # flight altitude, would reject almost every sphere sample).
            return np.clip(p, bounds.lo, bounds.hi)
    return rng.uniform(bounds.lo, bounds.hi)


def extend_edge(parent_node: TreeNode, target, grid: TsdfGrid, cfg: PlannerConfig,
                safety: SafetyField | None = None):
    """Straight segment from the parent toward target, clipped to l_max and
    truncated before clearance fails. Returns a Trajectory or None.

    The robot's own position is traversable by definition, so when extending
    from the tree root a short grace zone around it may override samples the
    (possibly just-corrected) map now flags; the segment endpoint always has
    to be safe on the current map.
    """
    if safety is None:
        safety = SafetyField.cached(grid, cfg.collision_radius, cfg.safety_margin)
    start = parent_node.trajectory.end.position
    delta = np.asarray(target, dtype=float) - start
    dist = float(np.linalg.norm(delta))
    if dist < 1e-9:
        return None
    direction = delta / dist
    length = min(dist, cfg.l_max)
    step = 0.5 * grid.voxel_size
    n = max(1, int(np.ceil(length / step)))
    ts = np.linspace(0.0, length, n + 1)
    safe = safety.points_safe(start + ts[:, None] * direction)
    if parent_node.parent is None:
        grace = cfg.safety_margin + 2.0 * grid.voxel_size
        passable = safe | (ts <= grace)
    else:
        passable = safe
    if not passable[0]:
        return None
    bad = np.nonzero(~passable)[0]
    last = (bad[0] - 1) if bad.size else (ts.size - 1)
    while last > 0 and not safe[last]:
        last -= 1  # the node itself must sit in certified free space
    length = float(ts[last])
    if length < grid.voxel_size:
        return None
    end = start + length * direction
    yaw = parent_node.trajectory.end.yaw
    return Trajectory(Pose(start.copy(), yaw), Pose(end, yaw))


def insert_node(tree: PlannerTree, viewpoint_trajectory: Trajectory, grid: TsdfGrid,
                cfg: PlannerConfig, safety: SafetyField | None = None):
    """Add a sampled viewpoint: gain once, best parent within l_max, then
    rewire neighbors onto the new node where that strictly helps. Returns the
    new node id, or None when no neighbor connects."""
    if safety is None:
        safety = SafetyField.cached(grid, cfg.collision_radius, cfg.safety_margin)
    pos = viewpoint_trajectory.end.position
    ye = yaw_optimize(grid, pos, cfg.camera, cfg.gain, cfg.f_sub)
    tree.gain_evaluations += 1
    gain, yaw = ye.best_gain, ye.best_yaw

    neighbors = []
    for nid in tree.radius_ids(pos, cfg.l_max):
        d = float(np.linalg.norm(tree.nodes[nid].position - pos))
        if d >= 1e-9:
            neighbors.append((nid, d))
    if not neighbors:
        return None

    def edge_cost(parent: TreeNode) -> float:
        return edge_time(parent.position, parent.trajectory.end.yaw, pos, yaw,
                         cfg.limits)

    # Rank candidate parents first (value for the full planner, distance for
    # plain RRT), then collision-check in rank order; the first clear one is
    # the best feasible parent.
    if cfg.variant == "full":
        ranked = sorted(
            ((_leaf_value(tree, cfg.value, tree.nodes[nid], gain,
                          edge_cost(tree.nodes[nid])), nid) for nid, _ in neighbors),
            key=lambda t: (-t[0], t[1]))
    else:
        ranked = [(None, nid) for nid, _ in
                  sorted(neighbors, key=lambda t: (t[1], t[0]))]
    parent_id = None
    for _, nid in ranked:
        if safety.segment_safe(tree.nodes[nid].position, pos):
            parent_id = nid
            break
    if parent_id is None:
        return None
    cost = edge_cost(tree.nodes[parent_id])

    parent = tree.nodes[parent_id]
    traj = Trajectory(Pose(parent.position.copy(), parent.trajectory.end.yaw),
                      Pose(pos.copy(), yaw), cost)
    node = TreeNode(tree._take_id(), None, traj, gain=gain, cost=cost,
                    best_yaw=yaw)
    tree.attach(node, parent_id)
    node.path_gain = parent.path_gain + gain
    node.path_cost = parent.path_cost + cost
    node.value = _leaf_value(tree, cfg.value, parent, gain, cost)
    _bubble_up(tree, cfg.value, parent_id)

    if cfg.variant == "full":
        for nid, _ in neighbors:
            if nid == parent_id or nid == tree.root_id:
                continue
            other = tree.nodes[nid]
            if tree.is_ancestor(nid, node.id):
                continue
            c = edge_time(pos, yaw, other.position, other.best_yaw, cfg.limits)
            v_new = _subtree_value_under(tree, cfg.value, other, node, c)
            if v_new > other.value and safety.segment_safe(pos, other.position):
                _reparent(tree, cfg.value, other, node, c, cfg.limits)
    return node.id


def _reparent(tree: PlannerTree, spec: ValueSpec, node: TreeNode,
              new_parent: TreeNode, edge_cost: float, limits: MotionLimits):
    old_parent = node.parent
    tree.detach(node.id)
    node.trajectory = Trajectory(Pose(new_parent.position.copy(),
                                      new_parent.trajectory.end.yaw),
                                 Pose(node.position.copy(), node.best_yaw), edge_cost)
    node.cost = edge_cost
    node.parent = new_parent.id
    new_parent.children.append(node.id)
    _refresh_subtree(tree, spec, node.id)
    _bubble_up(tree, spec, old_parent)
    _bubble_up(tree, spec, new_parent.id)


def select_next(tree: PlannerTree):
    """Root child whose subtree holds the globally best value (ties: low id)."""
    root = tree.root
    if not root.children:
        raise ExhaustedTreeError("root has no children")
    best = None
    for cid in sorted(root.children):
        peak = max(tree.nodes[nid].value for nid in tree.subtree_ids(cid))
        if best is None or peak > best[0] + 1e-15:
            best = (peak, cid)
    return best[1]


def advance_root(tree: PlannerTree, executed_child: int, grid: TsdfGrid,
                 cfg: PlannerConfig, safety: SafetyField | None = None) -> PlannerTree:
    """Re-root at the executed child; keep sibling branches alive by rewiring,
    falling back to re-inserting the old root pose as a viewpoint."""
    if safety is None:
        safety = SafetyField.cached(grid, cfg.collision_radius, cfg.safety_margin)
    old_root = tree.root
    if executed_child not in old_root.children:
        raise ValueError("executed node is not a child of the root")
    old_pose = old_root.trajectory.end.copy()
    siblings = sorted(c for c in old_root.children if c != executed_child)

    # Orphan branches leave the node table until reattached; they must not
    # serve as rewiring parents for each other or for themselves.
    orphan_nodes: dict[int, dict[int, TreeNode]] = {}
    for sid in siblings:
        sub = {nid: tree.nodes[nid] for nid in tree.subtree_ids(sid)}
        tree.detach(sid)
        for nid in sub:
            del tree.nodes[nid]
        orphan_nodes[sid] = sub
    tree.detach(executed_child)
    del tree.nodes[old_root.id]
    new_root = tree.nodes[executed_child]
    tree.root_id = executed_child
    new_root.parent = None
    new_root.gain = new_root.cost = new_root.value = 0.0
    new_root.trajectory = _degenerate(new_root.trajectory.end)
    tree._index_dirty = True
    recompute_values(tree, cfg.value)

    old_root_node = None

    def ensure_old_root_node():
        nonlocal old_root_node
        if old_root_node is not None:
            return old_root_node
        if not safety.segment_safe(new_root.position, old_pose.position):
            return None
        ye = yaw_optimize(grid, old_pose.position, cfg.camera, cfg.gain, cfg.f_sub)
        tree.gain_evaluations += 1
        c = cost_time(Trajectory(Pose(new_root.position.copy(), new_root.trajectory.end.yaw),
                                 Pose(old_pose.position.copy(), ye.best_yaw)), cfg.limits)
        node = TreeNode(tree._take_id(), None,
                        Trajectory(Pose(new_root.position.copy(), new_root.trajectory.end.yaw),
                                   Pose(old_pose.position.copy(), ye.best_yaw), c),
                        gain=ye.best_gain, cost=c, best_yaw=ye.best_yaw)
        tree.attach(node, new_root.id)
        node.path_gain, node.path_cost = node.gain, node.cost
        node.value = _leaf_value(tree, cfg.value, new_root, node.gain, node.cost)
        _bubble_up(tree, cfg.value, new_root.id)
        old_root_node = node
        return node

    def link(head: TreeNode, parent: TreeNode):
        c = edge_time(parent.position, parent.trajectory.end.yaw,
                      head.position, head.best_yaw, cfg.limits)
        head.parent = parent.id
        parent.children.append(head.id)
        head.trajectory = Trajectory(Pose(parent.position.copy(), parent.trajectory.end.yaw),
                                     Pose(head.position.copy(), head.best_yaw), c)
        head.cost = c
        tree._index_dirty = True
        _refresh_subtree(tree, cfg.value, head.id)
        _bubble_up(tree, cfg.value, parent.id)

    for sid in siblings:
        sub = orphan_nodes[sid]
        head = sub[sid]
        connected = tree.radius_ids(head.position, cfg.l_max)  # orphans excluded
        tree.nodes.update(sub)
        tree._index_dirty = True
        attached = False
        if cfg.variant == "full":
            offsets = _subtree_offsets(tree, head)
            ranked = []
            for nid in connected:
                cand = tree.nodes[nid]
                d = float(np.linalg.norm(cand.position - head.position))
                if d < 1e-9:
                    continue
                c = edge_time(cand.position, cand.trajectory.end.yaw,
                              head.position, head.best_yaw, cfg.limits)
                v = _subtree_value_under(tree, cfg.value, head, cand, c, offsets)
                ranked.append((v, nid, c))
            ranked.sort(key=lambda t: (-t[0], t[1]))
            for _, nid, _c in ranked:
                if safety.segment_safe(tree.nodes[nid].position, head.position):
                    link(head, tree.nodes[nid])
                    attached = True
                    break
        if not attached:
            anchor = ensure_old_root_node()
            if anchor is not None \
                    and np.linalg.norm(anchor.position - head.position) <= cfg.l_max + 1e-12 \
                    and np.linalg.norm(anchor.position - head.position) > 1e-9 \
                    and safety.segment_safe(anchor.position, head.position):
                link(head, anchor)
                attached = True
        if not attached:
            # Nothing reaches this branch anymore; drop it.
            for nid in sub:
                del tree.nodes[nid]
            tree._index_dirty = True
    recompute_values(tree, cfg.value)
    return tree


def update_gains(tree: PlannerTree, grid: TsdfGrid, robot_pose: Pose,
                 cfg: PlannerConfig) -> PlannerTree:
    """Refresh gains of near-robot nodes whose gain has not reached zero."""
    for nid in tree.radius_ids(robot_pose.position, cfg.r_update):
        if nid == tree.root_id:
            continue
        node = tree.nodes[nid]
        if node.gain <= 0.0:
            continue
        ye = yaw_optimize(grid, node.position, cfg.camera, cfg.gain, cfg.f_sub)
        tree.gain_evaluations += 1
        node.gain = ye.best_gain
        node.best_yaw = ye.best_yaw
        node.gain_dirty = False
        node.trajectory.end.yaw = ye.best_yaw
        node.cost = cost_time(node.trajectory, cfg.limits)
        for cid in node.children:
            child = tree.nodes[cid]
            child.trajectory.start.yaw = ye.best_yaw
            child.cost = cost_time(child.trajectory, cfg.limits)
    return tree


def global_rewire(tree: PlannerTree, grid: TsdfGrid, cfg: PlannerConfig,
                  safety: SafetyField | None = None) -> PlannerTree:
    """Breadth-first pass re-parenting any node whose value strictly improves."""
    if cfg.variant != "full":
        return tree
    if safety is None:
        safety = SafetyField.cached(grid, cfg.collision_radius, cfg.safety_margin)
    for nid in tree.bfs_ids():
        if nid == tree.root_id or nid not in tree.nodes:
            continue
        node = tree.nodes[nid]
        # Rank improving candidates by hypothetical value before any collision
        # work; the first collision-free one is the best feasible re-parent.
        sub_ids = set(tree.subtree_ids(nid))
        offsets = _subtree_offsets(tree, node)
        ranked = []
        for cid in tree.radius_ids(node.position, cfg.l_max):
            if cid == node.parent or cid in sub_ids:
                continue
            cand = tree.nodes[cid]
            d = float(np.linalg.norm(cand.position - node.position))
            if d < 1e-9:
                continue
            c = edge_time(cand.position, cand.trajectory.end.yaw,
                          node.position, node.best_yaw, cfg.limits)
            v = _subtree_value_under(tree, cfg.value, node, cand, c, offsets)
            if v > node.value:
                ranked.append((v, cid, c))
        ranked.sort(key=lambda t: (-t[0], t[1]))
        for v, cid, c in ranked:
            if safety.segment_safe(tree.nodes[cid].position, node.position):
                _reparent(tree, cfg.value, node, tree.nodes[cid], c, cfg.limits)
                break
    return tree


def _prune_exhausted_leaves(tree: PlannerTree, target: int):
    """Drop zero-gain leaves (oldest first) until the tree fits the target.

    A zero-gain leaf can never hold a subtree's best value and the gain
    refresh policy never revisits zero-gain nodes, so removal cannot change
    any planning decision.
    """
    while len(tree) > target:
        doomed = [nid for nid in sorted(tree.nodes)
                  if nid != tree.root_id and not tree.nodes[nid].children
                  and tree.nodes[nid].gain <= 0.0]
        if not doomed:
            return
        for nid in doomed[: max(1, len(tree) - target)]:
            tree.detach(nid)
            del tree.nodes[nid]
        tree._index_dirty = True


def _try_expand(tree: PlannerTree, grid: TsdfGrid, robot_pose: Pose,
                cfg: PlannerConfig, rng: np.random.Generator,
                safety: SafetyField) -> bool:
    target = sample_viewpoint(tree, robot_pose, grid, cfg, rng)
    nearest = tree.nodes[tree.nearest_id(target)]
    traj = extend_edge(nearest, target, grid, cfg, safety)
    if traj is None:
        return False
    return insert_node(tree, traj, grid, cfg, safety) is not None


def plan_step(tree: PlannerTree, grid: TsdfGrid, robot_state, cfg: PlannerConfig,
              rng: np.random.Generator) -> Trajectory:
    """One receding-horizon cycle: expand with the segment's budget, select the
    best adjacent node, re-root on it, refresh gains/values, rewire, and return
    the selected trajectory for execution."""
    robot_pose = robot_state.reported
    duration = max(0.0, robot_state.time - tree.last_plan_time)
    tree.last_plan_time = robot_state.time

    if cfg.variant == "discard_tree":
        tree.reset(robot_pose)

    safety = SafetyField.cached(grid, cfg.collision_radius, cfg.safety_margin)
    if cfg.max_tree_size is not None and len(tree) > cfg.max_tree_size:
        _prune_exhausted_leaves(tree, cfg.max_tree_size)
    budget = int(round(cfg.expansion_rate * duration))
    for _ in range(budget):
        if _try_expand(tree, grid, robot_pose, cfg, rng, safety):
            tree.consecutive_failures = 0
        else:
            tree.consecutive_failures += 1
    while not tree.root.children:
        if tree.consecutive_failures >= cfg.max_sample_failures:
            raise ExhaustedTreeError(
                f"no viable expansion after {tree.consecutive_failures} failures")
        if _try_expand(tree, grid, robot_pose, cfg, rng, safety):
            tree.consecutive_failures = 0
        else:
            tree.consecutive_failures += 1

    recompute_values(tree, cfg.value)
    child = select_next(tree)
    trajectory = tree.nodes[child].trajectory
    trajectory = Trajectory(trajectory.start.copy(), trajectory.end.copy(),
                            trajectory.duration)
    advance_root(tree, child, grid, cfg, safety)
    if cfg.variant != "discard_tree":
        update_gains(tree, grid, tree.root.trajectory.end, cfg)
        recompute_values(tree, cfg.value)
        global_rewire(tree, grid, cfg, safety)
    return trajectory
