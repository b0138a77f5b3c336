"""Dev experiment: raycast equality, speedup, f_sub scaling."""
import time
import numpy as np
from ipptree import TsdfGrid, Aabb, Pose, CameraModel, visible_voxels, exhaustive_visible_voxels
from ipptree.geometry import box_sdf


def random_scene(rng, size=(8.0, 8.0, 5.0), nbox=4, s=0.1):
    g = TsdfGrid(s, Aabb([0, 0, 0], list(size)), truncation=2 * s)
    boxes = []
    for _ in range(nbox):
        lo = rng.uniform([0.5, 0.5, 0.5], [size[0] - 1.5, size[1] - 1.5, size[2] - 1.5])
        sz = rng.uniform(0.3, 2.0, 3)
        boxes.append(np.stack([lo, np.minimum(lo + sz, np.array(size) - 0.2)]))
    boxes = np.stack(boxes) if boxes else np.zeros((0, 2, 3))
    # synthesize a plausible map: observed shell around boxes
    idx = np.indices(g.shape).reshape(3, -1).T + g.lo_key
    centers = g.origin + (idx + 0.5) * s
    d = box_sdf(centers, boxes)
    observed = d < 0.5  # thick observed shell
    dd = np.clip(d, -g.truncation, g.truncation)
    g._d.ravel()[observed.ravel().nonzero()] = dd[observed]
    g._w.ravel()[observed.ravel().nonzero()] = 1.0
    g.version += 1
    return g, boxes


def main():
    rng = np.random.default_rng(7)
    cam = CameraModel(90.0, 73.7, 4.0)
    mism = 0
    t0 = time.perf_counter()
    for trial in range(30):
        g, boxes = random_scene(rng)
        pos = rng.uniform([1.0, 1.0, 1.0], [7.0, 7.0, 4.0])
        # keep pose out of solids
        while box_sdf(pos[None], boxes)[0] < 0.15:
            pos = rng.uniform([1.0, 1.0, 1.0], [7.0, 7.0, 4.0])
        pose = Pose(pos, rng.uniform(-np.pi, np.pi))
        vi = visible_voxels(g, pose, cam, 1.0)
        ve = exhaustive_visible_voxels(g, pose, cam)
        si = set(map(tuple, vi.keys.tolist()))
        se = set(map(tuple, ve.keys.tolist()))
        if si != se:
            mism += 1
            print(f"trial {trial}: MISMATCH iter-only={len(si-se)} orac-only={len(se-si)} total={len(se)}")
        else:
            pass
    print(f"equality trials done in {time.perf_counter()-t0:.2f}s, mismatches={mism}")

    # speedup on empty frustum, 5 m range, 0.1 voxel
    g = TsdfGrid(0.1, Aabb([0, 0, 0], [12, 12, 12]))
    pose = Pose([6.0, 6.0, 6.0], 0.3)
    cam5 = CameraModel(90.0, 73.7, 5.0)
    vi = visible_voxels(g, pose, cam5, 1.0)
    ve = exhaustive_visible_voxels(g, pose, cam5)
    print(f"visits iter={vi.visit_count} orac={ve.visit_count} ratio={ve.visit_count/vi.visit_count:.2f}x "
          f"wall iter={vi.wall_time*1e3:.1f}ms orac={ve.wall_time*1e3:.1f}ms wall-ratio={ve.wall_time/vi.wall_time:.2f}x")
    print(f"keys equal on empty: {set(map(tuple, vi.keys.tolist())) == set(map(tuple, ve.keys.tolist()))} n={len(vi)}")

    v3 = visible_voxels(g, pose, cam5, 3.0)
    print(f"f_sub scaling: n1={len(vi)} n3={len(v3)} ratio={len(vi)/len(v3):.2f} (target 9 +-20%: {9*0.8:.1f}..{9*1.2:.1f})")


if __name__ == "__main__":
    main()
