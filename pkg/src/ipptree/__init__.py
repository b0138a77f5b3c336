"""Online informative path planning over a TSDF voxel map.

A single trajectory tree is continuously expanded, rewired, and executed in a
receding-horizon fashion; gains come from ray-cast visibility over the fused
map. Includes a deterministic kinematic simulator and a benchmark harness.
"""

__version__ = "0.1.0"

from .geometry import Aabb, Pose
from .tsdf_map import (
    TsdfGrid,
    VoxelClass,
    classify,
    fuse_distance,
    impact_factor,
    input_weight,
    integrate_pointcloud,
)
from .raycast import (
    CameraModel,
    VisibleSet,
    cast_ray,
    exhaustive_visible_voxels,
    visible_voxels,
)
