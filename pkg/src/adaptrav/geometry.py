"""Rigid transforms, pinhole projection, and voxel-grid raycasting.

Frame conventions used throughout the package:
  world / robot frame: x forward, y left, z up
  camera frame:        z forward (optical axis), x right, y down

Pixel coordinates are continuous with pixel centers at integer positions,
so the ray for pixel (u, v) passes exactly through (u, v) on the image
plane. A projected point is in-frame when it rounds to a valid pixel,
i.e. -0.5 <= u < width - 0.5 and likewise for v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_QUAT_TOL = 1e-9


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_multiply(a, b):
    """Hamilton product of two wxyz quaternions."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q):
    """Rotation matrix for a unit wxyz quaternion (local -> world)."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    """Unit wxyz quaternion from a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


class Pose:
    """Rigid pose: position, unit wxyz orientation quaternion, timestamp.

    The orientation rotates local-frame vectors into the world frame:
    p_world = R @ p_local + position.
    """

    __slots__ = ("position", "orientation", "timestamp", "_rot")

    def __init__(self, position, orientation, timestamp=0.0):
        self.position = np.asarray(position, dtype=np.float64).reshape(3)
        self.orientation = quat_normalize(orientation)
        if timestamp < 0:
            raise ValueError("pose timestamp must be non-negative")
        self.timestamp = float(timestamp)
        self._rot = None

    @staticmethod
    def identity(timestamp=0.0):
        return Pose(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), timestamp)

    @property
    def rotation_matrix(self):
        if self._rot is None:
            self._rot = quat_to_matrix(self.orientation)
        return self._rot

    def to_world(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix.T + self.position

    def to_local(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.position) @ self.rotation_matrix

    def __repr__(self):
        return f"Pose(t={self.timestamp:.3f}, p={self.position}, q={self.orientation})"


def transform_point(pose: Pose, point):
    """World-frame point expressed in the pose's own frame (inverse rigid transform)."""
    return pose.to_local(point)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass
class CameraExtrinsics:
    """Camera mount relative to the robot frame: translation plus downward pitch."""
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pitch: float = 0.0  # radians, positive tilts the optical axis down

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)


# Columns are the camera axes expressed in the robot frame (zero pitch):
# x_cam = -y_robot, y_cam = -z_robot, z_cam = +x_robot.
ROBOT_TO_CAMERA_AXES = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def camera_pose(robot_pose: Pose, extrinsics: CameraExtrinsics) -> Pose:
    """Pose of the camera frame in the world, from a robot pose and mount extrinsics."""
    cp, sp = np.cos(extrinsics.pitch), np.sin(extrinsics.pitch)
    # camera axes in the robot frame, pitched down about robot y
    x_cam = np.array([0.0, -1.0, 0.0])
    z_cam = np.array([cp, 0.0, -sp])
    y_cam = np.cross(z_cam, x_cam)
    r_rc = np.stack([x_cam, y_cam, z_cam], axis=1)
    r_wc = robot_pose.rotation_matrix @ r_rc
    t = robot_pose.to_world(extrinsics.translation)
    return Pose(t, matrix_to_quat(r_wc), robot_pose.timestamp)


def project_points(intrinsics: CameraIntrinsics, points, z_min=0.1):
    """Pinhole projection of camera-frame points.

    Returns (uv, valid): continuous pixel coordinates and a mask that is
    False where z <= z_min or the projection falls outside the image.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = pts[:, 2]
    safe_z = np.where(z > z_min, z, 1.0)
    u = intrinsics.fx * pts[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * pts[:, 1] / safe_z + intrinsics.cy
    valid = (
        (z > z_min)
        & (u >= -0.5) & (u < intrinsics.width - 0.5)
        & (v >= -0.5) & (v < intrinsics.height - 0.5)
    )
    return np.stack([u, v], axis=1), valid


def project_pixel(intrinsics: CameraIntrinsics, camera_point, z_min=0.1):
    """Project one camera-frame point; None when behind the camera or out of frame."""
    uv, valid = project_points(intrinsics, np.asarray(camera_point, dtype=np.float64)[None, :], z_min)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def pixel_rays(intrinsics: CameraIntrinsics, cam_pose: Pose):
    """Unit world-frame ray directions through every pixel center, row-major."""
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([
        (uu - intrinsics.cx) / intrinsics.fx,
        (vv - intrinsics.cy) / intrinsics.fy,
        np.ones_like(uu),
    ], axis=-1).reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ cam_pose.rotation_matrix.T


@dataclass
class VoxelSolids:
    """Sparse set of occupied voxels presented to the raycaster.

    indices are global integer voxel coordinates (floor(world / resolution)).
    """
    indices: np.ndarray  # (N, 3) int64
    costs: np.ndarray    # (N,) float64
    resolution: float

    @staticmethod
    def empty(resolution):
        return VoxelSolids(np.zeros((0, 3), dtype=np.int64), np.zeros(0), resolution)

    def __len__(self):
        return self.indices.shape[0]


@dataclass
class RaycastImage:
    hit: np.ndarray          # (H, W) bool
    depth: np.ndarray        # (H, W) float32, NaN where miss
    cost: np.ndarray         # (H, W) float32, NaN where miss
    voxel_index: np.ndarray  # (H, W, 3) int64, valid only where hit

    @property
    def hit_count(self):
        return int(self.hit.sum())


class RaycastGrid:
    """Dense occupancy/cost volume prepared once and raycast many times."""

    def __init__(self, solids: VoxelSolids):
        self.resolution = float(solids.resolution)
        self.empty = len(solids) == 0
        if self.empty:
            self.lo = np.zeros(3, dtype=np.int64)
            self.dims = np.ones(3, dtype=np.int64)
            self.occ = np.zeros((1, 1, 1), dtype=bool)
            self.cost = np.zeros((1, 1, 1), dtype=np.float32)
            return
        self.lo = solids.indices.min(axis=0)
        hi = solids.indices.max(axis=0)
        self.dims = hi - self.lo + 1
        local = solids.indices - self.lo
        self.occ = np.zeros(tuple(self.dims), dtype=bool)
        self.cost = np.zeros(tuple(self.dims), dtype=np.float32)
        self.occ[local[:, 0], local[:, 1], local[:, 2]] = True
        self.cost[local[:, 0], local[:, 1], local[:, 2]] = solids.costs


def raycast(solids, cam_pose: Pose, intrinsics: CameraIntrinsics,
            max_range: float) -> RaycastImage:
    """Render the first-hit voxel per pixel by incremental grid traversal.

    Rays step one voxel at a time (Amanatides-Woo), so occluded voxels can
    never appear: each pixel reports the nearest solid voxel along its ray,
    with depth measured as euclidean distance from the camera center.
    Accepts VoxelSolids or a prebuilt RaycastGrid.
    """
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    grid = solids if isinstance(solids, RaycastGrid) else RaycastGrid(solids)
    h, w = intrinsics.height, intrinsics.width
    shape_img = (h, w)
    hit = np.zeros(shape_img, dtype=bool)
    depth = np.full(shape_img, np.nan, dtype=np.float32)
    cost = np.full(shape_img, np.nan, dtype=np.float32)
    voxel = np.zeros(shape_img + (3,), dtype=np.int64)
    if grid.empty:
        return RaycastImage(hit, depth, cost, voxel)

    res = grid.resolution
    lo = grid.lo
    dims = grid.dims
    occ = grid.occ
    cost_grid = grid.cost

    origin = cam_pose.position
    dirs = pixel_rays(intrinsics, cam_pose)
    n = dirs.shape[0]

    box_min = lo * res
    box_max = (lo + dims) * res
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_lo = (box_min[None, :] - origin[None, :]) * inv
    t_hi = (box_max[None, :] - origin[None, :]) * inv
    # axes with zero direction: inside slab -> (-inf, inf), outside -> empty
    zero = dirs == 0.0
    inside = (origin[None, :] >= box_min[None, :]) & (origin[None, :] <= box_max[None, :])
    t_near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t_lo, t_hi))
    t_far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t_lo, t_hi))
    t_enter = np.maximum(t_near.max(axis=1), 0.0)
    t_exit = np.minimum(t_far.min(axis=1), max_range)
    active = t_enter < t_exit

    eps = 1e-9 * max(1.0, np.abs(origin).max() + max_range)
    t_cur = t_enter + eps
    start = origin[None, :] + t_cur[:, None] * dirs
    ijk = np.floor(start / res).astype(np.int64) - lo[None, :]
    ijk = np.clip(ijk, 0, dims[None, :] - 1)

    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = (lo[None, :] + ijk + (step > 0)) * res
        t_max = np.where(zero, np.inf, (next_bound - origin[None, :]) / dirs)
        t_delta = np.where(zero, np.inf, res / np.abs(dirs))

    flat_hit_depth = np.full(n, np.nan)
    flat_hit_cost = np.full(n, np.nan)
    flat_hit_voxel = np.zeros((n, 3), dtype=np.int64)
    flat_hit = np.zeros(n, dtype=bool)

    idx = np.nonzero(active)[0]
    max_steps = int(dims.sum()) * 2 + 4
    for _ in range(max_steps):
        if idx.size == 0:
            break
        cur = ijk[idx]
        solid = occ[cur[:, 0], cur[:, 1], cur[:, 2]]
        if solid.any():
            hit_rows = idx[solid]
            flat_hit[hit_rows] = True
            flat_hit_depth[hit_rows] = np.maximum(t_cur[hit_rows], eps)
            flat_hit_cost[hit_rows] = cost_grid[cur[solid, 0], cur[solid, 1], cur[solid, 2]]
            flat_hit_voxel[hit_rows] = cur[solid] + lo[None, :]
            idx = idx[~solid]
            if idx.size == 0:
                break
        axis = np.argmin(t_max[idx], axis=1)
        t_cur[idx] = t_max[idx, axis]
        ijk[idx, axis] += step[idx, axis]
        t_max[idx, axis] += t_delta[idx, axis]
        moved = ijk[idx, axis]
        alive = (moved >= 0) & (moved < dims[axis]) & (t_cur[idx] <= t_exit[idx])
        idx = idx[alive]

    hit = flat_hit.reshape(shape_img)
    depth = flat_hit_depth.reshape(shape_img).astype(np.float32)
    cost = flat_hit_cost.reshape(shape_img).astype(np.float32)
    voxel = flat_hit_voxel.reshape(shape_img + (3,))
    return RaycastImage(hit, depth, cost, voxel)
