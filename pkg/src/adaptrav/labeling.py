"""Near-to-far self-supervised label generation.

An image taken at time t is labeled after a delay d using LiDAR
accumulated over [t, t+d]: the labeled voxels are trimmed to those near
the driven path (where LiDAR is trustworthy) and within a far radius of
the image pose, then raycast back into the camera to produce per-pixel
cost labels with correct occlusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import terrain
from .geometry import CameraExtrinsics, CameraIntrinsics, Pose, camera_pose, raycast
from .voxelmap import VoxelMap


@dataclass
class LabelingParams:
    delay: float = 5.0          # seconds between image and label-ready
    r_near: float = 30.0        # meters: voxel must be this close to the path
    r_far: float = 100.0        # meters: voxel must be this close to the image pose
    min_pixels: int = 500       # drop pairs with fewer labeled pixels
    pair_rate: float = 1.4      # labeled images per second of stream time
    map_resolution: float = 0.25
    map_extent_xy: float = 300.0
    map_extent_z: float = 40.0
    terrain: terrain.TerrainParams = field(default_factory=terrain.TerrainParams)


@dataclass
class LabelMask:
    """Per-pixel optional cost labels for one image (NaN = unlabeled)."""
    costs: np.ndarray          # (H, W) float32
    image_ts: float
    pose: Pose

    @property
    def valid_count(self):
        return int(np.isfinite(self.costs).sum())


@dataclass
class TrainingPair:
    frame_index: int
    mask: LabelMask
    image_ts: float
    ready_ts: float


def admissible_mask(vmap: VoxelMap, path_xy, image_xy, r_near=30.0, r_far=100.0):
    """Voxel-level admissibility: keep voxels whose center is horizontally
    within r_near of any path pose AND within r_far of the image pose."""
    ijk, _, _, _, _, _ = vmap.arrays()
    n = ijk.shape[0]
    path_xy = np.atleast_2d(np.asarray(path_xy, dtype=np.float64))
    if n == 0 or path_xy.shape[0] == 0:
        return np.zeros(n, dtype=bool)
    centers = vmap.voxel_center(ijk)[:, :2]
    d_near, _ = cKDTree(path_xy).query(centers)
    d_far = np.linalg.norm(centers - np.asarray(image_xy, dtype=np.float64)[None, :2],
                           axis=1)
    return (d_near <= r_near) & (d_far <= r_far)


def build_window_map(scans, image_pose: Pose, path_xy, params: LabelingParams):
    """Voxel map from the scans of one labeling window, pre-trimmed to a
    loose admissible corridor (the exact voxel-level trim happens later)."""
    vmap = VoxelMap(params.map_resolution, params.map_extent_xy,
                    params.map_extent_z, center=image_pose.position)
    path_xy = np.atleast_2d(np.asarray(path_xy, dtype=np.float64))
    tree = cKDTree(path_xy)
    margin = vmap.resolution
    for scan in scans:
        pts = scan.world_points()
        d_near, _ = tree.query(pts[:, :2])
        d_far = np.linalg.norm(pts[:, :2] - image_pose.position[None, :2], axis=1)
        keep = (d_near <= params.r_near + margin) & (d_far <= params.r_far + margin)
        if keep.any():
            vmap.integrate_points(pts[keep], scan.timestamp)
    return vmap


def generate_label_mask(image_pose: Pose, intrinsics: CameraIntrinsics,
                        extrinsics: CameraExtrinsics, labeled_map: VoxelMap,
                        path_xy, params: LabelingParams = None) -> LabelMask:
    """Raycast the admissible labeled voxels into the camera view.

    Pixels keep the cost of the first voxel their ray hits (occluded voxels
    never label anything); the bottom image half is cleared since only the
    long-range top half is supervised.
    """
    p = params or LabelingParams()
    keep = admissible_mask(labeled_map, path_xy, image_pose.position[:2],
                           p.r_near, p.r_far)
    solids = labeled_map.solids(labeled_only=True, mask=keep)
    cam = camera_pose(image_pose, extrinsics)
    rc = raycast(solids, cam, intrinsics, max_range=p.r_far * 1.2 + 10.0)
    costs = rc.cost.copy()
    costs[intrinsics.height // 2:, :] = np.nan
    return LabelMask(costs, image_pose.timestamp, image_pose)


def label_window_map(scans, image_pose, path_xy, params: LabelingParams):
    """Accumulate, feature-extract and cost-label the window map."""
    vmap = build_window_map(scans, image_pose, path_xy, params)
    if vmap.occupied_count == 0:
        return vmap
    feats = terrain.extract_features(vmap, params.terrain)
    cost = terrain.compute_cost_grid(feats, params.terrain)
    terrain.label_voxels(vmap, cost, feats.ground, params.terrain)
    return vmap


def make_training_mask(scans, image_pose, intrinsics, extrinsics, path_xy,
                       params: LabelingParams) -> LabelMask:
    """Full labeling pipeline for one image: window map -> costs -> raycast."""
    vmap = label_window_map(scans, image_pose, path_xy, params)
    return generate_label_mask(image_pose, intrinsics, extrinsics, vmap,
                               path_xy, params)


def select_label_times(frame_times, pair_rate):
    """Indices of the frames to label, one per 1/pair_rate seconds."""
    frame_times = np.asarray(frame_times, dtype=np.float64)
    if frame_times.size == 0:
        return np.zeros(0, dtype=np.int64)
    n_pairs = int(np.floor(frame_times[-1] * pair_rate)) + 1
    targets = np.arange(n_pairs) / pair_rate
    idx = np.searchsorted(frame_times, targets)
    idx = np.clip(idx, 0, frame_times.size - 1)
    left = np.clip(idx - 1, 0, frame_times.size - 1)
    pick_left = np.abs(frame_times[left] - targets) <= np.abs(frame_times[idx] - targets)
    return np.where(pick_left, left, idx)


def run_label_scheduler(image_events, scans, params: LabelingParams, make_mask):
    """Pair selected images with delayed labels, in label-ready order.

    image_events: sorted (frame_index, timestamp) of every camera frame.
    scans: time-sorted scan objects (only .timestamp is required here).
    make_mask(frame_index, image_ts, scans_window) -> LabelMask or None.

    For each selected image at time t the pair is emitted at t + delay from
    the scans inside [t, t + delay]; masks that are None or have fewer than
    min_pixels labeled pixels are dropped. Only scans with timestamp
    <= t + delay are ever visible to a pair (causality).
    """
    if not image_events:
        return
    frame_idx = np.array([e[0] for e in image_events], dtype=np.int64)
    frame_ts = np.array([e[1] for e in image_events], dtype=np.float64)
    scan_ts = np.array([s.timestamp for s in scans], dtype=np.float64)
    for sel in select_label_times(frame_ts, params.pair_rate):
        t = float(frame_ts[sel])
        ready = t + params.delay
        lo = np.searchsorted(scan_ts, t, side="left")
        hi = np.searchsorted(scan_ts, ready, side="right")
        window = [scans[i] for i in range(lo, hi)]
        if not window:
            continue
        mask = make_mask(int(frame_idx[sel]), t, window)
        if mask is None or mask.valid_count < params.min_pixels:
            continue
        yield TrainingPair(int(frame_idx[sel]), mask, t, ready)
