"""Robot-centered sparse voxel map accumulating per-voxel point statistics.

Each occupied voxel stores sufficient statistics (count, coordinate sum,
coordinate second moment, max point height) so covariance eigenvalues can
be recovered in O(1) without keeping raw points. Voxels are addressed by
global integer coordinates floor(p / resolution); recentering only drops
voxels that left the extent, it never resamples.
"""

from __future__ import annotations

import numpy as np

from .geometry import Pose, VoxelSolids

# packed key layout: 20 bits per axis, bias keeps coordinates positive
_KEY_BIAS = 1 << 19
_KEY_SPAN = 1 << 20


class InsufficientPoints(ValueError):
    """Raised when a voxel has too few points for eigen analysis."""


def pack_keys(ijk):
    ijk = np.asarray(ijk, dtype=np.int64)
    if ijk.ndim == 1:
        ijk = ijk[None, :]
    return ((ijk[:, 0] + _KEY_BIAS) * _KEY_SPAN + (ijk[:, 1] + _KEY_BIAS)) * _KEY_SPAN \
        + (ijk[:, 2] + _KEY_BIAS)


def unpack_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    k = keys % _KEY_SPAN - _KEY_BIAS
    rest = keys // _KEY_SPAN
    j = rest % _KEY_SPAN - _KEY_BIAS
    i = rest // _KEY_SPAN - _KEY_BIAS
    return np.stack([i, j, k], axis=1)


class PointCloudScan:
    """One registered LiDAR scan: sensor-frame points plus the sensor pose."""

    def __init__(self, points, pose: Pose, timestamp: float):
        pts = np.asarray(points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError("scan needs a non-empty (N, 3) point array")
        self.points = pts
        self.pose = pose
        self.timestamp = float(timestamp)

    def world_points(self):
        return self.pose.to_world(self.points.astype(np.float64))


class VoxelMap:
    def __init__(self, resolution=0.25, extent_xy=120.0, extent_z=20.0,
                 center=(0.0, 0.0, 0.0)):
        self.resolution = float(resolution)
        self.extent_xy = float(extent_xy)
        self.extent_z = float(extent_z)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.last_update = -np.inf
        self.dropped_nonfinite = 0
        self._index = {}  # packed key -> row
        self._cap = 1024
        self._n = 0
        self._keys = np.zeros(self._cap, dtype=np.int64)
        self._count = np.zeros(self._cap, dtype=np.int64)
        self._sum = np.zeros((self._cap, 3), dtype=np.float64)
        self._moment = np.zeros((self._cap, 3, 3), dtype=np.float64)
        self._max_z = np.full(self._cap, -np.inf, dtype=np.float64)
        self._cost = np.full(self._cap, np.nan, dtype=np.float64)

    # ------------------------------------------------------------------
    @property
    def occupied_count(self):
        return self._n

    def _grow(self, need):
        while self._cap < need:
            self._cap *= 2
        for name in ("_keys", "_count", "_max_z", "_cost"):
            old = getattr(self, name)
            new = np.zeros(self._cap, dtype=old.dtype)
            if name == "_max_z":
                new.fill(-np.inf)
            elif name == "_cost":
                new.fill(np.nan)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)
        for name, shape in (("_sum", (self._cap, 3)), ("_moment", (self._cap, 3, 3))):
            old = getattr(self, name)
            new = np.zeros(shape, dtype=np.float64)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)

    def _in_extent(self, centers):
        d = centers - self.center[None, :]
        half_xy = 0.5 * self.extent_xy
        half_z = 0.5 * self.extent_z
        return (np.abs(d[:, 0]) <= half_xy) & (np.abs(d[:, 1]) <= half_xy) \
            & (np.abs(d[:, 2]) <= half_z)

    def voxel_center(self, ijk):
        return (np.asarray(ijk, dtype=np.float64) + 0.5) * self.resolution

    # ------------------------------------------------------------------
    def integrate_scan(self, scan: PointCloudScan):
        if scan.timestamp < self.last_update:
            raise ValueError(
                f"scan at t={scan.timestamp} is older than last map update {self.last_update}")
        self.integrate_points(scan.world_points(), scan.timestamp)

    def integrate_points(self, world_points, timestamp):
        """Fold world-frame points into per-voxel statistics."""
        pts = np.asarray(world_points, dtype=np.float64)
        finite = np.isfinite(pts).all(axis=1)
        self.dropped_nonfinite += int((~finite).sum())
        pts = pts[finite]
        if pts.shape[0] == 0:
            self.last_update = max(self.last_update, float(timestamp))
            return
        ijk = np.floor(pts / self.resolution).astype(np.int64)
        keep = self._in_extent(self.voxel_center(ijk))
        pts, ijk = pts[keep], ijk[keep]
        if pts.shape[0] == 0:
            self.last_update = max(self.last_update, float(timestamp))
            return

        packed = pack_keys(ijk)
        order = np.argsort(packed, kind="stable")
        packed, pts = packed[order], pts[order]
        uniq, inverse, counts = np.unique(packed, return_inverse=True, return_counts=True)

        rows = np.empty(uniq.shape[0], dtype=np.int64)
        index = self._index
        n = self._n
        for i, key in enumerate(uniq):
            r = index.get(int(key))
            if r is None:
                r = n
                index[int(key)] = r
                n += 1
            rows[i] = r
        if n > self._cap:
            self._grow(n)
        if n > self._n:
            self._keys[self._n:n] = 0  # filled below via rows
            self._n = n
        self._keys[rows] = uniq

        target = rows[inverse]
        np.add.at(self._count, target, 1)
        np.add.at(self._sum, target, pts)
        np.add.at(self._moment, target, pts[:, :, None] * pts[:, None, :])
        np.maximum.at(self._max_z, target, pts[:, 2])
        self.last_update = max(self.last_update, float(timestamp))

    # ------------------------------------------------------------------
    def recenter(self, new_center):
        """Scroll the window: drop voxels outside the extent around new_center."""
        self.center = np.asarray(new_center, dtype=np.float64).reshape(3)
        if self._n == 0:
            return
        ijk = unpack_keys(self._keys[:self._n])
        keep = self._in_extent(self.voxel_center(ijk))
        if keep.all():
            return
        kept = np.nonzero(keep)[0]
        m = kept.shape[0]
        self._keys[:m] = self._keys[kept]
        self._count[:m] = self._count[kept]
        self._sum[:m] = self._sum[kept]
        self._moment[:m] = self._moment[kept]
        self._max_z[:m] = self._max_z[kept]
        self._cost[:m] = self._cost[kept]
        # truncated rows must be fully cleared: they get reused for new voxels
        self._count[m:self._n] = 0
        self._sum[m:self._n] = 0.0
        self._moment[m:self._n] = 0.0
        self._max_z[m:self._n] = -np.inf
        self._cost[m:self._n] = np.nan
        self._n = m
        self._index = {int(k): r for r, k in enumerate(self._keys[:m])}

    # ------------------------------------------------------------------
    def row_of(self, ijk):
        key = int(pack_keys(np.asarray(ijk))[0])
        row = self._index.get(key)
        if row is None:
            raise KeyError(f"voxel {tuple(ijk)} not occupied")
        return row

    def voxel_eigenvalues(self, ijk):
        """Covariance eigenvalues (l1 >= l2 >= l3 >= 0) of one voxel's points."""
        row = self.row_of(ijk)
        n = self._count[row]
        if n < 3:
            raise InsufficientPoints(f"voxel {tuple(ijk)} has {n} point(s), need >= 3")
        mean = self._sum[row] / n
        cov = self._moment[row] / n - np.outer(mean, mean)
        vals = np.linalg.eigvalsh(cov)
        return np.clip(vals[::-1], 0.0, None)

    # ------------------------------------------------------------------
    def arrays(self):
        """Views of the live voxel statistics (ijk, count, sum, moment, max_z, cost)."""
        n = self._n
        return (unpack_keys(self._keys[:n]), self._count[:n], self._sum[:n],
                self._moment[:n], self._max_z[:n], self._cost[:n])

    def set_costs(self, costs):
        costs = np.asarray(costs, dtype=np.float64)
        if costs.shape[0] != self._n:
            raise ValueError("cost array must align with occupied voxels")
        self._cost[:self._n] = costs

    def solids(self, labeled_only=True, mask=None):
        """Occupied (optionally labeled) voxels as raycastable solids."""
        n = self._n
        keep = np.ones(n, dtype=bool)
        if labeled_only:
            keep &= np.isfinite(self._cost[:n])
        if mask is not None:
            keep &= mask
        idx = np.nonzero(keep)[0]
        return VoxelSolids(unpack_keys(self._keys[:n][idx]),
                           np.nan_to_num(self._cost[:n][idx]), self.resolution)

    def snapshot(self):
        """Independent copy for readers (snapshot isolation)."""
        out = VoxelMap(self.resolution, self.extent_xy, self.extent_z, self.center)
        out.last_update = self.last_update
        out.dropped_nonfinite = self.dropped_nonfinite
        out._cap = self._cap
        out._n = self._n
        out._keys = self._keys.copy()
        out._count = self._count.copy()
        out._sum = self._sum.copy()
        out._moment = self._moment.copy()
        out._max_z = self._max_z.copy()
        out._cost = self._cost.copy()
        out._index = dict(self._index)
        return out
