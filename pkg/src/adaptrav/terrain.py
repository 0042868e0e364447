"""Terrain features from the voxel map and their combination into a cost.

Per map column we estimate ground height (lowest dense voxel, smoothed by
an iterative data-weighted relaxation), object height above ground, slope
of the ground surface, and planarity from the covariance eigenvalues of
the near-ground voxels. The scalar cost is 10 for tall obstacles and
otherwise a clamped linear combination of planarity and slope in [0, 6].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .voxelmap import VoxelMap

COST_MAX = 10.0
COST_SOFT_MAX = 6.0


@dataclass
class TerrainParams:
    density_threshold: int = 3      # points for a cell to count as dense (eigen analysis)
    candidate_min_points: int = 1   # lowest voxel needs this many points to seed ground
    h_thresh: float = 1.0           # obstacle height threshold, meters
    s_max: float = 2.0              # slope clamp, rise/run
    w_planarity: float = 3.0
    w_slope: float = 6.0
    ground_tol: float = 1e-3        # relaxation convergence, meters
    ground_iters: int = 100
    ground_warmup: int = 12         # sweeps during which outliers may be rejected
    ground_reject: float = 0.5      # candidate above relaxed ground by this -> not ground
    data_weight_cap: int = 10       # counts above this saturate the data term
    fill_cells: int = 8             # how far interpolation may grow from data
    planarity_pool: int = 2         # voxels above ground pooled for eigen stats
    planarity_neighborhood: int = 1  # column radius pooled for eigen stats (1 -> 3x3)
    label_slab: float = 0.55        # non-obstacle labels go to voxels this close to ground
    obstacle_min_points: int = 10   # obstacle calls need this much column evidence
    eigen_eps: float = 1e-12


@dataclass
class FeatureGrid:
    """Per-column terrain features over a window of map columns.

    Arrays are indexed [ix, iy] with ix = i - origin[0] etc.; NaN marks
    undefined cells.
    """
    origin: np.ndarray              # (2,) int64, lowest (i, j) column index
    resolution: float
    ground: np.ndarray              # (nx, ny) float64
    f_h: np.ndarray
    f_s: np.ndarray
    f_p: np.ndarray
    column_points: np.ndarray = None  # total points per column
    relaxation_deltas: list = field(default_factory=list)

    @property
    def shape(self):
        return self.ground.shape


@dataclass
class CostGrid:
    origin: np.ndarray
    resolution: float
    cost: np.ndarray                # (nx, ny) float64, NaN where unlabeled


def planarity(l1, l2, l3, eps=1e-12):
    """Shape feature 2*(l2 - l3)/l1 in [0, 2]; None for degenerate cells."""
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    l3 = np.asarray(l3, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 2.0 * (l2 - l3) / l1
    out = np.where(l1 > eps, out, np.nan)
    if out.ndim == 0:
        val = float(out)
        return None if np.isnan(val) else val
    return out


def traversability_cost(f_h, f_p, f_s, params: TerrainParams = None):
    """Combine features into the scalar cost: 10 above the height threshold,
    otherwise clamp(6 - w_p*f_p + w_s*f_s, 0, 6).

    Accepts scalars or arrays; NaN feature values follow the rules: missing
    planarity leaves the cell unlabeled unless height alone decides, and
    missing slope contributes nothing.
    """
    p = params or TerrainParams()
    f_h = np.asarray(f_h, dtype=np.float64)
    f_p = np.asarray(f_p, dtype=np.float64)
    f_s = np.asarray(f_s, dtype=np.float64)
    f_h, f_p, f_s = np.broadcast_arrays(f_h, f_p, f_s)
    slope_term = np.where(np.isnan(f_s), 0.0, np.clip(f_s, 0.0, p.s_max))
    soft = np.clip(COST_SOFT_MAX - p.w_planarity * f_p + p.w_slope * slope_term,
                   0.0, COST_SOFT_MAX)
    obstacle = ~np.isnan(f_h) & (f_h >= p.h_thresh)
    out = np.where(obstacle, COST_MAX, soft)
    out = np.where(np.isnan(f_h) & np.isnan(f_p), np.nan, out)
    out = np.where(~obstacle & np.isnan(f_p), np.nan, out)
    if out.ndim == 0:
        val = float(out)
        return None if np.isnan(val) else val
    return out


def _column_grids(vmap: VoxelMap, params: TerrainParams):
    """Group voxel rows by column and pull out per-column raw quantities."""
    ijk, count, vsum, moment, max_z, _ = vmap.arrays()
    if ijk.shape[0] == 0:
        return None
    imin = ijk[:, 0].min()
    jmin = ijk[:, 1].min()
    nx = int(ijk[:, 0].max() - imin + 1)
    ny = int(ijk[:, 1].max() - jmin + 1)
    ci = ijk[:, 0] - imin
    cj = ijk[:, 1] - jmin
    flat = ci * ny + cj

    cand = np.full(nx * ny, np.nan)
    cand_k = np.full(nx * ny, np.iinfo(np.int64).max, dtype=np.int64)
    cand_count = np.zeros(nx * ny, dtype=np.int64)
    colmax = np.full(nx * ny, -np.inf)
    has_voxel = np.zeros(nx * ny, dtype=bool)

    np.maximum.at(colmax, flat, max_z)
    has_voxel[flat] = True
    colpts = np.zeros(nx * ny, dtype=np.int64)
    np.add.at(colpts, flat, count)

    # candidate = lowest voxel with enough points; sparse candidates are
    # admitted but enter the relaxation with density-proportional weight
    eligible = count >= params.candidate_min_points
    if eligible.any():
        df = flat[eligible]
        dk = ijk[eligible, 2]
        order = np.lexsort((dk, df))
        df_s = df[order]
        first = np.ones(df_s.shape[0], dtype=bool)
        first[1:] = df_s[1:] != df_s[:-1]
        rows_sorted = np.nonzero(eligible)[0][order][first]
        cols = df_s[first]
        cand_k[cols] = ijk[rows_sorted, 2]
        cand[cols] = vsum[rows_sorted, 2] / count[rows_sorted]
        cand_count[cols] = count[rows_sorted]

    shape = (nx, ny)
    return {
        "origin": np.array([imin, jmin], dtype=np.int64),
        "shape": shape,
        "cand": cand.reshape(shape),
        "cand_k": cand_k.reshape(shape),
        "cand_count": cand_count.reshape(shape),
        "colmax": np.where(has_voxel, colmax, np.nan).reshape(shape),
        "has_voxel": has_voxel.reshape(shape),
        "column_points": colpts.reshape(shape),
        "flat": flat,
        "grid_dims": (nx, ny),
    }


def _relax_ground(cand, cand_count, params: TerrainParams):
    """Data-weighted Jacobi relaxation with outlier rejection.

    Every domain cell is seeded from its nearest candidate so the sweep is a
    pure contraction; rejection of above-ground candidates (object tops) is
    only allowed during the warm-up sweeps, keeping the measured per-sweep
    change non-increasing afterwards.
    """
    has_cand = np.isfinite(cand)
    if not has_cand.any():
        return np.full(cand.shape, np.nan), []
    domain = ndimage.binary_dilation(has_cand, iterations=params.fill_cells)

    # seed with nearest candidate value
    dist, (inear, jnear) = ndimage.distance_transform_edt(
        ~has_cand, return_indices=True)
    h = np.where(domain, cand[inear, jnear], np.nan)

    weight = np.where(has_cand, np.minimum(cand_count, params.data_weight_cap)
                      / params.data_weight_cap, 0.0)
    cand_filled = np.where(has_cand, cand, 0.0)
    deltas = []

    # every domain cell is seeded, so the neighbor count is constant and the
    # sweep reduces to four shifted adds over the zero-padded work array
    dom = domain.astype(np.float64)
    nx, ny = cand.shape

    def neighbor_sum(a):
        out = np.zeros_like(a)
        out[1:, :] += a[:-1, :]
        out[:-1, :] += a[1:, :]
        out[:, 1:] += a[:, :-1]
        out[:, :-1] += a[:, 1:]
        return out

    cnt = neighbor_sum(dom)

    def sweep(h, weight):
        work = np.where(domain, h, 0.0)
        acc = neighbor_sum(work)
        den = weight + cnt
        num = weight * cand_filled + acc
        out = np.where((den > 0) & domain, num / np.maximum(den, 1e-12), np.nan)
        return np.where(domain & (den == 0), h, out)

    # warm-up: let object-top candidates get dragged down and rejected
    for _ in range(params.ground_warmup):
        h = sweep(h, weight)
        reject = has_cand & (cand - h > params.ground_reject)
        if reject.any():
            weight = np.where(reject, 0.0, weight)

    # main phase: fixed weights, pure contraction (per-sweep change is
    # non-increasing), run to tolerance or the iteration cap
    for _ in range(params.ground_iters):
        h_new = sweep(h, weight)
        both = np.isfinite(h) & np.isfinite(h_new)
        delta = float(np.abs(h_new - h)[both].max()) if both.any() else 0.0
        deltas.append(delta)
        h = h_new
        if delta < params.ground_tol:
            break
    return h, deltas


def estimate_ground(vmap: VoxelMap, params: TerrainParams = None):
    """Ground-height grid from lowest dense cells; returns a FeatureGrid with
    only the ground channel populated (other channels NaN)."""
    p = params or TerrainParams()
    cols = _column_grids(vmap, p)
    if cols is None:
        z = np.zeros((0, 0))
        return FeatureGrid(np.zeros(2, dtype=np.int64), vmap.resolution,
                           z, z.copy(), z.copy(), z.copy())
    ground, deltas = _relax_ground(cols["cand"], cols["cand_count"], p)
    nan = np.full(cols["shape"], np.nan)
    return FeatureGrid(cols["origin"], vmap.resolution, ground,
                       nan.copy(), nan.copy(), nan.copy(),
                       cols["column_points"], deltas)


def object_height(vmap: VoxelMap, ground_grid: FeatureGrid, params: TerrainParams = None):
    """f_h per column: tallest point minus ground, floored at zero."""
    p = params or TerrainParams()
    cols = _column_grids(vmap, p)
    if cols is None:
        return np.zeros((0, 0))
    colmax = cols["colmax"]
    f_h = colmax - ground_grid.ground
    f_h = np.where(np.isfinite(colmax) & np.isfinite(ground_grid.ground),
                   np.maximum(f_h, 0.0), np.nan)
    return f_h


def slope(ground, resolution, s_max=2.0):
    """Gradient magnitude of the ground grid, central differences where both
    neighbors exist, one-sided otherwise; NaN for isolated cells."""
    g = np.asarray(ground, dtype=np.float64)
    out_comp = []
    for axis in (0, 1):
        fwd = np.full_like(g, np.nan)
        bwd = np.full_like(g, np.nan)
        sl_f = [slice(None)] * 2
        sl_b = [slice(None)] * 2
        sl_f[axis] = slice(1, None)
        sl_b[axis] = slice(None, -1)
        fwd[tuple(sl_b)] = g[tuple(sl_f)]
        bwd[tuple(sl_f)] = g[tuple(sl_b)]
        central = (fwd - bwd) / (2.0 * resolution)
        one_f = (fwd - g) / resolution
        one_b = (g - bwd) / resolution
        comp = np.where(np.isfinite(central), central,
                        np.where(np.isfinite(one_f), one_f, one_b))
        out_comp.append(comp)
    gx, gy = out_comp
    valid = np.isfinite(g) & (np.isfinite(gx) | np.isfinite(gy))
    gx = np.where(np.isfinite(gx), gx, 0.0)
    gy = np.where(np.isfinite(gy), gy, 0.0)
    mag = np.hypot(gx, gy)
    return np.where(valid, np.clip(mag, 0.0, s_max), np.nan)


def _box_sum(grid, radius):
    """Sum over the (2r+1)^2 window around each cell, zero outside."""
    if radius <= 0:
        return grid
    size = 2 * radius + 1
    return ndimage.uniform_filter(grid, size=size, mode="constant", cval=0.0) \
        * (size * size)


def _pooled_planarity(vmap: VoxelMap, cols, params: TerrainParams):
    """Eigen planarity from the near-ground voxels of each column, with
    statistics pooled over a small column neighborhood.

    Pooling keeps the sample covariance well conditioned at realistic point
    densities; it leaves the range-dependent failure intact because pose
    and range noise inflate the vertical eigenvalue with distance.
    """
    ijk, count, vsum, moment, _, _ = vmap.arrays()
    nx, ny = cols["grid_dims"]
    flat = cols["flat"]
    cand_k = cols["cand_k"].reshape(-1)
    k_ground = cand_k[flat]
    in_pool = (cand_k[flat] != np.iinfo(np.int64).max) & \
        (ijk[:, 2] >= k_ground) & (ijk[:, 2] < k_ground + params.planarity_pool)

    pn = np.zeros(nx * ny)
    ps = np.zeros((nx * ny, 3))
    pm = np.zeros((nx * ny, 3, 3))
    np.add.at(pn, flat[in_pool], count[in_pool])
    np.add.at(ps, flat[in_pool], vsum[in_pool])
    np.add.at(pm, flat[in_pool], moment[in_pool])

    r = params.planarity_neighborhood
    if r > 0:
        pn = _box_sum(pn.reshape(nx, ny), r).reshape(-1)
        ps = np.stack([_box_sum(ps[:, i].reshape(nx, ny), r).reshape(-1)
                       for i in range(3)], axis=1)
        pm = np.stack([_box_sum(pm[:, i, j].reshape(nx, ny), r).reshape(-1)
                       for i in range(3) for j in range(3)], axis=1).reshape(-1, 3, 3)

    f_p = np.full(nx * ny, np.nan)
    ok = pn >= params.density_threshold
    if ok.any():
        n = pn[ok][:, None]
        mean = ps[ok] / n
        cov = pm[ok] / n[:, :, None] - mean[:, :, None] * mean[:, None, :]
        vals = np.linalg.eigvalsh(cov)
        vals = np.clip(vals[:, ::-1], 0.0, None)
        f_p[ok] = planarity(vals[:, 0], vals[:, 1], vals[:, 2], params.eigen_eps)
    # planarity is only meaningful where the column itself has data
    f_p = f_p.reshape((nx, ny))
    return np.where(cols["has_voxel"], f_p, np.nan)


def extract_features(vmap: VoxelMap, params: TerrainParams = None) -> FeatureGrid:
    """Ground, object height, slope and planarity for the whole map window."""
    p = params or TerrainParams()
    cols = _column_grids(vmap, p)
    if cols is None:
        z = np.zeros((0, 0))
        return FeatureGrid(np.zeros(2, dtype=np.int64), vmap.resolution,
                           z, z.copy(), z.copy(), z.copy())
    ground, deltas = _relax_ground(cols["cand"], cols["cand_count"], p)
    colmax = cols["colmax"]
    f_h = np.where(np.isfinite(colmax) & np.isfinite(ground),
                   np.maximum(colmax - ground, 0.0), np.nan)
    f_s = slope(ground, vmap.resolution, p.s_max)
    f_p = _pooled_planarity(vmap, cols, p)
    return FeatureGrid(cols["origin"], vmap.resolution, ground, f_h, f_s, f_p,
                       cols["column_points"], deltas)


def compute_cost_grid(features: FeatureGrid, params: TerrainParams = None) -> CostGrid:
    """Combine features into the per-column cost grid.

    Obstacle calls additionally require enough points in the column itself:
    interpolated ground under a sparse column is not evidence of a tall
    object, it is usually ground-tracking lag at the data boundary.
    """
    p = params or TerrainParams()
    cost = np.asarray(traversability_cost(features.f_h, features.f_p,
                                          features.f_s, p))
    if features.column_points is not None:
        # a sparse column whose apparent height crosses the threshold is
        # usually ground-tracking noise, not a tall object: score it from
        # planarity and slope alone
        weak = (cost >= COST_MAX) & (features.column_points < p.obstacle_min_points)
        if weak.any():
            soft = np.asarray(traversability_cost(
                np.zeros_like(cost), features.f_p, features.f_s, p))
            cost = np.where(weak, soft, cost)
    return CostGrid(features.origin, features.resolution, cost)


def label_voxels(vmap: VoxelMap, cost_grid: CostGrid, ground=None,
                 params: TerrainParams = None):
    """Assign each column's cost to its occupied voxels.

    Obstacle columns label every voxel (they must occlude at their faces);
    other columns label only the near-ground slab, so stray points floating
    above the surface stay transparent to grazing rays.
    """
    p = params or TerrainParams()
    ijk, count, _, _, _, _ = vmap.arrays()
    if ijk.shape[0] == 0:
        return
    nx, ny = cost_grid.cost.shape
    ci = ijk[:, 0] - cost_grid.origin[0]
    cj = ijk[:, 1] - cost_grid.origin[1]
    inside = (ci >= 0) & (ci < nx) & (cj >= 0) & (cj < ny)
    costs = np.full(ijk.shape[0], np.nan)
    costs[inside] = cost_grid.cost[ci[inside], cj[inside]]
    if ground is not None:
        z = vmap.voxel_center(ijk)[:, 2]
        g = np.full(ijk.shape[0], np.nan)
        g[inside] = ground[ci[inside], cj[inside]]
        near_ground = np.isfinite(g) & (z <= g + p.label_slab)
        keep = (costs >= COST_MAX) | near_ground
        costs = np.where(keep, costs, np.nan)
    vmap.set_costs(costs)


def grid_to_image(grid, lo=0.0, hi=COST_MAX):
    """Grayscale uint8 rendering of a grid; NaN maps to 0."""
    g = np.asarray(grid, dtype=np.float64)
    scaled = np.clip((g - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    out = np.where(np.isfinite(g), scaled * 255.0, 0.0)
    return out.astype(np.uint8)


def save_grid_image(grid, path, lo=0.0, hi=COST_MAX):
    from PIL import Image
    Image.fromarray(grid_to_image(grid, lo, hi).T[::-1]).save(path)
