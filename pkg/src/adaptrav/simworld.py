"""Deterministic synthetic off-road world and sensor simulator.

The world is a 2.5D heightfield with a trail corridor, grass fields and
scattered obstacle cylinders. Two appearance presets (forest, hill) change
colors and hill steepness. Surface micro-roughness is injected per LiDAR
point (grass is rough, trail is smooth) so planarity contrasts emerge in
accumulated voxel statistics and degrade with range noise, as they do for
real long-range LiDAR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (CameraExtrinsics, CameraIntrinsics, Pose, camera_pose,
                       pixel_rays, quat_from_axis_angle, quat_multiply)
from .metrics import HIGH, LOW, MEDIUM, UNKNOWN
from .voxelmap import PointCloudScan

TRAIL = 0
GRASS = 1
OBSTACLE = 2

STEEP_GRADE = 0.32  # ground slope at which terrain counts as medium cost


@dataclass
class Palette:
    trail: tuple
    grass: tuple
    obstacle: tuple
    sky: tuple
    texture_amp: float
    obstacle_texture: float = 2.5  # foliage is busier than ground cover


PRESETS = {
    "forest": Palette(trail=(0.26, 0.23, 0.17), grass=(0.08, 0.36, 0.10),
                      obstacle=(0.05, 0.15, 0.06), sky=(0.52, 0.60, 0.78),
                      texture_amp=0.075),
    "hill": Palette(trail=(0.70, 0.60, 0.42), grass=(0.85, 0.73, 0.22),
                    obstacle=(0.22, 0.26, 0.18), sky=(0.78, 0.82, 0.88),
                    texture_amp=0.03),
}

# per-point vertical jitter by class (fine-scale fuzz on top of the
# cell-scale structure baked into the heightfield)
_ROUGHNESS = {TRAIL: 0.005, GRASS: 0.08, OBSTACLE: 0.30}
GRASS_CELL_RELIEF = 0.26  # +/- meters of cell-scale grass surface structure


@dataclass
class Scene:
    seed: int
    preset: str
    cell: float
    x0: float
    y0: float
    height: np.ndarray        # (nx, ny) surface incl. obstacles
    clazz: np.ndarray         # (nx, ny) uint8 TRAIL/GRASS/OBSTACLE
    rough: np.ndarray         # (nx, ny) float32 micro-roughness amplitude
    tex: np.ndarray           # (nx, ny) float32 texture noise in [-2.5, 2.5]
    ground_slope: np.ndarray  # (nx, ny) float32, pre-obstacle surface grade
    cost_class: np.ndarray    # (nx, ny) uint8 LOW/MEDIUM/HIGH
    trail_amp: float
    trail_wavelength: float
    trail_phase: float
    trail_width: float

    @property
    def shape(self):
        return self.height.shape

    def trail_y(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.trail_amp * np.sin(2 * np.pi * x / self.trail_wavelength
                                       + self.trail_phase)

    def trail_heading(self, x):
        dy = self.trail_amp * (2 * np.pi / self.trail_wavelength) * np.cos(
            2 * np.pi * x / self.trail_wavelength + self.trail_phase)
        return np.arctan2(dy, 1.0)

    def _cell_index(self, x, y):
        i = np.clip(((np.asarray(x) - self.x0) / self.cell).astype(np.int64),
                    0, self.shape[0] - 1)
        j = np.clip(((np.asarray(y) - self.y0) / self.cell).astype(np.int64),
                    0, self.shape[1] - 1)
        return i, j

    def height_at(self, x, y):
        """Bilinear surface height; edge-clamped outside the grid."""
        nx, ny = self.shape
        gx = np.clip((np.asarray(x, dtype=np.float64) - self.x0) / self.cell - 0.5,
                     0.0, nx - 1.000001)
        gy = np.clip((np.asarray(y, dtype=np.float64) - self.y0) / self.cell - 0.5,
                     0.0, ny - 1.000001)
        i0 = gx.astype(np.int64)
        j0 = gy.astype(np.int64)
        fx = gx - i0
        fy = gy - j0
        h = self.height
        return ((h[i0, j0] * (1 - fx) + h[i0 + 1, j0] * fx) * (1 - fy)
                + (h[i0, j0 + 1] * (1 - fx) + h[i0 + 1, j0 + 1] * fx) * fy)

    def lookup(self, array, x, y):
        i, j = self._cell_index(x, y)
        return array[i, j]


def generate_scene(seed, preset="forest", trail_curvature=0.5,
                   obstacle_density=0.0025, cell=0.5,
                   x_range=(-40.0, 860.0), y_range=(-60.0, 60.0),
                   trail_width=7.0) -> Scene:
    """Deterministic scene from a seed and preset parameters."""
    if preset not in PRESETS:
        raise ValueError(f"unknown palette preset {preset!r}")
    if cell <= 0 or trail_width <= 0 or obstacle_density < 0 or trail_curvature < 0:
        raise ValueError("degenerate scene parameters")
    x0, x1 = x_range
    y0, y1 = y_range
    if x1 - x0 < 10 * cell or y1 - y0 < 10 * cell:
        raise ValueError("scene extent too small")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA17]))
    nx = int(round((x1 - x0) / cell))
    ny = int(round((y1 - y0) / cell))
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    xg, yg = np.meshgrid(xs, ys, indexing="ij")

    phases = rng.uniform(0, 2 * np.pi, size=5)
    if preset == "hill":
        amps = (2.0, 1.0, 9.0, 1.5)
    else:
        amps = (1.2, 0.8, 1.0, 0.6)
    ax1, ax2, ay, axy = amps
    base = (ax1 * np.sin(2 * np.pi * xg / 220.0 + phases[0])
            + ax2 * np.sin(2 * np.pi * xg / 120.0 + phases[1])
            + ay * np.sin(2 * np.pi * yg / 130.0 + phases[2])
            + axy * np.sin(2 * np.pi * (xg + 2 * yg) / 180.0 + phases[3]))

    trail_amp = 24.0 * trail_curvature
    trail_wavelength = 260.0
    trail_phase = float(phases[4])
    yc = trail_amp * np.sin(2 * np.pi * xs / trail_wavelength + trail_phase)
    dyc = np.abs(yg - yc[:, None])

    # level the trail bed to the centerline profile, blending over the bank
    center_idx = np.clip(((yc - y0) / cell).astype(np.int64), 0, ny - 1)
    profile = base[np.arange(nx), center_idx]
    profile = ndimage.uniform_filter1d(profile, size=max(int(24 / cell), 1),
                                       mode="nearest")
    half_w = trail_width / 2.0
    bank = 6.0
    blend = np.clip((dyc - half_w) / bank, 0.0, 1.0)
    ground = blend * base + (1.0 - blend) * profile[:, None]

    clazz = np.full((nx, ny), GRASS, dtype=np.uint8)
    clazz[dyc <= half_w] = TRAIL

    # obstacles: cylinders off the trail corridor
    area = (x1 - x0) * (y1 - y0)
    n_obs = int(obstacle_density * area)
    height = ground.copy()
    for _ in range(n_obs):
        ox = rng.uniform(x0 + 5, x1 - 5)
        oy = rng.uniform(y0 + 3, y1 - 3)
        if abs(oy - trail_amp * np.sin(2 * np.pi * ox / trail_wavelength
                                       + trail_phase)) < half_w + bank + 1.5:
            continue
        radius = rng.uniform(0.8, 1.8)
        oh = rng.uniform(1.6, 3.0)
        i_lo, j_lo = int((ox - radius - x0) / cell), int((oy - radius - y0) / cell)
        i_hi, j_hi = int((ox + radius - x0) / cell) + 2, int((oy + radius - y0) / cell) + 2
        i_lo, j_lo = max(i_lo, 0), max(j_lo, 0)
        i_hi, j_hi = min(i_hi, nx), min(j_hi, ny)
        sub_x = xs[i_lo:i_hi][:, None]
        sub_y = ys[j_lo:j_hi][None, :]
        mask = (sub_x - ox) ** 2 + (sub_y - oy) ** 2 <= radius ** 2
        height[i_lo:i_hi, j_lo:j_hi][mask] = ground[i_lo:i_hi, j_lo:j_hi][mask] + oh
        clazz[i_lo:i_hi, j_lo:j_hi][mask] = OBSTACLE

    gx, gy2 = np.gradient(ground, cell)
    ground_slope = np.hypot(gx, gy2).astype(np.float32)

    cost_class = np.full((nx, ny), MEDIUM, dtype=np.uint8)
    cost_class[(clazz == TRAIL) & (ground_slope < STEEP_GRADE)] = LOW
    cost_class[clazz == OBSTACLE] = HIGH

    # cell-scale grass relief: breaks planarity without inflating the
    # apparent object height the way per-point noise would
    relief = rng.uniform(-GRASS_CELL_RELIEF, GRASS_CELL_RELIEF, (nx, ny))
    grass_mask = clazz == GRASS
    height = height + np.where(grass_mask, relief, 0.0)

    rough = np.zeros((nx, ny), dtype=np.float32)
    for cid, amp in _ROUGHNESS.items():
        rough[clazz == cid] = amp
    tex = np.clip(rng.standard_normal((nx, ny)), -2.5, 2.5).astype(np.float32)

    return Scene(seed=int(seed), preset=preset, cell=cell, x0=x0, y0=y0,
                 height=height, clazz=clazz, rough=rough, tex=tex,
                 ground_slope=ground_slope, cost_class=cost_class,
                 trail_amp=trail_amp, trail_wavelength=trail_wavelength,
                 trail_phase=trail_phase, trail_width=trail_width)


def flat_scene(extent=200.0, cell=0.5, height=0.0, clazz=GRASS, rough=0.0,
               preset="forest"):
    """Minimal constant-height scene for tests."""
    n = int(extent / cell)
    shape = (n, n)
    cc = np.full(shape, clazz, dtype=np.uint8)
    cost = np.full(shape, MEDIUM if clazz != TRAIL else LOW, dtype=np.uint8)
    cost[cc == OBSTACLE] = HIGH
    return Scene(seed=0, preset=preset, cell=cell, x0=-extent / 2, y0=-extent / 2,
                 height=np.full(shape, float(height)), clazz=cc,
                 rough=np.full(shape, float(rough), dtype=np.float32),
                 tex=np.zeros(shape, dtype=np.float32),
                 ground_slope=np.zeros(shape, dtype=np.float32),
                 cost_class=cost, trail_amp=0.0, trail_wavelength=260.0,
                 trail_phase=0.0, trail_width=7.0)


# ----------------------------------------------------------------------
# ray marching against the heightfield

def march_rays(scene: Scene, origin, dirs, max_range, coarse=1.0,
               step_growth=0.015, refine_iters=24):
    """First terrain intersection per ray; NaN where the ray escapes.

    Coarse steps grow slowly with distance, then bisection refines the
    bracketed crossing to sub-millimeter precision.
    """
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = d.shape[0]
    t = np.zeros(n)
    t_hit = np.full(n, np.nan)
    lo = np.zeros(n)
    hi = np.zeros(n)
    active = np.ones(n, dtype=bool)
    zmax = float(scene.height.max()) + 0.5

    while active.any():
        idx = np.nonzero(active)[0]
        step = coarse * (1.0 + step_growth * t[idx])
        t_next = t[idx] + step
        p = origin[None, :] + t_next[:, None] * d[idx]
        below = p[:, 2] < scene.height_at(p[:, 0], p[:, 1])
        hit_rows = idx[below]
        lo[hit_rows] = t[hit_rows]
        hi[hit_rows] = t_next[below]
        active[hit_rows] = False
        t[idx] = t_next
        gone = (t[idx] > max_range) | ((p[:, 2] > zmax) & (d[idx][:, 2] > 0))
        active[idx[gone & ~below]] = False

    bracketed = hi > 0
    if bracketed.any():
        bi = np.nonzero(bracketed)[0]
        blo, bhi = lo[bi], hi[bi]
        for _ in range(refine_iters):
            mid = 0.5 * (blo + bhi)
            p = origin[None, :] + mid[:, None] * d[bi]
            below = p[:, 2] < scene.height_at(p[:, 0], p[:, 1])
            bhi = np.where(below, mid, bhi)
            blo = np.where(below, blo, mid)
        t_hit[bi] = 0.5 * (blo + bhi)
        t_hit[bi[t_hit[bi] > max_range]] = np.nan
    return t_hit


# ----------------------------------------------------------------------
@dataclass
class LidarConfig:
    n_azimuth: int = 512
    n_elevation: int = 32
    elevation_min: float = np.deg2rad(-35.0)
    elevation_max: float = np.deg2rad(3.0)
    rate: float = 5.0
    max_range: float = 110.0
    noise_floor: float = 0.01
    noise_range_coef: float = 0.05
    noise_ref_range: float = 30.0
    # per-sweep pattern dither (spin phase drift / platform vibration);
    # decorrelates ring arcs between sweeps so accumulated voxels sample
    # surfaces in 2D instead of along repeated lines
    azimuth_dither: float = 1.0    # fraction of one azimuth step
    elevation_dither: float = 0.6  # fraction of one elevation step
    # per-ray angular noise (beam pointing error), std in step units
    ray_jitter_az: float = 0.6
    ray_jitter_el: float = 0.5
    # residual registration error of the reported scan pose; its vertical
    # footprint grows linearly with range, which is what makes accumulated
    # long-range planarity unreliable
    reg_rot_sigma: float = 0.0035   # radians
    reg_trans_sigma: float = 0.02   # meters

    def sigma(self, r):
        r = np.asarray(r, dtype=np.float64)
        return self.noise_floor + self.noise_range_coef * (r / self.noise_ref_range) ** 2

    def __post_init__(self):
        if self.noise_range_coef < 0 or self.noise_floor < 0:
            raise ValueError("noise must be non-decreasing in range")


@dataclass
class SensorConfig:
    lidar: LidarConfig = field(default_factory=LidarConfig)
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(
        fx=140.0, fy=140.0, cx=79.5, cy=59.5, width=160, height=120))
    extrinsics: CameraExtrinsics = field(default_factory=lambda: CameraExtrinsics(
        translation=np.array([0.3, 0.0, 0.1]), pitch=np.deg2rad(10.0)))
    camera_rate: float = 5.0
    render_range: float = 220.0


def simulate_lidar(scene: Scene, pose: Pose, config: LidarConfig,
                   rng: np.random.Generator) -> PointCloudScan:
    """One spinning-LiDAR sweep from the sensor pose.

    Ground-area point density falls off super-quadratically with range from
    the ray geometry alone; range noise grows quadratically on top.
    """
    az_step = 2 * np.pi / config.n_azimuth
    el_step = (config.elevation_max - config.elevation_min) / max(config.n_elevation - 1, 1)
    az = np.linspace(0.0, 2 * np.pi, config.n_azimuth, endpoint=False) \
        + rng.uniform(0, config.azimuth_dither) * az_step
    el = np.linspace(config.elevation_min, config.elevation_max, config.n_elevation) \
        + rng.uniform(-0.5, 0.5, config.n_elevation) * config.elevation_dither * el_step
    aa, ee = np.meshgrid(az, el)
    if config.ray_jitter_az > 0:
        aa = aa + rng.normal(0, config.ray_jitter_az * az_step, aa.shape)
    if config.ray_jitter_el > 0:
        ee = ee + rng.normal(0, config.ray_jitter_el * el_step, ee.shape)
    dirs_sensor = np.stack([np.cos(ee) * np.cos(aa),
                            np.cos(ee) * np.sin(aa),
                            np.sin(ee)], axis=-1).reshape(-1, 3)
    dirs = dirs_sensor @ pose.rotation_matrix.T
    t = march_rays(scene, pose.position, dirs, config.max_range)
    hit = np.isfinite(t)
    if not hit.any():
        # keep the scan non-empty: a single return straight down
        t_down = pose.position[2] - scene.height_at(pose.position[0], pose.position[1])
        pts = np.array([[0.0, 0.0, -t_down]], dtype=np.float32)
        return PointCloudScan(pts, pose, pose.timestamp)
    t = t[hit]
    dirs = dirs[hit]
    r = t + config.sigma(t) * rng.standard_normal(t.shape[0])
    pts = pose.position[None, :] + r[:, None] * dirs
    rough = scene.lookup(scene.rough, pts[:, 0], pts[:, 1])
    pts[:, 2] += rough * rng.uniform(-1.0, 1.0, pts.shape[0])
    local = pose.to_local(pts).astype(np.float32)
    return PointCloudScan(local, pose, pose.timestamp)


@dataclass
class RenderedFrame:
    image: np.ndarray      # (H, W, 3) uint8
    gt_class: np.ndarray   # (H, W) uint8 LOW/MEDIUM/HIGH, UNKNOWN at sky
    range: np.ndarray      # (H, W) float32, NaN at sky
    sky: np.ndarray        # (H, W) bool
    timestamp: float
    frame_index: int
    robot_pose: Pose
    corrupted: bool = False


def render_image(scene: Scene, robot_pose: Pose, sensors: SensorConfig,
                 rng: np.random.Generator, frame_index=0,
                 palette_name=None) -> RenderedFrame:
    intr = sensors.intrinsics
    cam = camera_pose(robot_pose, sensors.extrinsics)
    dirs = pixel_rays(intr, cam)
    t = march_rays(scene, cam.position, dirs, sensors.render_range)
    h, w = intr.height, intr.width
    t_img = t.reshape(h, w)
    sky = ~np.isfinite(t_img)

    palette = PRESETS[palette_name or scene.preset]
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = palette.sky
    row_shade = (0.06 * (np.arange(h) / max(h - 1, 1)))[:, None]
    img -= row_shade[:, :, None] * 0.5

    hit = ~sky
    if hit.any():
        p = cam.position[None, :] + t[np.ravel(hit)][:, None] * dirs[np.ravel(hit)]
        cls = scene.lookup(scene.clazz, p[:, 0], p[:, 1])
        tex = scene.lookup(scene.tex, p[:, 0], p[:, 1])
        colors = np.array([palette.trail, palette.grass, palette.obstacle])
        shade = palette.texture_amp * tex
        shade = np.where(cls == OBSTACLE, palette.obstacle_texture * shade, shade)
        img[hit] = colors[cls] + shade[:, None]

    img += 0.008 * rng.standard_normal(img.shape)
    image = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    gt = np.full((h, w), UNKNOWN, dtype=np.uint8)
    if hit.any():
        gt[hit] = scene.lookup(scene.cost_class, p[:, 0], p[:, 1])
    rng_img = np.where(sky, np.nan, t_img).astype(np.float32)
    return RenderedFrame(image, gt, rng_img, sky, robot_pose.timestamp,
                         frame_index, robot_pose)


def corrupt_image(shape, rng: np.random.Generator, mode="black"):
    """Corrupted camera frame used for simulated view drops."""
    if mode == "black":
        base = 5.0 + 2.0 * rng.standard_normal(shape)
    elif mode == "noise":
        base = rng.uniform(0, 255, shape)
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    return np.clip(np.rint(base), 0, 255).astype(np.uint8)


def inject_view_drop(frames, t_start, t_end, seed=0, mode="black"):
    """Replace frame images inside [t_start, t_end) with corruption.

    Timestamps and ground-truth channels are preserved so evaluation over
    the dropout interval stays possible.
    """
    if t_start >= t_end:
        return list(frames)
    out = []
    for f in frames:
        if t_start <= f.timestamp < t_end:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD0, f.frame_index]))
            out.append(RenderedFrame(corrupt_image(f.image.shape, rng, mode),
                                     f.gt_class, f.range, f.sky, f.timestamp,
                                     f.frame_index, f.robot_pose, corrupted=True))
        else:
            out.append(f)
    return out


# ----------------------------------------------------------------------
class TrailTrajectory:
    """Scripted drive along the trail at constant forward speed.

    Progress is parameterized by x; yaw follows the trail tangent, the
    sensor mast sits mast_height above the local surface.
    """

    def __init__(self, scene: Scene, speed=10.0, mast_height=2.0, x_start=0.0):
        self.scene = scene
        self.speed = float(speed)
        self.mast_height = float(mast_height)
        self.x_start = float(x_start)

    def pose_at(self, t: float) -> Pose:
        x = self.x_start + self.speed * t
        y = float(self.scene.trail_y(x))
        z = float(self.scene.height_at(x, y)) + self.mast_height
        yaw = float(self.scene.trail_heading(x))
        return Pose(np.array([x, y, z]), quat_from_axis_angle([0, 0, 1], yaw), t)


class SequenceSimulator:
    """Deterministic sensor streams over a scripted trajectory.

    Every scan/frame draws from an RNG seeded by (noise_seed, stream, tick),
    so streams are bit-identical regardless of evaluation order.
    """

    def __init__(self, scene: Scene, sensors: SensorConfig,
                 trajectory: TrailTrajectory, duration: float,
                 noise_seed=0, palette_schedule=None,
                 drop_interval=None, drop_mode="black", pose_rate=10.0):
        self.scene = scene
        self.sensors = sensors
        self.trajectory = trajectory
        self.duration = float(duration)
        self.noise_seed = int(noise_seed)
        self.palette_schedule = palette_schedule or [(0.0, scene.preset)]
        self.drop_interval = drop_interval
        self.drop_mode = drop_mode
        self.pose_rate = pose_rate

    def palette_at(self, t):
        name = self.palette_schedule[0][1]
        for start, pal in self.palette_schedule:
            if t >= start:
                name = pal
        return name

    def scan_times(self):
        n = int(np.floor(self.duration * self.sensors.lidar.rate))
        return np.arange(n) / self.sensors.lidar.rate

    def frame_times(self):
        n = int(np.floor(self.duration * self.sensors.camera_rate))
        return np.arange(n) / self.sensors.camera_rate

    def pose_times(self):
        n = int(np.floor(self.duration * self.pose_rate)) + 1
        return np.arange(n) / self.pose_rate

    def scan(self, i: int) -> PointCloudScan:
        t = float(self.scan_times()[i])
        rng = np.random.default_rng(np.random.SeedSequence([self.noise_seed, 1, i]))
        true_pose = self.trajectory.pose_at(t)
        scan = simulate_lidar(self.scene, true_pose, self.sensors.lidar, rng)
        lid = self.sensors.lidar
        if lid.reg_rot_sigma > 0 or lid.reg_trans_sigma > 0:
            # the reported (registered) pose differs slightly from the pose
            # the scan was actually taken from
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            dq = quat_from_axis_angle(axis, rng.normal(0, lid.reg_rot_sigma))
            reported = Pose(true_pose.position
                            + rng.normal(0, lid.reg_trans_sigma, 3),
                            quat_multiply(true_pose.orientation, dq),
                            true_pose.timestamp)
            scan = PointCloudScan(scan.points, reported, scan.timestamp)
        return scan

    def frame(self, i: int) -> RenderedFrame:
        t = float(self.frame_times()[i])
        rng = np.random.default_rng(np.random.SeedSequence([self.noise_seed, 2, i]))
        f = render_image(self.scene, self.trajectory.pose_at(t), self.sensors,
                         rng, i, self.palette_at(t))
        if self.drop_interval and self.drop_interval[0] <= t < self.drop_interval[1]:
            rng2 = np.random.default_rng(
                np.random.SeedSequence([self.noise_seed, 3, i]))
            f = RenderedFrame(corrupt_image(f.image.shape, rng2, self.drop_mode),
                              f.gt_class, f.range, f.sky, f.timestamp,
                              f.frame_index, f.robot_pose, corrupted=True)
        return f

    def poses(self):
        return [self.trajectory.pose_at(float(t)) for t in self.pose_times()]
