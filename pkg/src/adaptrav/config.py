"""Run configuration: one flat record of every knob, with file round-trip.

The config file format is plain ``key = value`` lines; '#' starts a
comment. Values are parsed according to the field types below.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .geometry import CameraExtrinsics, CameraIntrinsics
from .labeling import LabelingParams
from .learner import EncoderConfig
from .simworld import LidarConfig, SensorConfig
from .terrain import TerrainParams

SCENARIOS = ("adapt-new-env", "multi-domain", "view-drop", "replay")


@dataclass
class RunConfig:
    scenario: str = "adapt-new-env"
    out_dir: str = "runs/latest"
    sequence_dir: str = ""          # replay source (scenario 'replay')

    # world
    palette: str = "forest"
    alt_palette: str = "hill"
    scene_seed: int = 7
    pretrain_scene_seed: int = 1007
    noise_seed: int = 11
    pretrain_noise_seed: int = 211
    trail_curvature: float = 0.3
    obstacle_density: float = 0.0025
    speed: float = 10.0
    mast_height: float = 2.0

    # timing
    duration: float = 75.0
    train_time: float = 45.0        # evaluation starts here
    segment_length: float = 40.0    # multi-domain segment duration
    pretrain_duration: float = 35.0
    drop_start: float = 30.0
    drop_end: float = 55.0
    drop_mode: str = "black"

    # sensors
    camera_rate: float = 5.0
    lidar_rate: float = 5.0
    pose_rate: float = 10.0
    image_width: int = 160
    image_height: int = 120
    focal: float = 140.0
    camera_pitch_deg: float = 10.0
    lidar_azimuth: int = 512
    lidar_elevations: int = 32
    lidar_max_range: float = 110.0

    # voxel map
    map_resolution: float = 0.25
    map_extent_xy: float = 120.0
    map_extent_z: float = 20.0
    recenter_every: int = 5         # scans between recenter calls

    # labeling
    label_delay: float = 5.0
    r_near: float = 30.0
    r_far: float = 100.0
    min_label_pixels: int = 500
    pair_rate: float = 1.4

    # learner
    encoder_seed: int = 1234
    feature_dim: int = 16
    embed_dim: int = 32
    patch: int = 4
    head_kind: str = "linear"
    learning_rate: float = 3e-3
    epochs: int = 400
    buffer_period: float = 10.0
    train_duration: float = 10.0
    n_train_frames: int = 10
    n_val_frames: int = 4
    val_prev_frames: int = 2

    # ensemble
    capacity: int = 5
    cd_new: float = 0.45
    cd_lidar: float = 0.75
    l_usable: float = 6.0
    usability_window: float = 20.0
    recent_frames: int = 10

    # evaluation
    metric_period: float = 1.0
    lidar_range_cap: float = 60.0   # runtime LiDAR-only map query radius
    lidar_refresh: float = 1.0      # seconds between LiDAR cost map rebuilds
    drop_latency_allowance: float = 10.0  # one selection cycle
    band_lo: float = 40.0
    band_hi: float = 80.0
    dump_every: int = 0             # persist every Nth pair/cost map (0 = off)
    methods: str = ""               # comma list; empty = scenario default
    mode: str = "single"            # 'single' (deterministic) or 'pipelined'

    # ------------------------------------------------------------------
    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario != "multi-domain" and not (
                0 < self.train_time < self.duration):
            raise ValueError("train/eval split must lie inside the sequence")
        for name in ("cd_new", "cd_lidar"):
            v = getattr(self, name)
            if not 0 <= v <= 2:
                raise ValueError(f"{name} must be a cosine distance in [0, 2]")
        if self.l_usable <= 0:
            raise ValueError("l_usable must be positive")
        return self

    def method_list(self):
        if self.methods:
            return tuple(m.strip() for m in self.methods.split(",") if m.strip())
        if self.scenario == "multi-domain":
            return ("adaptive", "no_selection_a", "no_selection_b", "lidar")
        if self.scenario == "view-drop":
            return ("adaptive", "no_selection", "lidar")
        return ("adaptive", "frozen", "lidar")

    # derived objects -----------------------------------------------------
    def intrinsics(self):
        return CameraIntrinsics(self.focal, self.focal,
                                (self.image_width - 1) / 2.0,
                                (self.image_height - 1) / 2.0,
                                self.image_width, self.image_height)

    def extrinsics(self):
        return CameraExtrinsics(np.array([0.3, 0.0, 0.1]),
                                np.deg2rad(self.camera_pitch_deg))

    def sensor_config(self):
        return SensorConfig(
            lidar=LidarConfig(n_azimuth=self.lidar_azimuth,
                              n_elevation=self.lidar_elevations,
                              rate=self.lidar_rate,
                              max_range=self.lidar_max_range),
            intrinsics=self.intrinsics(),
            extrinsics=self.extrinsics(),
            camera_rate=self.camera_rate,
        )

    def encoder_config(self):
        return EncoderConfig(width=self.image_width, height=self.image_height,
                             patch=self.patch, feature_dim=self.feature_dim,
                             embed_dim=self.embed_dim, seed=self.encoder_seed)

    def labeling_params(self):
        return LabelingParams(delay=self.label_delay, r_near=self.r_near,
                              r_far=self.r_far,
                              min_pixels=self.min_label_pixels,
                              pair_rate=self.pair_rate,
                              map_resolution=self.map_resolution,
                              terrain=TerrainParams())

    def to_dict(self):
        return dataclasses.asdict(self)


def save_config(config: RunConfig, path):
    with open(path, "w") as f:
        f.write("# run configuration (key = value)\n")
        for field in dataclasses.fields(RunConfig):
            f.write(f"{field.name} = {getattr(config, field.name)}\n")


def parse_value(field_type, raw: str):
    raw = raw.strip()
    if field_type is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    return raw


def load_config(path) -> RunConfig:
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    resolved = {f.name: type(getattr(RunConfig(), f.name))
                for f in dataclasses.fields(RunConfig)}
    values = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{ln}: unknown key {key!r}")
            values[key] = parse_value(resolved[key], raw)
    return apply_overrides(RunConfig(), values)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    resolved = {f.name: type(getattr(RunConfig(), f.name))
                for f in dataclasses.fields(RunConfig)}
    for key, val in overrides.items():
        if key not in resolved:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(val, str) and resolved[key] is not str:
            val = parse_value(resolved[key], val)
        setattr(config, key, val)
    return config.validate()
