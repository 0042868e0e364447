"""On-disk sequence format and sensor-file IO.

A sequence directory holds everything needed to replay a run bit-exactly:

    poses.txt           pose stream, one line per pose:
                        timestamp x y z qw qx qy qz   (%.17g, round-trips)
    scans/NNNNNN.bin    binary scans, little-endian:
                        magic 'ATSC', u32 version, u32 point count,
                        u64 frame id, f64 timestamp,
                        f64[3] position, f64[4] quaternion wxyz,
                        then count * f32[3] sensor-frame points
    frames/NNNNNN.png   camera image (uint8 RGB)
    gt/NNNNNN.npz       aligned ground truth: class (u8), range (f32),
                        sky (bool), corrupted flag
    index.json          timestamps, poses and sensor config echo

Images are quantized to uint8 at render time and scans to float32, so a
live run and its replay consume byte-identical sensor data.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from .geometry import Pose
from .simworld import RenderedFrame, SensorConfig
from .voxelmap import PointCloudScan

SCAN_MAGIC = b"ATSC"
SCAN_VERSION = 1


def write_scan(scan: PointCloudScan, path, frame_id=0):
    pts = np.ascontiguousarray(scan.points, dtype="<f4")
    with open(path, "wb") as f:
        f.write(SCAN_MAGIC)
        f.write(struct.pack("<IIQd", SCAN_VERSION, pts.shape[0], frame_id,
                            scan.timestamp))
        f.write(struct.pack("<3d", *scan.pose.position))
        f.write(struct.pack("<4d", *scan.pose.orientation))
        f.write(pts.tobytes())


def read_scan(path) -> PointCloudScan:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SCAN_MAGIC:
            raise ValueError(f"{path}: not a scan file")
        version, count, _frame_id, ts = struct.unpack("<IIQd", f.read(24))
        if version != SCAN_VERSION:
            raise ValueError(f"{path}: unsupported scan version {version}")
        pos = struct.unpack("<3d", f.read(24))
        quat = struct.unpack("<4d", f.read(32))
        pts = np.frombuffer(f.read(count * 12), dtype="<f4").reshape(count, 3)
    return PointCloudScan(pts.copy(), Pose(pos, quat, ts), ts)


def write_pose_stream(poses, path):
    with open(path, "w") as f:
        f.write("# timestamp x y z qw qx qy qz\n")
        for p in poses:
            vals = [p.timestamp, *p.position, *p.orientation]
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_pose_stream(path):
    poses = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            poses.append(Pose(vals[1:4], vals[4:8], vals[0]))
    return poses


def _pose_to_json(p: Pose):
    return {"t": p.timestamp, "p": list(p.position), "q": list(p.orientation)}


def _pose_from_json(d):
    return Pose(d["p"], d["q"], d["t"])


def write_sequence(source, out_dir):
    """Persist a sequence source (live or replayed) to a directory."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "scans"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)

    write_pose_stream(source.poses(), os.path.join(out_dir, "poses.txt"))
    scan_ts = []
    for i in range(source.n_scans):
        scan = source.scan(i)
        scan_ts.append(scan.timestamp)
        write_scan(scan, os.path.join(out_dir, "scans", f"{i:06d}.bin"), i)
    frame_meta = []
    for i in range(source.n_frames):
        fr = source.frame(i)
        Image.fromarray(fr.image).save(
            os.path.join(out_dir, "frames", f"{i:06d}.png"))
        np.savez(os.path.join(out_dir, "gt", f"{i:06d}.npz"),
                 gt_class=fr.gt_class, range=fr.range, sky=fr.sky,
                 corrupted=np.array(fr.corrupted))
        frame_meta.append({"i": i, "t": fr.timestamp,
                           "pose": _pose_to_json(fr.robot_pose),
                           "corrupted": bool(fr.corrupted)})
    index = {
        "n_scans": source.n_scans,
        "n_frames": source.n_frames,
        "duration": source.duration,
        "scan_timestamps": scan_ts,
        "frames": frame_meta,
    }
    with open(os.path.join(out_dir, "index.json"), "w") as f:
        json.dump(index, f, sort_keys=True)


class LiveSequenceSource:
    """Adapter over the simulator exposing the engine's source interface."""

    def __init__(self, sim):
        self.sim = sim
        self.sensors: SensorConfig = sim.sensors
        self.duration = sim.duration
        self.n_scans = len(sim.scan_times())
        self.n_frames = len(sim.frame_times())

    def scan(self, i):
        return self.sim.scan(i)

    def frame(self, i):
        return self.sim.frame(i)

    def poses(self):
        return self.sim.poses()


class DiskSequenceSource:
    """Replay a persisted sequence directory."""

    def __init__(self, seq_dir, sensors: SensorConfig):
        self.dir = seq_dir
        self.sensors = sensors
        with open(os.path.join(seq_dir, "index.json")) as f:
            self.index = json.load(f)
        self.duration = self.index["duration"]
        self.n_scans = self.index["n_scans"]
        self.n_frames = self.index["n_frames"]

    def scan(self, i):
        return read_scan(os.path.join(self.dir, "scans", f"{i:06d}.bin"))

    def frame(self, i):
        meta = self.index["frames"][i]
        img = np.asarray(Image.open(
            os.path.join(self.dir, "frames", f"{i:06d}.png")))
        gt = np.load(os.path.join(self.dir, "gt", f"{i:06d}.npz"))
        return RenderedFrame(img, gt["gt_class"], gt["range"], gt["sky"],
                             meta["t"], i, _pose_from_json(meta["pose"]),
                             bool(gt["corrupted"]))

    def poses(self):
        return read_pose_stream(os.path.join(self.dir, "poses.txt"))
