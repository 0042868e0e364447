"""Simulated-clock pipeline: sensors -> labeling -> training -> inference.

Runs the experiment scenarios (new-environment adaptation, multi-domain
revisit, simulated view drop) over the synthetic world, with all compared
methods consuming identical sensor streams, and emits a metrics report
plus the decision and training logs every number in it can be recomputed
from.

The default execution mode is a single-threaded event loop over simulated
time; given one config and its seeds, every log byte is deterministic. A
pipelined mode with worker threads exists for throughput and keeps the
same stage functions, but only the single-threaded mode guarantees
byte-identical outputs.
"""

from __future__ import annotations

import bisect
import heapq
import json
import logging
import os
import queue
import threading
import time
from collections import deque

import numpy as np

from . import __version__
from . import labeling, metrics, terrain
from .config import RunConfig
from .ensemble import (Ensemble, InferenceDecision, SOURCE_HEAD, SOURCE_LIDAR,
                       decision_line, DECISION_HEADER)
from .geometry import RaycastGrid, camera_pose, raycast
from .learner import (BufferFrame, Encoder, ModelHead, NoLabeledPixels,
                      TrainingBuffer, train_head)
from .sequences import LiveSequenceSource, DiskSequenceSource, write_sequence
from .simworld import (PRESETS, Scene, SequenceSimulator, TrailTrajectory,
                       corrupt_image, generate_scene)
from .voxelmap import VoxelMap

log = logging.getLogger("adaptrav")

EV_SCAN, EV_LABEL, EV_FRAME, EV_METRIC, EV_TRAIN, EV_PUBLISH = range(6)


def build_simulator(config: RunConfig, palette, scene_seed, noise_seed,
                    duration, palette_schedule=None, drop_interval=None):
    scene = generate_scene(scene_seed, palette,
                           trail_curvature=config.trail_curvature,
                           obstacle_density=config.obstacle_density)
    traj = TrailTrajectory(scene, speed=config.speed,
                           mast_height=config.mast_height)
    sim = SequenceSimulator(scene, config.sensor_config(), traj, duration,
                            noise_seed=noise_seed,
                            palette_schedule=palette_schedule,
                            drop_interval=drop_interval,
                            drop_mode=config.drop_mode,
                            pose_rate=config.pose_rate)
    return scene, sim


def pair_schedule(frame_times, config: RunConfig):
    """(pair index m, frame index, image ts, ready ts) for the whole run."""
    sel = labeling.select_label_times(frame_times, config.pair_rate)
    out = []
    for m, fi in enumerate(sel):
        t = float(frame_times[fi])
        out.append((m, int(fi), t, t + config.label_delay))
    return out


def pairs_per_window(config: RunConfig):
    return int(round(config.buffer_period * config.pair_rate))


class LidarPredictor:
    """Geometric traversability from the accumulated map up to 'now'.

    The cost map is refreshed at a fixed simulated-time cadence and the
    raycast reuses the dense grid between refreshes. Query range is capped
    (the runtime baseline uses a reduced radius, trading range for speed).
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.map = VoxelMap(config.map_resolution, config.map_extent_xy,
                            config.map_extent_z)
        self._scan_counter = 0
        self._grid = None
        self._grid_time = -np.inf
        self._grid_scans = -1

    def integrate(self, scan, index):
        self.map.integrate_scan(scan)
        self._scan_counter += 1
        if index % self.config.recenter_every == 0:
            self.map.recenter(scan.pose.position)

    def _refresh(self, now):
        snap = self.map.snapshot()
        tp = terrain.TerrainParams()
        feats = terrain.extract_features(snap, tp)
        grid = terrain.compute_cost_grid(feats, tp)
        terrain.label_voxels(snap, grid, feats.ground, tp)
        self._grid = RaycastGrid(snap.solids(labeled_only=True))
        self._grid_time = now
        self._grid_scans = self._scan_counter

    def render(self, robot_pose, now):
        """Sparse cost image (NaN where no labeled voxel was hit)."""
        if (self._grid is None
                or (self._scan_counter != self._grid_scans
                    and now - self._grid_time >= self.config.lidar_refresh)):
            self._refresh(now)
        cam = camera_pose(robot_pose, self.config.extrinsics())
        rc = raycast(self._grid, cam, self.config.intrinsics(),
                     self.config.lidar_range_cap)
        return np.where(rc.hit, rc.cost, np.nan), rc.hit


class MethodState:
    """Per-method mutable state inside the engine."""

    def __init__(self, name, kind, ensemble=None, head=None):
        self.name = name
        self.kind = kind            # 'adaptive' | 'single' | 'frozen' | 'lidar'
        self.ensemble = ensemble
        self.head = head
        self.pending = []           # staged (publish info) between train/publish


def window_pools(config: RunConfig, duration):
    """Nominal training-cycle schedule: (window k, start, train at, publish)."""
    out = []
    k = 0
    while True:
        start = k * config.buffer_period
        train_at = start + config.buffer_period + config.label_delay
        publish_at = train_at + config.train_duration
        if train_at >= duration:
            break
        out.append((k, start, train_at, publish_at))
        k += 1
    return out


class SequenceEngine:
    """Deterministic single-threaded simulated-time pipeline."""

    def __init__(self, config: RunConfig, source, methods, encoder: Encoder,
                 metric_windows=None):
        self.config = config
        self.source = source
        self.methods = methods
        self.encoder = encoder
        self.scans = []
        self.scan_ts = []
        self.encoded = {}
        self.frame_poses = {}
        self.frame_corrupted = {}
        self.pose_stream = source.poses()
        self.pose_ts = np.array([p.timestamp for p in self.pose_stream])
        self.lidar = LidarPredictor(config)
        self.pairs_by_window = {}
        self.reserve = []
        self.recent = deque(maxlen=config.recent_frames)
        self.decisions = []
        self.decision_lines = [DECISION_HEADER]
        self.training_events = []
        self.frame_records = []
        self.eval_frames = []
        self.dropped_pairs = 0
        self.audit = {"causality_ok": True, "max_label_lead": 0.0,
                      "buffer_starts": [], "pairs": 0}
        self._last_frame = None
        self._timings = {}

    # ------------------------------------------------------------------
    def _path_xy(self, t0, t1):
        lo = bisect.bisect_left(self.pose_ts, t0)
        hi = bisect.bisect_right(self.pose_ts, t1)
        return np.array([self.pose_stream[i].position[:2]
                         for i in range(lo, hi)])

    def _timeit(self, key, t0):
        self._timings[key] = self._timings.get(key, 0.0) + (time.perf_counter() - t0)

    # ------------------------------------------------------------------
    def run(self):
        cfg = self.config
        src = self.source
        events = []
        seq = 0

        for i in range(src.n_scans):
            t = i / cfg.lidar_rate
            heapq.heappush(events, (t, EV_SCAN, seq, i)); seq += 1
        frame_times = np.arange(src.n_frames) / cfg.camera_rate
        for i in range(src.n_frames):
            heapq.heappush(events, (float(frame_times[i]), EV_FRAME, seq, i)); seq += 1

        self.pair_specs = pair_schedule(frame_times, cfg)
        for (m, fi, t, ready) in self.pair_specs:
            if ready <= src.duration:
                heapq.heappush(events, (ready, EV_LABEL, seq, (m, fi, t, ready)))
                seq += 1

        for (k, start, train_at, publish_at) in window_pools(cfg, src.duration):
            heapq.heappush(events, (train_at, EV_TRAIN, seq, (k, start, publish_at)))
            seq += 1
            self.audit["buffer_starts"].append(start)

        n_metric = int(np.floor(src.duration / cfg.metric_period))
        for j in range(n_metric):
            t = j * cfg.metric_period
            fi = int(np.argmin(np.abs(frame_times - t)))
            heapq.heappush(events, (float(frame_times[fi]), EV_METRIC, seq, fi))
            seq += 1

        while events:
            now, kind, _, payload = heapq.heappop(events)
            if kind == EV_SCAN:
                self.on_scan(payload, now)
            elif kind == EV_FRAME:
                self.on_frame(payload, now)
            elif kind == EV_LABEL:
                self.on_label(payload, now)
            elif kind == EV_TRAIN:
                staged = self.on_train(payload, now)
                for item in staged:
                    heapq.heappush(events, (payload[2], EV_PUBLISH, seq, item))
                    seq += 1
            elif kind == EV_METRIC:
                self.on_metric(payload, now)
            elif kind == EV_PUBLISH:
                self.on_publish(payload, now)

    # ------------------------------------------------------------------
    def on_scan(self, i, now):
        t0 = time.perf_counter()
        scan = self.source.scan(i)
        self.scans.append(scan)
        self.scan_ts.append(scan.timestamp)
        self.lidar.integrate(scan, i)
        self._timeit("scans", t0)

    def on_frame(self, i, now):
        t0 = time.perf_counter()
        fr = self.source.frame(i)
        self._last_frame = fr
        enc = self.encoder.encode(fr.image, fr.timestamp)
        self.encoded[i] = enc
        self.frame_poses[i] = fr.robot_pose
        self.frame_corrupted[i] = fr.corrupted
        self.recent.append(enc.embedding)
        for state in self.methods.values():
            if state.kind == "adaptive":
                decision = state.ensemble.select_inference_source(list(self.recent))
                self.decisions.append((fr.timestamp, decision))
                self.decision_lines.append(decision_line(fr.timestamp, decision))
        self._timeit("frames", t0)

    def on_label(self, spec, now):
        m, fi, t, ready = spec
        t0 = time.perf_counter()
        lo = bisect.bisect_left(self.scan_ts, t)
        hi = bisect.bisect_right(self.scan_ts, ready)
        window = self.scans[lo:hi]
        if not window:
            self.dropped_pairs += 1
            return
        lead = max((s.timestamp for s in window)) - ready
        self.audit["max_label_lead"] = max(self.audit["max_label_lead"], lead)
        if lead > 1e-9:
            self.audit["causality_ok"] = False
        params = self.config.labeling_params()
        path_xy = self._path_xy(t, ready)
        pose = self.pose_for_frame(fi, t)
        mask = labeling.make_training_mask(
            window, pose, self.config.intrinsics(), self.config.extrinsics(),
            path_xy, params)
        self._timeit("labeling", t0)
        if mask.valid_count < params.min_pixels:
            self.dropped_pairs += 1
            return
        pair = labeling.TrainingPair(fi, mask, t, ready)
        k = m // pairs_per_window(self.config)
        self.pairs_by_window.setdefault(k, []).append(pair)
        self.audit["pairs"] += 1

    def pose_for_frame(self, fi, t):
        pose = self.frame_poses.get(fi)
        if pose is None:
            pose = self.source.frame(fi).robot_pose
        return pose

    # ------------------------------------------------------------------
    def assemble_buffer(self, k, now):
        cfg = self.config
        pairs = sorted(self.pairs_by_window.get(k, []), key=lambda p: p.image_ts)
        need_val = cfg.n_val_frames
        n_prev = min(len(self.reserve), cfg.val_prev_frames)
        if len(pairs) < cfg.n_train_frames + (need_val - n_prev):
            return None
        train = pairs[:cfg.n_train_frames]
        rest = pairs[cfg.n_train_frames:]
        val = list(self.reserve[:n_prev]) + rest[:need_val - n_prev]
        if len(val) < need_val:
            return None
        self.reserve = rest[need_val - n_prev:][:cfg.val_prev_frames]

        def to_frame(p):
            return BufferFrame(self.encoded[p.frame_index], p.mask.costs,
                               p.image_ts)

        incoming = [to_frame(p) for p in train + rest[:need_val - n_prev]]
        return (TrainingBuffer([to_frame(p) for p in train],
                               [to_frame(p) for p in val],
                               (k * cfg.buffer_period, (k + 1) * cfg.buffer_period),
                               now, cfg.n_train_frames, cfg.n_val_frames),
                incoming)

    def on_train(self, payload, now):
        k, start, publish_at = payload
        cfg = self.config
        assembled = self.assemble_buffer(k, now)
        staged = []
        if assembled is None:
            self.training_events.append(
                {"t": now, "window": k, "skipped": True,
                 "pairs": len(self.pairs_by_window.get(k, []))})
            return staged
        buffer, incoming = assembled
        t0 = time.perf_counter()
        for state in self.methods.values():
            if state.kind == "adaptive":
                emb = [f.encoded.embedding for f in incoming]
                sel = state.ensemble.select_training_head(emb, now)
                head = state.ensemble.heads[sel.head_id]
                try:
                    new_head, tl, vl = train_head(
                        head, buffer, now=publish_at, lr=cfg.learning_rate,
                        epochs=cfg.epochs)
                except NoLabeledPixels:
                    continue
                staged.append((state.name, sel, new_head, tl, vl, k))
            elif state.kind == "single":
                try:
                    new_head, tl, vl = train_head(
                        state.head, buffer, now=publish_at,
                        lr=cfg.learning_rate, epochs=cfg.epochs)
                except NoLabeledPixels:
                    continue
                staged.append((state.name, None, new_head, tl, vl, k))
        self._timeit("training", t0)
        return staged

    def on_publish(self, payload, now):
        name, sel, new_head, tl, vl, k = payload
        state = self.methods[name]
        event = {"t": now, "window": k, "method": name, "skipped": False,
                 "train_loss": tl, "val_loss": vl,
                 "head": new_head.head_id}
        if state.kind == "adaptive":
            state.ensemble.replace_head(new_head.head_id, new_head)
            usable = state.ensemble.update_usability(new_head.head_id, now)
            event.update({"spawned": sel.spawned, "evicted": sel.evicted_id,
                          "distance": sel.distance, "usable": usable})
        else:
            state.head = new_head
        self.training_events.append(event)

    # ------------------------------------------------------------------
    def on_metric(self, fi, now):
        cfg = self.config
        fr = self._last_frame
        if fr is None or fr.frame_index != fi:
            fr = self.source.frame(fi)
        enc = self.encoded[fi]
        t0 = time.perf_counter()
        lidar_cost = None
        lidar_hit = None

        def lidar_view():
            nonlocal lidar_cost, lidar_hit
            if lidar_cost is None:
                lidar_cost, lidar_hit = self.lidar.render(fr.robot_pose, now)
            return lidar_cost, lidar_hit

        top = np.zeros((cfg.image_height, cfg.image_width), dtype=bool)
        top[:cfg.image_height // 2, :] = True

        preds, presence = {}, {}
        decision = None
        for name, state in self.methods.items():
            if state.kind == "lidar":
                cost, hits = lidar_view()
                preds[name] = ("sparse", cost)
                presence[name] = hits
            elif state.kind == "adaptive":
                decision = (self.decisions[-1][1]
                            if self.decisions else None)
                if decision is not None and decision.source == SOURCE_HEAD:
                    head = state.ensemble.heads[decision.head_id]
                    preds[name] = ("dense", head.predict(enc))
                    presence[name] = top
                else:
                    cost, hits = lidar_view()
                    preds[name] = ("sparse", cost)
                    presence[name] = hits
            else:
                preds[name] = ("dense", state.head.predict(enc))
                presence[name] = top

        regions = metrics.region_masks(fr.range, fr.sky, presence)
        band = top & ~fr.sky & np.isfinite(fr.range) \
            & (fr.range >= cfg.band_lo) & (fr.range < cfg.band_hi)

        record = {"t": now, "frame": fi,
                  "source": decision.source_label if decision else "",
                  "corrupted": bool(fr.corrupted), "conf": {}}
        class_masks = {}
        for name, (kind, cost) in preds.items():
            cls10 = metrics.discretize(cost)
            if kind == "sparse":
                dense = metrics.discretize(metrics.fill_lidar_gaps(cost))
            else:
                dense = cls10
            class_masks[name] = dense
            record["conf"][name] = {
                "miou10": metrics.confusion_counts(cls10, fr.gt_class,
                                                   regions["miou10"]),
                "miouH": metrics.confusion_counts(dense, fr.gt_class,
                                                  regions["miouH"]),
                "band": metrics.confusion_counts(dense, fr.gt_class, band),
            }
        self.frame_records.append(record)
        self.eval_frames.append({
            "t": now, "frame": fi, "gt": fr.gt_class,
            "range": fr.range, "sky": fr.sky,
            "regions": {k: v for k, v in regions.items()}, "band": band,
            "classes": class_masks,
        })
        self._timeit("metrics", t0)


# ----------------------------------------------------------------------
# aggregation

def pool_records(records, methods, t0, t1, region):
    agg = {m: np.zeros((3, 4), dtype=np.int64) for m in methods}
    for rec in records:
        if t0 <= rec["t"] < t1:
            for m in methods:
                if m in rec["conf"]:
                    agg[m] += rec["conf"][m][region]
    return {m: metrics.iou_from_confusion(agg[m], region) for m in agg}


def summarize(records, methods, t0, t1):
    out = {}
    for region in ("miou10", "miouH", "band"):
        reports = pool_records(records, methods, t0, t1, region)
        for m, rep in reports.items():
            entry = out.setdefault(m, {})
            entry[region] = {
                "miou": rep.miou,
                "per_class": {metrics.CLASS_NAMES[c]: v
                              for c, v in rep.per_class.items()},
                "pixels": rep.pixel_count,
            }
    return out


# ----------------------------------------------------------------------

def run_pretraining(config: RunConfig, palette, scene_seed, noise_seed,
                    encoder: Encoder, head_id=0):
    """Train a fresh head on a separate scene; returns the trained head."""
    scene, sim = build_simulator(config, palette, scene_seed, noise_seed,
                                 config.pretrain_duration)
    src = LiveSequenceSource(sim)
    scans = [src.scan(i) for i in range(src.n_scans)]
    scan_ts = [s.timestamp for s in scans]
    frame_times = np.arange(src.n_frames) / config.camera_rate
    params = config.labeling_params()
    poses = src.poses()
    pose_ts = np.array([p.timestamp for p in poses])
    pairs = []
    for (m, fi, t, ready) in pair_schedule(frame_times, config):
        if ready > src.duration:
            break
        lo = bisect.bisect_left(scan_ts, t)
        hi = bisect.bisect_right(scan_ts, ready)
        if lo == hi:
            continue
        plo = bisect.bisect_left(pose_ts, t)
        phi = bisect.bisect_right(pose_ts, ready)
        path_xy = np.array([poses[i].position[:2] for i in range(plo, phi)])
        fr = src.frame(fi)
        mask = labeling.make_training_mask(
            scans[lo:hi], fr.robot_pose, config.intrinsics(),
            config.extrinsics(), path_xy, params)
        if mask.valid_count < params.min_pixels:
            continue
        pairs.append((m, encoder.encode(fr.image, fr.timestamp), mask, t))

    head = ModelHead(head_id, config.feature_dim, kind=config.head_kind)
    ppw = pairs_per_window(config)
    windows = {}
    for (m, enc, mask, t) in pairs:
        windows.setdefault(m // ppw, []).append(
            BufferFrame(enc, mask.costs, t))
    now = 0.0
    for k in sorted(windows):
        frames = windows[k]
        if len(frames) < config.n_train_frames + 2:
            continue
        n_val = min(config.n_val_frames, len(frames) - config.n_train_frames)
        if n_val < 1:
            continue
        val = frames[config.n_train_frames:config.n_train_frames + n_val]
        val += val * ((config.n_val_frames + n_val - 1) // n_val)
        buf = TrainingBuffer(frames[:config.n_train_frames],
                             val[:config.n_val_frames],
                             (k * config.buffer_period,
                              (k + 1) * config.buffer_period),
                             now, config.n_train_frames, config.n_val_frames)
        now = (k + 1) * config.buffer_period + config.label_delay \
            + config.train_duration
        head, tl, vl = train_head(head, buf, now=now, lr=config.learning_rate,
                                  epochs=config.epochs)
    head.usable = True
    return head


def _make_methods(config: RunConfig, encoder: Encoder):
    """Method states (and the palette schedule) for the configured scenario."""
    methods = {}
    names = config.method_list()
    scenario = config.scenario
    palette_schedule = None
    drop_interval = None
    duration = config.duration

    if scenario == "multi-domain":
        duration = 3 * config.segment_length
        palette_schedule = [(0.0, config.palette),
                            (config.segment_length, config.alt_palette),
                            (2 * config.segment_length, config.palette)]
        head_a = run_pretraining(config, config.palette,
                                 config.pretrain_scene_seed,
                                 config.pretrain_noise_seed, encoder, 0)
        head_b = run_pretraining(config, config.alt_palette,
                                 config.pretrain_scene_seed + 1,
                                 config.pretrain_noise_seed + 1, encoder, 1)
        for name in names:
            if name == "adaptive":
                methods[name] = MethodState(name, "adaptive", ensemble=Ensemble(
                    [head_a.copy(), head_b.copy()], capacity=config.capacity,
                    cd_new=config.cd_new, cd_lidar=config.cd_lidar,
                    l_usable=config.l_usable,
                    usability_window=config.usability_window))
            elif name == "no_selection_a":
                methods[name] = MethodState(name, "single", head=head_a.copy())
            elif name == "no_selection_b":
                methods[name] = MethodState(name, "single", head=head_b.copy())
            elif name == "lidar":
                methods[name] = MethodState(name, "lidar")
    else:
        if scenario == "view-drop":
            drop_interval = (config.drop_start, config.drop_end)
            pre_palette = config.palette
        else:
            pre_palette = config.alt_palette
        head0 = run_pretraining(config, pre_palette,
                                config.pretrain_scene_seed,
                                config.pretrain_noise_seed, encoder, 0)
        for name in names:
            if name == "adaptive":
                methods[name] = MethodState(name, "adaptive", ensemble=Ensemble(
                    [head0.copy()], capacity=config.capacity,
                    cd_new=config.cd_new, cd_lidar=config.cd_lidar,
                    l_usable=config.l_usable,
                    usability_window=config.usability_window))
            elif name in ("no_selection", "no_selection_a", "no_selection_b"):
                methods[name] = MethodState(name, "single", head=head0.copy())
            elif name == "frozen":
                methods[name] = MethodState(name, "frozen", head=head0.copy())
            elif name == "lidar":
                methods[name] = MethodState(name, "lidar")
    return methods, palette_schedule, drop_interval, duration


def run_sequence(config: RunConfig, persist=True):
    """Execute one scenario end to end and return the metrics report."""
    config.validate()
    wall0 = time.perf_counter()
    encoder = Encoder(config.encoder_config())
    methods, palette_schedule, drop_interval, duration = _make_methods(
        config, encoder)

    if config.scenario == "replay":
        if not config.sequence_dir:
            raise ValueError("replay needs sequence_dir")
        source = DiskSequenceSource(config.sequence_dir, config.sensor_config())
        duration = source.duration
    else:
        _, sim = build_simulator(config, config.palette, config.scene_seed,
                                 config.noise_seed, duration,
                                 palette_schedule, drop_interval)
        source = LiveSequenceSource(sim)

    if config.mode == "pipelined":
        engine = run_pipelined(config, source, methods, encoder)
    else:
        engine = SequenceEngine(config, source, methods, encoder)
        engine.run()

    report = build_report(config, engine, duration, drop_interval)
    if persist:
        persist_run(config, engine, report)
    report["wall_seconds_file"] = "timings.txt"
    engine._timings["total"] = time.perf_counter() - wall0
    if persist:
        with open(os.path.join(config.out_dir, "timings.txt"), "w") as f:
            for k, v in sorted(engine._timings.items()):
                f.write(f"{k}\t{v:.3f}\n")
    return report


def run_baselines(config: RunConfig, persist=True):
    """Run the scenario with every compared method enabled."""
    if not config.methods:
        config.methods = ",".join(config.method_list())
    return run_sequence(config, persist=persist)


def build_report(config: RunConfig, engine: SequenceEngine, duration,
                 drop_interval):
    names = list(engine.methods)
    records = engine.frame_records
    report = {
        "package_version": __version__,
        "scenario": config.scenario,
        "config": config.to_dict(),
        "methods": names,
        "duration": duration,
        "summary": summarize(records, names, config.train_time, duration),
        "full_run": summarize(records, names, 0.0, duration),
        "training_events": engine.training_events,
        "audit": {
            "causality_ok": engine.audit["causality_ok"],
            "max_label_lead": engine.audit["max_label_lead"],
            "buffer_boundaries_exact": all(
                abs(s - round(s / config.buffer_period) * config.buffer_period)
                < 1e-9 for s in engine.audit["buffer_starts"]),
            "pairs_emitted": engine.audit["pairs"],
            "pairs_dropped": engine.dropped_pairs,
        },
        "timeseries": [
            {"t": rec["t"], "source": rec["source"],
             "corrupted": rec["corrupted"],
             "miou10": {m: metrics.iou_from_confusion(rec["conf"][m]["miou10"]).miou
                        for m in rec["conf"]}}
            for rec in records
        ],
    }

    if config.scenario == "multi-domain":
        f15 = {}
        for si in range(3):
            t0 = si * config.segment_length
            f15[f"segment_{si}"] = summarize(records, names, t0, t0 + 15.0)
        report["f15"] = f15
        # paper-style averaging of the two single-head starts
        for region in ("miou10", "miouH"):
            for block_name in ("summary", "full_run"):
                block = report[block_name]
                if "no_selection_a" in block and "no_selection_b" in block:
                    block.setdefault("no_selection", {})[region] = {
                        "miou": 0.5 * (block["no_selection_a"][region]["miou"]
                                       + block["no_selection_b"][region]["miou"]),
                        "averaged_over": ["no_selection_a", "no_selection_b"],
                    }
            for seg in report["f15"].values():
                if "no_selection_a" in seg and "no_selection_b" in seg:
                    seg.setdefault("no_selection", {})[region] = {
                        "miou": 0.5 * (seg["no_selection_a"][region]["miou"]
                                       + seg["no_selection_b"][region]["miou"]),
                    }
        spawns = [e for e in engine.training_events
                  if not e.get("skipped") and e.get("spawned")]
        revisit_start = 2 * config.segment_length
        report["revisit_spawns"] = sum(
            1 for e in spawns if e["t"] >= revisit_start + config.label_delay)

    if drop_interval is not None:
        d0, d1 = drop_interval
        settle = d0 + config.drop_latency_allowance
        in_drop = [(t, d) for (t, d) in engine.decisions if settle <= t < d1]
        lidar_frac = (np.mean([d.source == SOURCE_LIDAR for _, d in in_drop])
                      if in_drop else float("nan"))
        recovery = None
        for (t, d) in engine.decisions:
            if t >= d1 and d.source == SOURCE_HEAD:
                recovery = t - d1
                break
        report["dropout"] = {
            "interval": [d0, d1],
            "latency_allowance": config.drop_latency_allowance,
            "lidar_fraction": float(lidar_frac),
            "recovery_seconds": recovery,
            "miou10": {m: v["miou10"]["miou"] for m, v in
                       summarize(records, names, settle, d1).items()},
            "full_interval_miou10": {m: v["miou10"]["miou"] for m, v in
                                     summarize(records, names, d0, d1).items()},
        }
    return report


def persist_run(config: RunConfig, engine: SequenceEngine, report):
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "decisions.tsv"), "w") as f:
        f.write("\n".join(engine.decision_lines) + "\n")
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report, f, sort_keys=True, indent=1, default=_json_default)
    from .config import save_config
    save_config(config, os.path.join(out, "config.txt"))
    np.savez_compressed(
        os.path.join(out, "eval_frames.npz"),
        **_flatten_eval(engine.eval_frames))
    if config.dump_every > 0:
        from PIL import Image
        os.makedirs(os.path.join(out, "maps"), exist_ok=True)
        for idx, ev in enumerate(engine.eval_frames):
            if idx % config.dump_every:
                continue
            for m, cls in ev["classes"].items():
                img = terrain.grid_to_image(
                    np.where(cls == metrics.UNKNOWN, np.nan,
                             cls.astype(float) * 5.0))
                Image.fromarray(img).save(
                    os.path.join(out, "maps", f"{ev['frame']:06d}_{m}.png"))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _flatten_eval(eval_frames):
    arrays = {}
    for idx, ev in enumerate(eval_frames):
        key = f"f{idx:04d}"
        arrays[f"{key}_t"] = np.array(ev["t"])
        arrays[f"{key}_gt"] = ev["gt"]
        arrays[f"{key}_r10"] = ev["regions"]["miou10"]
        arrays[f"{key}_rH"] = ev["regions"]["miouH"]
        arrays[f"{key}_band"] = ev["band"]
        for m, cls in ev["classes"].items():
            arrays[f"{key}_cls_{m}"] = cls
    return arrays


def recompute_from_eval(path):
    """Recompute pooled per-method mIoU from a persisted eval_frames.npz."""
    data = np.load(path)
    keys = sorted({k.split("_")[0] for k in data.files})
    methods = sorted({k.split("_cls_")[1] for k in data.files if "_cls_" in k})
    agg = {m: {"miou10": np.zeros((3, 4), np.int64),
               "miouH": np.zeros((3, 4), np.int64)} for m in methods}
    for key in keys:
        gt = data[f"{key}_gt"]
        for m in methods:
            cls = data[f"{key}_cls_{m}"]
            agg[m]["miou10"] += metrics.confusion_counts(cls, gt, data[f"{key}_r10"])
            agg[m]["miouH"] += metrics.confusion_counts(cls, gt, data[f"{key}_rH"])
    return {m: {r: metrics.iou_from_confusion(c, r).miou
                for r, c in regions.items()}
            for m, regions in agg.items()}


# ----------------------------------------------------------------------
# threshold calibration

def calibrate_thresholds(config: RunConfig, n_frames=24):
    """Derive CD_new / CD_LiDAR / L_usable from simulator data.

    Same-scene, cross-scene and corrupted-frame embedding distance
    distributions set the two cosine thresholds; converged clean validation
    losses set the usability threshold.
    """
    from .ensemble import cosine_distance
    encoder = Encoder(config.encoder_config())
    embs = {}
    for key, palette, seed, ns in (
            ("a", config.palette, config.scene_seed, config.noise_seed),
            ("b", config.alt_palette, config.scene_seed + 101,
             config.noise_seed + 1)):
        _, sim = build_simulator(config, palette, seed, ns, 30.0)
        step = max(1, len(sim.frame_times()) // n_frames)
        embs[key] = [encoder.encode(sim.frame(i).image).embedding
                     for i in range(0, len(sim.frame_times()), step)]
    shape = (config.image_height, config.image_width, 3)
    embs["corrupt"] = [
        encoder.encode(corrupt_image(
            shape, np.random.default_rng(
                np.random.SeedSequence([config.noise_seed, 0xC0, i])),
            config.drop_mode)).embedding
        for i in range(n_frames // 2)]

    def dists(xs, ys, skip_same=False):
        return np.array([cosine_distance(x, y)
                         for i, x in enumerate(xs) for j, y in enumerate(ys)
                         if not (skip_same and i == j)])

    same = np.concatenate([dists(embs["a"], embs["a"], True),
                           dists(embs["b"], embs["b"], True)])
    cross = dists(embs["a"], embs["b"])
    corrupt = np.concatenate([dists(embs["corrupt"], embs["a"]),
                              dists(embs["corrupt"], embs["b"])])
    cd_new = float(0.5 * (np.percentile(same, 95) + np.percentile(cross, 10)))
    cd_lidar = float(max(0.5 * (np.percentile(cross, 75)
                                + np.percentile(corrupt, 10)),
                         cd_new + 0.05))
    head = run_pretraining(config, config.palette, config.scene_seed,
                           config.noise_seed, encoder)
    losses = [v for _, v in head.loss_records] or [config.l_usable / 2.0]
    l_usable = float(np.clip(2.5 * np.median(losses), 2.0, 12.0))
    return {"cd_new": cd_new, "cd_lidar": cd_lidar, "l_usable": l_usable,
            "stats": {
                "same_p95": float(np.percentile(same, 95)),
                "cross_p10": float(np.percentile(cross, 10)),
                "cross_p75": float(np.percentile(cross, 75)),
                "corrupt_p10": float(np.percentile(corrupt, 10)),
                "clean_val_loss_median": float(np.median(losses)),
            }}


# ----------------------------------------------------------------------
# pipelined execution (mode 2): labeling and training in worker threads,
# inference on the main thread; map and ensemble reads go through snapshots

def run_pipelined(config: RunConfig, source, methods, encoder: Encoder):
    engine = SequenceEngine(config, source, methods, encoder)
    cfg = config
    label_q = queue.Queue(maxsize=8)
    train_q = queue.Queue(maxsize=4)
    state_lock = threading.Lock()

    def labeler():
        while True:
            item = label_q.get()
            if item is None:
                break
            spec, scans_window = item
            m, fi, t, ready = spec
            params = cfg.labeling_params()
            path_xy = engine._path_xy(t, ready)
            pose = source.frame(fi).robot_pose
            mask = labeling.make_training_mask(
                scans_window, pose, cfg.intrinsics(), cfg.extrinsics(),
                path_xy, params)
            with state_lock:
                if mask.valid_count >= params.min_pixels:
                    pair = labeling.TrainingPair(fi, mask, t, ready)
                    engine.pairs_by_window.setdefault(
                        m // pairs_per_window(cfg), []).append(pair)
                    engine.audit["pairs"] += 1
                else:
                    engine.dropped_pairs += 1
            label_q.task_done()

    def trainer():
        while True:
            item = train_q.get()
            if item is None:
                break
            payload, now = item
            with state_lock:
                staged = engine.on_train(payload, now)
            for s in staged:
                with state_lock:
                    engine.on_publish(s, payload[2])
            train_q.task_done()

    lt = threading.Thread(target=labeler, daemon=True)
    tt = threading.Thread(target=trainer, daemon=True)
    lt.start(); tt.start()

    frame_times = np.arange(source.n_frames) / cfg.camera_rate
    engine.pair_specs = pair_schedule(frame_times, cfg)
    pair_iter = iter([p for p in engine.pair_specs
                      if p[3] <= source.duration])
    next_pair = next(pair_iter, None)
    cycles = iter(window_pools(cfg, source.duration))
    next_cycle = next(cycles, None)
    n_metric = int(np.floor(source.duration / cfg.metric_period))
    metric_frames = {int(np.argmin(np.abs(frame_times - j * cfg.metric_period)))
                     for j in range(n_metric)}

    scan_i = 0
    for fi in range(source.n_frames):
        t = float(frame_times[fi])
        while scan_i < source.n_scans and scan_i / cfg.lidar_rate <= t:
            with state_lock:
                engine.on_scan(scan_i, scan_i / cfg.lidar_rate)
            scan_i += 1
        while next_pair is not None and next_pair[3] <= t:
            m, pfi, pt, ready = next_pair
            lo = bisect.bisect_left(engine.scan_ts, pt)
            hi = bisect.bisect_right(engine.scan_ts, ready)
            label_q.put((next_pair, engine.scans[lo:hi]))
            next_pair = next(pair_iter, None)
        while next_cycle is not None and next_cycle[2] <= t:
            label_q.join()
            train_q.put(((next_cycle[0], next_cycle[1], next_cycle[3]),
                         next_cycle[2]))
            next_cycle = next(cycles, None)
        with state_lock:
            engine.on_frame(fi, t)
            if fi in metric_frames:
                train_q.join()
                engine.on_metric(fi, t)
    label_q.put(None)
    train_q.put(None)
    lt.join(); tt.join()
    return engine
