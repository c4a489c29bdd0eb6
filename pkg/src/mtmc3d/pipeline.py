"""Frame-by-frame driver tying every stage together.

Frames are processed strictly in order and each step reads only the current
frame's inputs plus state carried from earlier frames, so the results for
frame ``t`` never depend on anything after ``t``.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box3D
from .config import PipelineConfig
from .errors import DataError, PointAtInfinityError, ValidationError
from .fuse_refine import TrackHistory, fuse, refine_yaw
from .geometry import homography_project
from .ingest import (ClassStats, Detection2D, ResultWriter, depth_path, erode_mask, format_result_2d_line,
                     load_calibrations, load_class_stats, load_detections, load_masks, read_depth)
from .lift3d import LiftInput, dbscan, fallback_box, fit_box, lift_target
from .sct import SingleCameraTracker, select_foot_point
from .spatial_assoc import Cluster, TargetSnapshot, cluster_frame
from .temporal_assoc import Assignment, TemporalAssociator, TrackState

logger = logging.getLogger(__name__)

RESULTS_3D = "results.txt"
RESULTS_2D = "results_2d.txt"
EVENTS = "events.jsonl"
COUNTERS = "counters.jsonl"
SUMMARY = "summary.json"


@dataclass
class FrameTrace:
    """Everything one frame produced, stage by stage (used by ``inspect``)."""
    frame: int
    clusters: List[Cluster] = field(default_factory=list)
    assignments: List[Assignment] = field(default_factory=list)
    overlap_reports: List[dict] = field(default_factory=list)
    clouds: Dict[int, np.ndarray] = field(default_factory=dict)
    boxes_before_fusion: List[Box3D] = field(default_factory=list)
    boxes: List[Box3D] = field(default_factory=list)
    fusion_groups: List[List[int]] = field(default_factory=list)
    lines_2d: List[str] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    events: List[dict] = field(default_factory=list)


@dataclass
class Scene:
    root: Path
    calibrations: dict
    stats: ClassStats
    detections: dict  # frame -> camera -> [Detection2D]
    masks: Optional[dict]

    @property
    def frames(self) -> List[int]:
        if not self.detections:
            return []
        return list(range(min(self.detections), max(self.detections) + 1))


def load_scene(root, config: PipelineConfig) -> Scene:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: scene directory not found")
    calibs = load_calibrations(root / "calibration.json")
    stats = load_class_stats(root / "class_stats.json", pedestrian_class=config.pedestrian_class)
    for key, eps in config.lift.epsilon_overrides.items():
        stats.classes[int(key)] = replace(stats[int(key)], epsilon=float(eps))
    for key, cut in config.cut_overrides.items():
        stats.classes[int(key)] = replace(stats[int(key)], cut=float(cut))
    det_path = root / "detections.jsonl"
    detections = load_detections(det_path) if det_path.exists() else {}
    for frame, per_cam in detections.items():
        for cam, dets in per_cam.items():
            if cam not in calibs:
                raise ValidationError(f"detections reference camera {cam} without calibration")
            calib = calibs[cam]
            for det in dets:
                det.clamp_to_image(calib.image_width, calib.image_height)
                if det.class_id not in stats:
                    raise ValidationError(f"frame {frame} camera {cam}: class {det.class_id} has no statistics")
    masks = None
    mask_path = root / "masks.jsonl"
    if config.mode == "3d" and config.lift.box_mode == "lift" and mask_path.exists():
        masks = load_masks(mask_path)
    return Scene(root, calibs, stats, detections, masks)


def _corrupt(clusters: List[Cluster], rate: float, rng: np.random.Generator) -> List[Cluster]:
    """Damage a fraction ``rate`` of the clusters: each picked cluster hands one random
    member to another cluster of its class, swapping with that cluster's member from
    the same camera if there is one."""
    groups = [list(c.members) for c in clusters]
    classes = [c.class_id for c in clusters]
    for gi in range(len(groups)):
        if rng.random() >= rate or not groups[gi]:
            continue
        others = [j for j in range(len(groups)) if j != gi and classes[j] == classes[gi] and groups[j]]
        if not others:
            continue
        snap = groups[gi][int(rng.integers(len(groups[gi])))]
        gj = others[int(rng.integers(len(others)))]
        clash = [m for m in groups[gj] if m.camera_id == snap.camera_id]
        groups[gi].remove(snap)
        groups[gj].append(snap)
        if clash:
            groups[gj].remove(clash[0])
            groups[gi].append(clash[0])
    out = [Cluster(g) for g in groups if g]
    out.sort(key=lambda c: (c.class_id, c.keys[0]))
    return out


class Pipeline:
    def __init__(self, scene: Scene, config: PipelineConfig):
        self.scene = scene
        self.config = config
        self.trackers = {cam: SingleCameraTracker(cam, config.sct, config.pedestrian_class)
                         for cam in sorted(scene.calibrations)}
        self.associator = TemporalAssociator(config.temporal)
        self.history = TrackHistory(maxlen=config.yaw.period + 1)
        self._pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
        self._n_events = 0

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    # -- stages --------------------------------------------------------------

    def _snapshots(self, frame: int, counters: Dict[str, int]) -> List[TargetSnapshot]:
        per_cam = self.scene.detections.get(frame, {})
        cams = sorted(self.trackers)
        tracked = self._map(lambda cam: self.trackers[cam].step(per_cam.get(cam, [])), cams)
        snaps = []
        for cam, pairs in zip(cams, tracked):
            H = self.scene.calibrations[cam].H
            for det, lid in pairs:
                foot = select_foot_point(det, self.config.pedestrian_class, self.config.keypoint_confidence)
                try:
                    xy = homography_project(foot[0], foot[1], H)
                except PointAtInfinityError:
                    counters["foot_at_infinity"] = counters.get("foot_at_infinity", 0) + 1
                    continue
                snaps.append(TargetSnapshot(cam, lid, det.class_id, det.embedding, (float(xy[0]), float(xy[1])),
                                            foot, det.score, det))
        return snaps

    def _depth(self, cam: int, frame: int, cache: dict) -> Optional[np.ndarray]:
        if cam not in cache:
            p = depth_path(self.scene.root, cam, frame)
            cache[cam] = read_depth(p) if p.exists() else None
        return cache[cam]

    def _box_for(self, a: Assignment, frame: int, depth_cache: dict) -> Tuple[Box3D, str, Optional[np.ndarray], int]:
        cl = a.cluster
        score = float(np.mean([m.score for m in cl.members]))
        if self.config.lift.box_mode == "fixed":
            return fallback_box(cl.centroid, cl.class_id, self.scene.stats, score, a.global_id), "fixed", None, 0
        views, missing = [], 0
        for m in cl.members:
            det: Detection2D = m.detection
            inst = None if self.scene.masks is None else self.scene.masks.get((frame, m.camera_id, det.det_index))
            depth = self._depth(m.camera_id, frame, depth_cache)
            if inst is None or depth is None:
                missing += 1
                continue
            mask = inst.decode()
            if mask.shape != depth.shape:
                raise ValidationError(f"frame {frame} camera {m.camera_id}: mask and depth sizes differ")
            if self.config.lift.erode_masks:
                mask = erode_mask(mask)
            views.append(LiftInput(self.scene.calibrations[m.camera_id], mask, depth, m.score))
        cloud = lift_target(views, cl.class_id, a.global_id, self.config.lift.pixel_stride)
        cloud.score = score
        labels = None
        if not cloud.empty:
            labels = dbscan(cloud.points, self.scene.stats[cl.class_id].epsilon, self.config.lift.min_samples)
        # measure extents along the heading the track had after the previous frame
        yaw = self.history.yaw.get(a.global_id, 0.0) if self.config.yaw.enabled else 0.0
        box, how = fit_box(cloud, labels, self.scene.stats, cl.centroid,
                           self.config.lift.alpha_lower, self.config.lift.alpha_upper, yaw=yaw)
        return box, how, cloud.points, missing

    def step(self, frame: int) -> FrameTrace:
        cfg = self.config
        trace = FrameTrace(frame)
        counters = trace.counters
        snaps = self._snapshots(frame, counters)
        clusters = cluster_frame(snaps, self.scene.stats, cfg.spatial)
        if cfg.corruption.rate > 0:
            clusters = _corrupt(clusters, cfg.corruption.rate, np.random.default_rng([cfg.corruption.seed, frame]))
        trace.clusters = clusters
        trace.assignments = self.associator.update(frame, clusters)
        trace.overlap_reports = list(self.associator.last_reports)
        trace.events = self.associator.events[self._n_events:]
        self._n_events = len(self.associator.events)
        emitted = sorted((a for a in trace.assignments if a.state == TrackState.CONFIRMED), key=lambda a: a.global_id)
        counters.update(clusters=len(clusters), emitted=len(emitted),
                        splits=sum(e["type"] == "split" for e in trace.events),
                        reactivations=sum(e["type"] == "reactivate" for e in trace.events))

        if cfg.mode == "2d":
            for a in emitted:
                for m in a.cluster.members:
                    trace.lines_2d.append(format_result_2d_line(frame, m.camera_id, a.global_id, m.detection.box))
            return trace

        depth_cache: dict = {}
        # prefetch depth maps so the worker pool only does pure computation
        if cfg.lift.box_mode == "lift":
            for cam in sorted({m.camera_id for a in emitted for m in a.cluster.members}):
                self._depth(cam, frame, depth_cache)
        built = self._map(lambda a: self._box_for(a, frame, depth_cache), emitted)
        boxes = []
        for a, (box, how, points, missing) in zip(emitted, built):
            boxes.append(box)
            if points is not None:
                trace.clouds[a.global_id] = points
            counters["fallback_boxes"] = counters.get("fallback_boxes", 0) + (how == "fallback")
            counters["class_mean_boxes"] = counters.get("class_mean_boxes", 0) + (how == "class-mean")
            counters["missing_inputs"] = counters.get("missing_inputs", 0) + missing
        if counters.get("missing_inputs"):
            logger.warning("frame %d: %d views without depth or mask", frame, counters["missing_inputs"])
        trace.boxes_before_fusion = boxes
        if cfg.fusion.enabled:
            boxes, groups = fuse(boxes, cfg.fusion.threshold)
        else:
            groups = [[b.global_id] for b in boxes]
        trace.fusion_groups = groups
        counters["fusion_groups"] = sum(len(g) > 1 for g in groups)
        out = []
        for box in boxes:
            self.history.record(box.global_id, frame, box.x, box.y)
            if cfg.yaw.enabled:
                yaw = refine_yaw(self.history, box.global_id, frame, cfg.yaw.period, cfg.yaw.min_displacement)
                box = box.with_(yaw=yaw)
            out.append(box)
        trace.boxes = sorted(out, key=lambda b: b.global_id)
        return trace


@dataclass
class RunSummary:
    frames: int
    boxes: int
    counters: Dict[str, int]
    out_dir: str

    def to_dict(self) -> dict:
        return {"frames": self.frames, "boxes": self.boxes, "counters": self.counters, "out_dir": self.out_dir}


def run(scene_dir, config: PipelineConfig, out_dir, max_frame: Optional[int] = None) -> RunSummary:
    """Track a scene and write results, events and per-frame counters to ``out_dir``."""
    config.validate()
    scene = load_scene(scene_dir, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result_name = RESULTS_2D if config.mode == "2d" else RESULTS_3D
    pipe = Pipeline(scene, config)
    totals: Dict[str, int] = {}
    n_frames = n_boxes = 0
    try:
        with ResultWriter(out / result_name) as writer, \
                (out / EVENTS).open("w", encoding="utf-8") as ev_fh, \
                (out / COUNTERS).open("w", encoding="utf-8") as ct_fh:
            for frame in scene.frames:
                if max_frame is not None and frame > max_frame:
                    break
                trace = pipe.step(frame)
                if config.mode == "2d":
                    writer.write_lines(trace.lines_2d)
                    n_boxes += len(trace.lines_2d)
                else:
                    writer.write_frame(frame, trace.boxes)
                    n_boxes += len(trace.boxes)
                for ev in trace.events:
                    ev_fh.write(json.dumps(ev, sort_keys=True) + "\n")
                ct_fh.write(json.dumps({"frame": frame, **trace.counters}, sort_keys=True) + "\n")
                ev_fh.flush()
                ct_fh.flush()
                for k, v in trace.counters.items():
                    totals[k] = totals.get(k, 0) + int(v)
                n_frames += 1
    finally:
        pipe.close()
    summary = RunSummary(n_frames, n_boxes, totals, str(out))
    (out / SUMMARY).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if totals.get("fallback_boxes"):
        logger.warning("%d boxes fell back to class means at the top-down location", totals["fallback_boxes"])
    return summary


def _downsample(points: np.ndarray, limit: int) -> np.ndarray:
    if len(points) <= limit:
        return points
    idx = np.linspace(0, len(points) - 1, limit).round().astype(int)
    return points[idx]


def _box_dict(b: Box3D) -> dict:
    return {"global_id": b.global_id, "class_id": b.class_id, "center": [b.x, b.y, b.z],
            "dims": [b.length, b.width, b.height], "yaw": b.yaw, "score": b.score}


def inspect(scene_dir, config: PipelineConfig, frame: int, cloud_points: int = 200) -> dict:
    """Run up to ``frame`` and serialise that frame's intermediate products."""
    config.validate()
    scene = load_scene(scene_dir, config)
    if frame not in scene.frames:
        raise ValidationError(f"frame {frame} is outside the scene ({len(scene.frames)} frames)")
    pipe = Pipeline(scene, config)
    try:
        for f in scene.frames:
            trace = pipe.step(f)
            if f == frame:
                break
    finally:
        pipe.close()
    return {
        "frame": frame,
        "clusters": [{"class_id": c.class_id, "members": [list(k) for k in c.keys],
                      "centroid": [float(v) for v in c.centroid]} for c in trace.clusters],
        "assignments": [{"global_id": a.global_id, "state": a.state.value, "stage": a.stage,
                         "members": [list(k) for k in a.cluster.keys]} for a in trace.assignments],
        "overlap_reports": trace.overlap_reports,
        "events": trace.events,
        "clouds": {str(g): _downsample(p, cloud_points).round(4).tolist() for g, p in sorted(trace.clouds.items())},
        "boxes_before_fusion": [_box_dict(b) for b in trace.boxes_before_fusion],
        "fusion_groups": trace.fusion_groups,
        "boxes": [_box_dict(b) for b in trace.boxes],
        "counters": trace.counters,
    }
