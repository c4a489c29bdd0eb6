"""Synthetic multi-camera scenes with exact depth, masks and ground truth.

Targets are yaw-rotated cuboids moving back and forth along piecewise-linear
paths. Cameras sit on a ring looking inward. Each (camera, frame) is rendered
by analytic ray/box intersection, which gives exact planar depth, exact
visible silhouettes and, from those, the detections. All randomness is
seeded per (camera, frame), so output depends only on the config.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import Box3D, wrap_angle
from .errors import ValidationError
from .geometry import CameraCalibration, ground_homography, look_at_rotation, world_to_camera
from .ingest import (ClassInfo, ClassStats, Detection2D, InstanceMask, default_epsilon, depth_path,
                     write_calibrations, write_class_stats, write_depth, write_detections, write_masks,
                     write_results)

logger = logging.getLogger(__name__)

# body-relative keypoints on the front face: (lateral fraction of half-width, height fraction)
_KEYPOINT_LAYOUT = [
    (0.8, 0.82), (-0.8, 0.82),    # shoulders
    (0.9, 0.63), (-0.9, 0.63),    # elbows
    (0.9, 0.48), (-0.9, 0.48),    # wrists
    (0.5, 0.52), (-0.5, 0.52),    # hips
    (0.45, 0.28), (-0.45, 0.28),  # knees
    (0.4, 0.0), (-0.4, 0.0),      # ankles
    (0.0, 0.95), (0.0, 0.87),     # head, neck
]
_KP_VISIBLE, _KP_HIDDEN = 0.9, 0.1
_SCT_MAX_GAP = 30
IDENTITY_FILE = "detection_identity.jsonl"


@dataclass
class ClassSpec:
    class_id: int
    name: str
    length: float
    width: float
    height: float


@dataclass
class TargetSpec:
    class_id: int
    waypoints: List[Tuple[float, float]]
    speed: float = 1.0  # m/s along the path, back and forth
    start_frame: int = 0
    end_frame: Optional[int] = None
    phase: float = 0.0  # metres already travelled at frame 0
    yaw: float = 0.0  # used while the target is stationary


@dataclass
class Occlusion:
    target: int
    start: int
    end: int  # exclusive


@dataclass
class ScenarioConfig:
    seed: int = 0
    frames: int = 300
    fps: float = 30.0
    image_width: int = 640
    image_height: int = 480
    num_cameras: int = 4
    ring_radius: float = 25.0
    camera_height: float = 25.0
    camera_azimuth_offset_deg: float = 45.0
    hfov_deg: float = 40.0
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    classes: List[ClassSpec] = field(default_factory=list)
    targets: List[TargetSpec] = field(default_factory=list)
    pedestrian_class: int = 0
    embedding_dim: int = 64
    embedding_inter_distance: float = 0.8
    embedding_intra_distance: float = 0.0
    class_inter_distance: Dict[str, float] = field(default_factory=dict)  # class id -> override
    miss_rate: float = 0.0
    box_jitter_px: float = 0.0
    id_switch_rate: float = 0.0
    occlusions: List[Occlusion] = field(default_factory=list)
    score_range: Tuple[float, float] = (0.9, 0.9)
    min_visible_pixels: int = 40
    spatial_gate: float = 3.0
    cut_pedestrian: float = 0.35
    cut_other: float = 1.5

    def validate(self) -> None:
        for name in ("miss_rate", "id_switch_rate", "embedding_inter_distance", "embedding_intra_distance"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.frames < 0 or self.num_cameras < 1 or self.embedding_dim < 4:
            raise ValidationError("frames >= 0, num_cameras >= 1 and embedding_dim >= 4 required")
        if not self.classes:
            raise ValidationError("scenario needs at least one class")
        known = {c.class_id for c in self.classes}
        for t in self.targets:
            if t.class_id not in known:
                raise ValidationError(f"target class {t.class_id} has no ClassSpec")
            if len(t.waypoints) < 1:
                raise ValidationError("target needs at least one waypoint")
        for o in self.occlusions:
            if not (0 <= o.target < len(self.targets)):
                raise ValidationError(f"occlusion refers to unknown target {o.target}")
        for key, v in self.class_inter_distance.items():
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"class_inter_distance[{key}] must lie in [0, 1], got {v}")
        lo, hi = self.score_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValidationError("score_range must satisfy 0 <= lo <= hi <= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        try:
            d["classes"] = [ClassSpec(**c) for c in d.get("classes", [])]
            d["targets"] = [TargetSpec(**{**t, "waypoints": [tuple(w) for w in t["waypoints"]]}) for t in d.get("targets", [])]
            d["occlusions"] = [Occlusion(**o) for o in d.get("occlusions", [])]
            for key in ("look_at", "score_range"):
                if key in d:
                    d[key] = tuple(d[key])
            cfg = cls(**d)
        except (TypeError, KeyError) as exc:
            raise ValidationError(f"malformed scenario config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# presets

PERSON = ClassSpec(0, "person", 0.45, 0.6, 1.75)
CART = ClassSpec(1, "cart", 1.4, 0.9, 1.2)
ROBOT = ClassSpec(2, "robot", 0.9, 0.7, 0.8)


def _lane_targets() -> List[TargetSpec]:
    lanes = [-5.0, -3.0, -1.0, 1.0, 3.0, 5.0]
    classes = [0, 1, 0, 1, 0, 1]
    speeds = [1.2, 1.5, 1.0, 1.8, 1.4, 1.3]
    phases = [0.0, 2.5, 5.0, 1.0, 6.5, 3.5]
    return [TargetSpec(cls, [(-4.0, y), (4.0, y)], speed=v, phase=p)
            for y, cls, v, p in zip(lanes, classes, speeds, phases)]


PRESETS = ("clean", "noisy", "fleet", "crossing")


def preset(name: str, seed: int = 0) -> ScenarioConfig:
    """Named scenarios used by the tests and the CLI."""
    if name == "clean":
        return ScenarioConfig(seed=seed, classes=[PERSON, CART], targets=_lane_targets())
    if name == "noisy":
        rng = np.random.default_rng(seed + 1000)
        targets = []
        classes = [0, 0, 0, 1, 1, 2, 2, 0]
        for i, cls in enumerate(classes):
            pts = [tuple(np.round(rng.uniform(-4.5, 4.5, size=2), 2)) for _ in range(4)]
            targets.append(TargetSpec(cls, pts, speed=float(np.round(rng.uniform(0.8, 1.6), 2)), phase=float(i)))
        return ScenarioConfig(
            seed=seed,
            classes=[PERSON, CART, ROBOT],
            targets=targets,
            embedding_inter_distance=0.5,
            embedding_intra_distance=0.15,
            miss_rate=0.05,
            box_jitter_px=1.5,
            id_switch_rate=0.0,
            occlusions=[Occlusion(1, 120, 160)],
            score_range=(0.5, 1.0),
        )
    if name == "fleet":
        # the noisy scene where carts and robots are indistinguishable by appearance
        cfg = preset("noisy", seed)
        cfg.class_inter_distance = {str(CART.class_id): 0.0, str(ROBOT.class_id): 0.0}
        return cfg
    if name == "crossing":
        return ScenarioConfig(
            seed=seed,
            frames=90,
            num_cameras=1,
            camera_azimuth_offset_deg=270.0,
            classes=[PERSON],
            targets=[TargetSpec(0, [(-3.0, -1.0), (3.0, 1.0)], speed=1.5),
                     TargetSpec(0, [(3.0, -1.0), (-3.0, 1.0)], speed=1.5)],
            embedding_inter_distance=0.8,
            embedding_intra_distance=0.05,
        )
    raise ValidationError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# scene model


def make_cameras(cfg: ScenarioConfig) -> List[CameraCalibration]:
    w, h = cfg.image_width, cfg.image_height
    f = (w / 2.0) / math.tan(math.radians(cfg.hfov_deg) / 2.0)
    cams = []
    for i in range(cfg.num_cameras):
        az = math.radians(cfg.camera_azimuth_offset_deg + 360.0 * i / cfg.num_cameras)
        eye = np.array([cfg.ring_radius * math.cos(az), cfg.ring_radius * math.sin(az), cfg.camera_height])
        R, t = look_at_rotation(eye, np.asarray(cfg.look_at, dtype=float))
        K = np.array([[f, 0, w / 2.0], [0, f, h / 2.0], [0, 0, 1.0]])
        cams.append(CameraCalibration(i, f, f, w / 2.0, h / 2.0, R, t, ground_homography(K, R, t), w, h))
    return cams


def target_pose(spec: TargetSpec, frame: int, fps: float) -> Tuple[float, float, float]:
    """``(x, y, heading)`` of a target that ping-pongs along its waypoints."""
    pts = np.asarray(spec.waypoints, dtype=float)
    if len(pts) == 1 or spec.speed == 0:
        return float(pts[0, 0]), float(pts[0, 1]), wrap_angle(spec.yaw)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    total = float(seg_len.sum())
    s = (spec.phase + spec.speed * frame / fps) % (2 * total)
    forward = s <= total
    if not forward:
        s = 2 * total - s
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    k = int(min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1))
    frac = (s - cum[k]) / seg_len[k] if seg_len[k] > 0 else 0.0
    x, y = pts[k] + frac * seg[k]
    dx, dy = seg[k] if forward else -seg[k]
    return float(x), float(y), wrap_angle(math.atan2(dy, dx))


def target_box(cfg: ScenarioConfig, idx: int, frame: int) -> Optional[Box3D]:
    spec = cfg.targets[idx]
    if frame < spec.start_frame or (spec.end_frame is not None and frame >= spec.end_frame):
        return None
    cls = next(c for c in cfg.classes if c.class_id == spec.class_id)
    x, y, yaw = target_pose(spec, frame, cfg.fps)
    return Box3D(x, y, cls.height / 2.0, cls.length, cls.width, cls.height, yaw, 1.0, cls.class_id, idx + 1)


class _CameraRays:
    """Per-pixel world ray directions (scaled so camera Z = 1) for one camera."""

    def __init__(self, calib: CameraCalibration):
        self.calib = calib
        h, w = calib.image_height, calib.image_width
        u = np.arange(w) + 0.5
        v = np.arange(h) + 0.5
        uu, vv = np.meshgrid(u, v)
        dc = np.stack([(uu - calib.cu) / calib.fu, (vv - calib.cv) / calib.fv, np.ones_like(uu)], axis=-1)
        self.dirs = dc @ calib.R  # R^T d for row vectors
        self.origin = calib.center
        dz = self.dirs[..., 2]
        with np.errstate(divide="ignore"):
            s = np.where(dz < 0, -self.origin[2] / dz, np.inf)
        self.ground = np.where(s > 0, s, np.inf)


def _box_hits(rays: _CameraRays, box: Box3D, rows: slice, cols: slice) -> np.ndarray:
    """Planar depth where the rays hit ``box`` (inf elsewhere) on a pixel window."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    o = rot @ (rays.origin - box.center)
    d = rays.dirs[rows, cols] @ rot.T
    half = box.dims / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    t_lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    t_hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    near = t_lo.max(axis=-1)
    far = t_hi.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def _pixel_window(calib: CameraCalibration, box: Box3D) -> Optional[Tuple[slice, slice]]:
    pc = world_to_camera(box.corners(), calib)
    h, w = calib.image_height, calib.image_width
    if np.any(pc[:, 2] <= 1e-3):
        return slice(0, h), slice(0, w)
    u = calib.fu * pc[:, 0] / pc[:, 2] + calib.cu
    v = calib.fv * pc[:, 1] / pc[:, 2] + calib.cv
    c0, c1 = int(max(math.floor(u.min()) - 1, 0)), int(min(math.ceil(u.max()) + 1, w))
    r0, r1 = int(max(math.floor(v.min()) - 1, 0)), int(min(math.ceil(v.max()) + 1, h))
    if c0 >= c1 or r0 >= r1:
        return None
    return slice(r0, r1), slice(c0, c1)


def render(rays: _CameraRays, boxes: Sequence[Optional[Box3D]]) -> Tuple[np.ndarray, np.ndarray]:
    """Depth map (0 = no sample) and owner map (target index, -1 for background)."""
    zbuf = rays.ground.copy()
    owner = np.full(zbuf.shape, -1, dtype=np.int32)
    for k, box in enumerate(boxes):
        if box is None:
            continue
        win = _pixel_window(rays.calib, box)
        if win is None:
            continue
        depth = _box_hits(rays, box, *win)
        sub_z = zbuf[win]
        closer = depth < sub_z
        sub_z[closer] = depth[closer]
        owner[win][closer] = k
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0).astype(np.float32)
    return depth, owner


# ---------------------------------------------------------------------------
# appearance


def identity_embeddings(cfg: ScenarioConfig) -> np.ndarray:
    """One unit vector per target.

    Targets of one class sit at cosine distance ``embedding_inter_distance`` from
    each other, or at the class's entry in ``class_inter_distance`` when present
    (small values model look-alike fleets).
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    n = len(cfg.targets)
    class_ids = sorted({c.class_id for c in cfg.classes})
    k = n + 1 + len(class_ids)
    D = cfg.embedding_dim
    if k > D:
        raise ValidationError(f"embedding_dim {D} too small for {n} targets; need >= {k}")
    basis = np.linalg.qr(rng.standard_normal((D, k)))[0][:, :k].T  # orthonormal rows
    common = {cid: basis[n + 1 + i] for i, cid in enumerate(class_ids)}
    vecs = np.empty((n, D))
    for i, t in enumerate(cfg.targets):
        d = cfg.class_inter_distance.get(str(t.class_id))
        shared = basis[n] if d is None else common[t.class_id]
        rho = 1.0 - (cfg.embedding_inter_distance if d is None else d)
        vecs[i] = math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * basis[i]
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def noisy_embedding(base: np.ndarray, pair_distance: float, rng: np.random.Generator) -> np.ndarray:
    """Sample around ``base`` so two independent samples sit ``pair_distance`` apart on average."""
    if pair_distance <= 0:
        return base.copy()
    s = 1.0 - math.sqrt(max(1.0 - pair_distance, 0.0))  # distance of each sample to base
    nu = math.sqrt(1.0 / (1.0 - s) ** 2 - 1.0) if s < 1 else 1e6
    n = rng.standard_normal(base.shape)
    n -= (n @ base) * base
    n /= np.linalg.norm(n)
    e = base + nu * n
    return e / np.linalg.norm(e)


# ---------------------------------------------------------------------------
# generation


@dataclass
class SceneSummary:
    out_dir: Path
    frames: int
    cameras: int
    detections: int
    gt_rows: int
    warnings: List[str]


def _keypoints(box: Box3D, calib: CameraCalibration, depth: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    fwd, left = np.array([c, s]), np.array([-s, c])
    kps = np.zeros((len(_KEYPOINT_LAYOUT), 3))
    for i, (lat, hf) in enumerate(_KEYPOINT_LAYOUT):
        xy = np.array([box.x, box.y]) + fwd * box.length / 2 + left * lat * box.width / 2
        p = np.array([xy[0], xy[1], hf * box.height])
        pc = world_to_camera(p, calib)
        if pc[2] <= 1e-3:
            kps[i] = (0.0, 0.0, _KP_HIDDEN)
            continue
        u = calib.fu * pc[0] / pc[2] + calib.cu
        v = calib.fv * pc[1] / pc[2] + calib.cv
        col, row = int(math.floor(u)), int(math.floor(v))
        visible = 0 <= col < calib.image_width and 0 <= row < calib.image_height
        if visible:
            z = depth[row, col]
            visible = z == 0 or z >= pc[2] - 0.05
        kps[i] = (u, v, _KP_VISIBLE if visible else _KP_HIDDEN)
    return kps


def load_identities(scene_dir) -> Dict[Tuple[int, int, int], int]:
    """``(frame, camera_id, det_index) -> target id`` as written by :func:`generate`."""
    table = {}
    with (Path(scene_dir) / IDENTITY_FILE).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                table[(r["frame"], r["camera_id"], r["det_index"])] = r["target"]
    return table


def class_stats_for(cfg: ScenarioConfig) -> ClassStats:
    classes = {}
    for c in cfg.classes:
        cut = cfg.cut_pedestrian if c.class_id == cfg.pedestrian_class else cfg.cut_other
        classes[c.class_id] = ClassInfo(c.class_id, c.length, c.width, c.height, c.length * c.width * c.height,
                                        default_epsilon(c.length, c.width, c.height), cfg.spatial_gate, cut, c.name)
    return ClassStats(classes)


def generate(cfg: ScenarioConfig, out_dir) -> SceneSummary:
    """Render the scenario into ``out_dir`` using the on-disk formats of :mod:`mtmc3d.ingest`."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = make_cameras(cfg)
    write_calibrations(cams, out / "calibration.json")
    write_class_stats(class_stats_for(cfg), out / "class_stats.json")
    cfg.save(out / "scenario.json")

    bases = identity_embeddings(cfg)
    occluded = {(o.target, f) for o in cfg.occlusions for f in range(o.start, o.end)}
    boxes_per_frame = [[target_box(cfg, k, f) for k in range(len(cfg.targets))] for f in range(cfg.frames)]
    visible_anywhere = [set() for _ in range(cfg.frames)]
    detections: List[Detection2D] = []
    masks: List[InstanceMask] = []
    identities: List[Tuple[int, int, int, int]] = []
    warnings: List[str] = []

    for calib in cams:
        rays = _CameraRays(calib)
        local_ids: Dict[int, Tuple[int, int]] = {}  # target -> (local id, last frame seen)
        next_local = 1
        seen_any = False
        for f in range(cfg.frames):
            rng = np.random.default_rng([cfg.seed, calib.camera_id, f])
            boxes = boxes_per_frame[f]
            depth, owner = render(rays, boxes)
            write_depth(depth_path(out, calib.camera_id, f), depth)
            frame_dets = []
            for k, box in enumerate(boxes):
                if box is None:
                    continue
                sil = owner == k
                npx = int(sil.sum())
                if npx < cfg.min_visible_pixels:
                    continue
                visible_anywhere[f].add(k)
                seen_any = True
                if (k, f) in occluded or rng.random() < cfg.miss_rate:
                    continue
                rows, cols = np.nonzero(sil)
                bb = np.array([cols.min(), rows.min(), cols.max() + 1, rows.max() + 1], dtype=float)
                if cfg.box_jitter_px > 0:
                    bb = bb + rng.normal(0.0, cfg.box_jitter_px, size=4)
                bb[[0, 2]] = np.clip(bb[[0, 2]], 0, calib.image_width)
                bb[[1, 3]] = np.clip(bb[[1, 3]], 0, calib.image_height)
                if bb[2] - bb[0] < 1 or bb[3] - bb[1] < 1:
                    continue
                x1, y1, x2, y2 = bb
                # the segmenter only sees the box prompt (plus a small margin)
                r_lo, r_hi = max(int(math.ceil(y1 - 2)), 0), int(math.floor(y2 + 2))
                c_lo, c_hi = max(int(math.ceil(x1 - 2)), 0), int(math.floor(x2 + 2))
                mask = np.zeros_like(sil)
                mask[r_lo:r_hi, c_lo:c_hi] = sil[r_lo:r_hi, c_lo:c_hi]
                if not mask.any():
                    continue
                lid_prev = local_ids.get(k)
                if lid_prev is None or f - lid_prev[1] > _SCT_MAX_GAP:
                    lid = next_local
                    next_local += 1
                else:
                    lid = lid_prev[0]
                local_ids[k] = (lid, f)
                kps = None
                if box.class_id == cfg.pedestrian_class:
                    kps = _keypoints(box, calib, depth)
                    if cfg.box_jitter_px > 0:
                        kps[:, :2] += rng.normal(0.0, cfg.box_jitter_px, size=(len(kps), 2))
                lo, hi = cfg.score_range
                score = float(lo if hi == lo else rng.uniform(lo, hi))
                emb = noisy_embedding(bases[k], cfg.embedding_intra_distance, rng)
                frame_dets.append((k, Detection2D(calib.camera_id, f, tuple(bb), score, box.class_id, emb, kps, lid), mask))
            # injected id switches: two targets on this camera trade local ids from now on
            if cfg.id_switch_rate > 0 and len(frame_dets) >= 2 and rng.random() < cfg.id_switch_rate:
                i, j = rng.choice(len(frame_dets), size=2, replace=False)
                ki, kj = frame_dets[i][0], frame_dets[j][0]
                li, lj = local_ids[ki][0], local_ids[kj][0]
                local_ids[ki], local_ids[kj] = (lj, f), (li, f)
                frame_dets[i][1].local_track_id, frame_dets[j][1].local_track_id = lj, li
            for idx, (k, det, mask) in enumerate(frame_dets):
                det.det_index = idx
                detections.append(det)
                masks.append(InstanceMask.from_array(mask, calib.camera_id, f, idx))
                identities.append((f, calib.camera_id, idx, k + 1))
        if not seen_any:
            msg = f"camera {calib.camera_id} never sees a target"
            logger.warning(msg)
            warnings.append(msg)

    write_detections(detections, out / "detections.jsonl")
    write_masks(masks, out / "masks.jsonl")
    # which target produced each detection; only the tests and diagnostics read this
    with (out / IDENTITY_FILE).open("w", encoding="utf-8") as fh:
        for f, cam, idx, target in sorted(identities):
            fh.write(json.dumps({"frame": f, "camera_id": cam, "det_index": idx, "target": target}) + "\n")
    gt_rows = [(f, boxes_per_frame[f][k]) for f in range(cfg.frames) for k in sorted(visible_anywhere[f])]
    write_results(gt_rows, out / "gt.txt")
    return SceneSummary(out, cfg.frames, len(cams), len(detections), len(gt_rows), warnings)
