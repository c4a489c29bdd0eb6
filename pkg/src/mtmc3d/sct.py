"""Per-camera multi-object tracker and foot-point selection.

The tracker is a compact constant-velocity Kalman filter over
``(u, v, w, h)`` box centres and sizes with appearance-aware Hungarian
assignment. It stands in for a full Deep OC-SORT implementation; when the
detections already carry local track ids, bypass mode passes them through.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .ingest import Detection2D

# CrowdPose keypoint layout
LEFT_ANKLE, RIGHT_ANKLE = 10, 11

_INADMISSIBLE = 1e6


@dataclass
class SCTConfig:
    iou_weight: float = 0.7  # lambda
    iou_min: float = 0.1
    app_max: float = 0.4
    ema_alpha: float = 0.9
    max_age: int = 30
    std_position: float = 1.0 / 20.0
    std_velocity: float = 1.0 / 160.0
    bypass: bool = False


def select_foot_point(det: Detection2D, pedestrian_class: int = 0, kp_conf: float = 0.5,
                      ankles: Tuple[int, int] = (LEFT_ANKLE, RIGHT_ANKLE)) -> Tuple[float, float]:
    """Ground-contact pixel: ankle midpoint for pedestrians with both ankles
    confidently visible, bottom-middle of the box otherwise."""
    kps = det.keypoints
    if det.class_id == pedestrian_class and kps is not None:
        a, b = kps[ankles[0]], kps[ankles[1]]
        if a[2] >= kp_conf and b[2] >= kp_conf:
            return (float(a[0] + b[0]) / 2.0, float(a[1] + b[1]) / 2.0)
    x1, _, x2, y2 = det.box
    return ((x1 + x2) / 2.0, y2)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _xyxy_to_state(box: Sequence[float]) -> np.ndarray:
    x1, y1, x2, y2 = box
    return np.array([(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1])


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)


@dataclass
class LocalTrack:
    camera_id: int
    local_id: int
    mean: np.ndarray
    cov: np.ndarray
    appearance: np.ndarray
    age: int = 1
    hits: int = 1
    misses: int = 0
    last_foot_point: Optional[Tuple[float, float]] = None

    def box(self) -> np.ndarray:
        u, v, w, h = self.mean[:4]
        w, h = max(w, 1.0), max(h, 1.0)
        return np.array([u - w / 2, v - h / 2, u + w / 2, v + h / 2])


@dataclass
class SingleCameraTracker:
    camera_id: int
    config: SCTConfig = field(default_factory=SCTConfig)
    pedestrian_class: int = 0
    tracks: List[LocalTrack] = field(default_factory=list)
    next_id: int = 1

    def _noise(self, h: float):
        c = self.config
        pos = (c.std_position * h) ** 2
        vel = (c.std_velocity * h) ** 2
        Q = np.diag([pos, pos, pos, pos, vel, vel, vel, vel])
        R = np.diag([pos, pos, pos, pos])
        return Q, R

    def _spawn(self, det: Detection2D) -> LocalTrack:
        z = _xyxy_to_state(det.box)
        h = z[3]
        p, v = (2 * self.config.std_position * h) ** 2, (10 * self.config.std_velocity * h) ** 2
        track = LocalTrack(
            camera_id=self.camera_id,
            local_id=self.next_id,
            mean=np.concatenate([z, np.zeros(4)]),
            cov=np.diag([p, p, p, p, v, v, v, v]),
            appearance=_normalize(det.embedding.copy()),
        )
        self.next_id += 1
        return track

    def _predict(self, t: LocalTrack) -> None:
        Q, _ = self._noise(max(t.mean[3], 1.0))
        t.mean = _F @ t.mean
        t.cov = _F @ t.cov @ _F.T + Q
        t.age += 1

    def _update(self, t: LocalTrack, det: Detection2D) -> None:
        z = _xyxy_to_state(det.box)
        _, R = self._noise(max(z[3], 1.0))
        S = _H @ t.cov @ _H.T + R
        K = np.linalg.solve(S, _H @ t.cov).T
        t.mean = t.mean + K @ (z - _H @ t.mean)
        t.cov = (np.eye(8) - K @ _H) @ t.cov
        a = self.config.ema_alpha
        t.appearance = _normalize(a * t.appearance + (1 - a) * det.embedding)
        t.hits += 1
        t.misses = 0

    def step(self, detections: Sequence[Detection2D]) -> List[Tuple[Detection2D, int]]:
        """Assign a local id to every detection of one frame, in input order."""
        seen = set()
        for det in detections:
            key = (det.frame, det.det_index)
            if id(det) in seen or key in seen:
                raise ValidationError(f"camera {self.camera_id}: duplicate detection {key}")
            seen.add(id(det))
            seen.add(key)
            if det.camera_id != self.camera_id:
                raise ValidationError(f"detection from camera {det.camera_id} fed to tracker {self.camera_id}")
        if len({d.frame for d in detections}) > 1:
            raise ValidationError("detections span several frames")

        if self.config.bypass:
            out = []
            for det in detections:
                if det.local_track_id is None:
                    raise ValidationError("bypass mode needs local_track_id on every detection")
                out.append((det, int(det.local_track_id)))
            return out

        for t in self.tracks:
            self._predict(t)

        n_t, n_d = len(self.tracks), len(detections)
        assigned: List[Optional[int]] = [None] * n_d
        matched_tracks = set()
        if n_t and n_d:
            c = self.config
            pred = np.array([t.box() for t in self.tracks])
            boxes = np.array([d.box for d in detections])
            iou = iou_matrix(pred, boxes)
            apps = np.array([t.appearance for t in self.tracks])
            embs = np.array([d.embedding for d in detections])
            cos = 1.0 - apps @ embs.T
            cost = c.iou_weight * (1.0 - iou) + (1.0 - c.iou_weight) * cos
            reject = (iou < c.iou_min) & (cos > c.app_max)
            cost = np.where(reject, _INADMISSIBLE, cost)
            rows, cols = linear_sum_assignment(cost)
            for r, col in zip(rows, cols):
                if reject[r, col]:
                    continue
                self._update(self.tracks[r], detections[col])
                assigned[col] = self.tracks[r].local_id
                matched_tracks.add(r)

        for i, t in enumerate(self.tracks):
            if i not in matched_tracks:
                t.misses += 1
        self.tracks = [t for t in self.tracks if t.misses <= self.config.max_age]

        for j, det in enumerate(detections):
            if assigned[j] is None:
                track = self._spawn(det)
                self.tracks.append(track)
                assigned[j] = track.local_id

        by_id = {t.local_id: t for t in self.tracks}
        out = []
        for det, lid in zip(detections, assigned):
            by_id[lid].last_foot_point = select_foot_point(det, self.pedestrian_class)
            out.append((det, lid))
        return out
