"""On-disk formats: detections, depth maps, masks, class statistics,
calibration and result files.

Every reader rejects NaN/Inf. Reals in JSON-lines files are written with 9
significant digits so ``write(load(file))`` reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .boxes import Box3D
from .errors import DataError, ValidationError
from .geometry import CameraCalibration

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NUM_KEYPOINTS = 14
_NORM_TOL = 1e-6
_NORM_REJECT = 1e-3
DEPTH_MAGIC = b"DPTH"
_DEPTH_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def _check_finite(values, what: str, where: str) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{where}: non-finite value in {what}")


# ---------------------------------------------------------------------------
# detections


@dataclass
class Detection2D:
    camera_id: int
    frame: int
    box: Tuple[float, float, float, float]
    score: float
    class_id: int
    embedding: np.ndarray
    keypoints: Optional[np.ndarray] = None  # (14, 3): u, v, confidence
    local_track_id: Optional[int] = None
    det_index: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = (float(b) for b in self.box)
        self.box = (x1, y1, x2, y2)
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(NUM_KEYPOINTS, 3)

    def validate(self, where: str = "detection") -> None:
        x1, y1, x2, y2 = self.box
        _check_finite(self.box, "box", where)
        if not (x1 < x2 and y1 < y2):
            raise ValidationError(f"{where}: degenerate box {self.box}")
        if not (0.0 <= self.score <= 1.0) or not math.isfinite(self.score):
            raise ValidationError(f"{where}: score {self.score} outside [0, 1]")
        if self.frame < 0 or self.class_id < 0:
            raise ValidationError(f"{where}: negative frame or class id")
        _check_finite(self.embedding, "embedding", where)
        dev = abs(float(np.linalg.norm(self.embedding)) - 1.0)
        if dev >= _NORM_REJECT:
            raise ValidationError(f"{where}: embedding norm deviates from 1 by {dev:.3g}")
        if dev > _NORM_TOL:
            self.embedding = self.embedding / np.linalg.norm(self.embedding)
        if self.keypoints is not None:
            _check_finite(self.keypoints, "keypoints", where)

    def clamp_to_image(self, width: int, height: int) -> None:
        x1, y1, x2, y2 = self.box
        box = (min(max(x1, 0.0), width), min(max(y1, 0.0), height), min(max(x2, 0.0), width), min(max(y2, 0.0), height))
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValidationError(f"detection {self.frame}/{self.camera_id}/{self.det_index} lies outside the image")
        self.box = box

    def to_json_line(self) -> str:
        parts = [
            f'"frame": {int(self.frame)}',
            f'"camera_id": {int(self.camera_id)}',
            f'"det_index": {int(self.det_index)}',
            '"box": [' + ", ".join(_fmt(b) for b in self.box) + "]",
            f'"score": {_fmt(self.score)}',
            f'"class_id": {int(self.class_id)}',
            '"embedding": [' + ", ".join(_fmt(e) for e in self.embedding) + "]",
        ]
        if self.keypoints is None:
            parts.append('"keypoints": null')
        else:
            kps = ", ".join("[" + ", ".join(_fmt(c) for c in kp) + "]" for kp in self.keypoints)
            parts.append('"keypoints": [' + kps + "]")
        lid = "null" if self.local_track_id is None else str(int(self.local_track_id))
        parts.append(f'"local_track_id": {lid}')
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_record(cls, rec: dict, where: str = "detection") -> "Detection2D":
        try:
            kps = rec.get("keypoints")
            lid = rec.get("local_track_id")
            det = cls(
                camera_id=int(rec["camera_id"]),
                frame=int(rec["frame"]),
                box=tuple(rec["box"]),
                score=float(rec["score"]),
                class_id=int(rec["class_id"]),
                embedding=np.array(rec["embedding"], dtype=np.float64),
                keypoints=None if kps is None else np.array(kps, dtype=np.float64),
                local_track_id=None if lid is None else int(lid),
                det_index=int(rec.get("det_index", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{where}: malformed detection ({exc})") from exc
        if len(det.box) != 4:
            raise ValidationError(f"{where}: box needs 4 numbers")
        det.validate(where)
        return det


DetectionTable = Dict[int, Dict[int, List[Detection2D]]]


def _reject_constant(token: str):
    raise ValueError(f"non-finite literal {token}")


def iter_detections(path: PathLike, embedding_dim: Optional[int] = None) -> Iterator[Detection2D]:
    """Stream detections from a JSON-lines file, validating each line.

    Without ``embedding_dim`` the first record fixes the dimension for the rest.
    """
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise ValidationError(f"{where}: {exc}") from exc
            if not isinstance(rec, dict):
                raise ValidationError(f"{where}: expected a JSON object")
            det = Detection2D.from_record(rec, where)
            if embedding_dim is None:
                embedding_dim = det.embedding.size
            if det.embedding.shape != (embedding_dim,):
                raise ValidationError(f"{where}: embedding dimension {det.embedding.size} != {embedding_dim}")
            yield det


def group_detections(dets: Iterable[Detection2D]) -> DetectionTable:
    grouped: Dict[int, Dict[int, List[Detection2D]]] = defaultdict(lambda: defaultdict(list))
    for det in dets:
        grouped[det.frame][det.camera_id].append(det)
    table: DetectionTable = {}
    for frame in sorted(grouped):
        table[frame] = {cam: sorted(grouped[frame][cam], key=lambda d: d.det_index) for cam in sorted(grouped[frame])}
    return table


def load_detections(path: PathLike, embedding_dim: Optional[int] = None) -> DetectionTable:
    """Detections grouped as ``{frame: {camera_id: [Detection2D, ...]}}``, frames ascending."""
    return group_detections(iter_detections(path, embedding_dim))


def write_detections(dets: Iterable[Detection2D], path: PathLike) -> None:
    if isinstance(dets, dict):
        dets = [d for cams in dets.values() for ds in cams.values() for d in ds]
    ordered = sorted(dets, key=lambda d: (d.frame, d.camera_id, d.det_index))
    with Path(path).open("w", encoding="utf-8") as fh:
        for det in ordered:
            fh.write(det.to_json_line())
            fh.write("\n")


# ---------------------------------------------------------------------------
# depth maps


def depth_path(scene_dir: PathLike, camera_id: int, frame: int) -> Path:
    return Path(scene_dir) / "depth" / f"cam{camera_id:02d}" / f"{frame:06d}.dpth"


def write_depth(path: PathLike, depth: np.ndarray) -> None:
    """Write a ``(height, width)`` planar-depth map; 0 marks "no sample"."""
    depth = np.ascontiguousarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValidationError("depth map must be 2-D")
    _validate_depth(depth, str(path))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = depth.shape
    with path.open("wb") as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, w, h, 0))
        fh.write(depth.tobytes())


def read_depth(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if len(raw) < _DEPTH_HEADER.size:
        raise ValidationError(f"{path}: truncated depth header")
    magic, w, h, _ = _DEPTH_HEADER.unpack_from(raw)
    if magic != DEPTH_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if len(raw) != _DEPTH_HEADER.size + 4 * w * h:
        raise ValidationError(f"{path}: payload size does not match {w}x{h}")
    depth = np.frombuffer(raw, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w)
    _validate_depth(depth, str(path))
    return depth


def _validate_depth(depth: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(depth)):
        raise ValidationError(f"{where}: non-finite depth")
    if np.any(depth < 0):
        raise ValidationError(f"{where}: negative depth")


# ---------------------------------------------------------------------------
# masks (COCO-style uncompressed RLE, column-major, first run counts zeros)


def rle_encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 0) or counts.sum() != height * width:
        raise ValidationError(f"RLE counts do not cover a {height}x{width} grid")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


@dataclass
class InstanceMask:
    camera_id: int
    frame: int
    det_index: int
    height: int
    width: int
    counts: List[int] = field(repr=False)

    @classmethod
    def from_array(cls, mask: np.ndarray, camera_id: int, frame: int, det_index: int) -> "InstanceMask":
        h, w = mask.shape
        return cls(camera_id, frame, det_index, h, w, rle_encode(mask))

    def decode(self) -> np.ndarray:
        return rle_decode(self.counts, self.height, self.width)

    def to_json_line(self) -> str:
        return (
            f'{{"frame": {int(self.frame)}, "camera_id": {int(self.camera_id)}, "det_index": {int(self.det_index)}, '
            f'"size": [{int(self.height)}, {int(self.width)}], "counts": [' + ", ".join(str(int(c)) for c in self.counts) + "]}"
        )


def erode_mask(mask):
    """One pass of 3x3 binary erosion; pixels outside the image count as unset.

    Accepts a boolean array or an :class:`InstanceMask` and returns the same kind.
    """
    if isinstance(mask, InstanceMask):
        eroded = erode_mask(mask.decode())
        return InstanceMask.from_array(eroded, mask.camera_id, mask.frame, mask.det_index)
    full = np.asarray(mask, dtype=bool)
    out_full = np.zeros_like(full)
    rows, cols = np.flatnonzero(full.any(axis=1)), np.flatnonzero(full.any(axis=0))
    if rows.size == 0:
        return out_full
    # work on the mask's bounding window (plus one pixel) only
    r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, full.shape[0])
    c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, full.shape[1])
    m = full[r0:r1, c0:c1]
    out = out_full[r0:r1, c0:c1]
    if m.shape[0] < 3 or m.shape[1] < 3:
        return out_full
    core = m[1:-1, 1:-1].copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            core &= m[1 + dr : m.shape[0] - 1 + dr, 1 + dc : m.shape[1] - 1 + dc]
    out[1:-1, 1:-1] = core
    return out_full


MaskTable = Dict[Tuple[int, int, int], InstanceMask]


def load_masks(path: PathLike) -> MaskTable:
    """Masks keyed by ``(frame, camera_id, det_index)``; decoding is left to the caller."""
    path = Path(path)
    table: MaskTable = {}
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line, parse_constant=_reject_constant)
                h, w = (int(s) for s in rec["size"])
                m = InstanceMask(int(rec["camera_id"]), int(rec["frame"]), int(rec["det_index"]), h, w, [int(c) for c in rec["counts"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{where}: malformed mask ({exc})") from exc
            if sum(m.counts) != h * w or any(c < 0 for c in m.counts):
                raise ValidationError(f"{where}: RLE counts do not cover the grid")
            key = (m.frame, m.camera_id, m.det_index)
            if key in table:
                raise ValidationError(f"{where}: duplicate mask for {key}")
            table[key] = m
    return table


def write_masks(masks: Iterable[InstanceMask], path: PathLike) -> None:
    ordered = sorted(masks, key=lambda m: (m.frame, m.camera_id, m.det_index))
    with Path(path).open("w", encoding="utf-8") as fh:
        for m in ordered:
            fh.write(m.to_json_line())
            fh.write("\n")


def mask_within_box(mask: np.ndarray, box: Sequence[float], margin: float = 2.0) -> bool:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return True
    x1, y1, x2, y2 = box
    return bool(cols.min() >= x1 - margin - 1e-9 and cols.max() + 1 <= x2 + margin + 1e-9
                and rows.min() >= y1 - margin - 1e-9 and rows.max() + 1 <= y2 + margin + 1e-9)


# ---------------------------------------------------------------------------
# class statistics


def default_epsilon(length: float, width: float, height: float) -> float:
    """DBSCAN radius that shrinks as the class grows; smaller objects give sparser clouds."""
    diag = math.sqrt(length * length + width * width + height * height)
    return min(max(0.4 / diag, 0.05), 0.5)


@dataclass
class ClassInfo:
    class_id: int
    length: float
    width: float
    height: float
    volume: float
    epsilon: float
    spatial_gate: float
    cut: float
    name: str = ""

    @property
    def mean_dims(self) -> Tuple[float, float, float]:
        return (self.length, self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "length": self.length,
            "width": self.width,
            "height": self.height,
            "volume": self.volume,
            "epsilon": self.epsilon,
            "spatial_gate": self.spatial_gate,
            "cut": self.cut,
        }


@dataclass
class ClassStats:
    classes: Dict[int, ClassInfo]

    def __getitem__(self, class_id: int) -> ClassInfo:
        try:
            return self.classes[class_id]
        except KeyError:
            raise ValidationError(f"no class statistics for class {class_id}") from None

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.classes

    def to_dict(self) -> dict:
        return {"classes": {str(k): v.to_dict() for k, v in sorted(self.classes.items())}}


def class_stats_from_dict(data: dict, default_gate: float = 3.0, default_cuts: Optional[Dict[str, float]] = None,
                          pedestrian_class: int = 0) -> ClassStats:
    """Build :class:`ClassStats`; epsilon, gate and cut fall back to defaults when absent."""
    cuts = {"pedestrian": 0.35, "other": 1.5}
    cuts.update(default_cuts or {})
    classes = {}
    try:
        entries = data["classes"].items()
    except (KeyError, AttributeError, TypeError) as exc:
        raise ValidationError("class stats need a 'classes' mapping") from exc
    for key, rec in entries:
        try:
            cid = int(key)
            l, w, h = float(rec["length"]), float(rec["width"]), float(rec["height"])
            info = ClassInfo(
                class_id=cid,
                length=l,
                width=w,
                height=h,
                volume=float(rec.get("volume", l * w * h)),
                epsilon=float(rec.get("epsilon", default_epsilon(l, w, h))),
                spatial_gate=float(rec.get("spatial_gate", default_gate)),
                cut=float(rec.get("cut", cuts["pedestrian"] if cid == pedestrian_class else cuts["other"])),
                name=str(rec.get("name", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"class {key}: malformed statistics ({exc})") from exc
        nums = (info.length, info.width, info.height, info.volume, info.epsilon, info.spatial_gate, info.cut)
        if not all(math.isfinite(v) and v > 0 for v in nums):
            raise ValidationError(f"class {key}: statistics must be positive and finite")
        classes[cid] = info
    return ClassStats(classes)


def load_class_stats(path: PathLike, **kwargs) -> ClassStats:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"), parse_constant=_reject_constant)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    return class_stats_from_dict(data, **kwargs)


def write_class_stats(stats: ClassStats, path: PathLike) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# calibration


def load_calibrations(path: PathLike) -> Dict[int, CameraCalibration]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"), parse_constant=_reject_constant)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected an array of camera records")
    calibs = {}
    for rec in data:
        calib = CameraCalibration.from_dict(rec)
        if calib.camera_id in calibs:
            raise ValidationError(f"{path}: duplicate camera {calib.camera_id}")
        calibs[calib.camera_id] = calib
    return calibs


def write_calibrations(calibs: Iterable[CameraCalibration], path: PathLike) -> None:
    records = [c.to_dict() for c in sorted(calibs, key=lambda c: c.camera_id)]
    Path(path).write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# results: `frame class_id global_id x y z length width height yaw score`

ResultRow = Tuple[int, Box3D]


def format_result_line(frame: int, box: Box3D) -> str:
    return (f"{int(frame)} {int(box.class_id)} {int(box.global_id)} "
            f"{box.x:.6f} {box.y:.6f} {box.z:.6f} {box.length:.6f} {box.width:.6f} {box.height:.6f} "
            f"{box.yaw:.6f} {box.score:.6f}")


def quantize_box(box: Box3D) -> Box3D:
    """The box exactly as it reads back from a result file."""
    return Box3D(*(float(f"{v:.6f}") for v in (box.x, box.y, box.z, box.length, box.width, box.height, box.yaw, box.score)),
                 class_id=int(box.class_id), global_id=int(box.global_id))


class ResultWriter:
    """Append-only result writer flushed once per frame."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self._fh = self.path.open("w", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"{self.path}: {exc}") from exc

    def write_frame(self, frame: int, boxes: Iterable[Box3D]) -> None:
        for box in sorted(boxes, key=lambda b: b.global_id):
            self._fh.write(format_result_line(frame, box) + "\n")
        self._fh.flush()

    def write_lines(self, lines: Iterable[str]) -> None:
        for line in lines:
            self._fh.write(line + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_results(rows: Iterable[ResultRow], path: PathLike) -> None:
    ordered = sorted(rows, key=lambda r: (r[0], r[1].global_id))
    try:
        with Path(path).open("w", encoding="utf-8") as fh:
            for frame, box in ordered:
                fh.write(format_result_line(frame, box) + "\n")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_results(path: PathLike) -> List[ResultRow]:
    path = Path(path)
    rows: List[ResultRow] = []
    seen = set()
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            where = f"{path}:{lineno}"
            if len(parts) != 11:
                raise ValidationError(f"{where}: expected 11 columns, got {len(parts)}")
            try:
                frame, cls, gid = int(parts[0]), int(parts[1]), int(parts[2])
                vals = [float(p) for p in parts[3:]]
            except ValueError as exc:
                raise ValidationError(f"{where}: {exc}") from exc
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"{where}: non-finite value")
            if (frame, gid) in seen:
                raise ValidationError(f"{where}: duplicate (frame, id) = ({frame}, {gid})")
            seen.add((frame, gid))
            x, y, z, l, w, h, yaw, score = vals
            rows.append((frame, Box3D(x, y, z, l, w, h, yaw, score, cls, gid)))
    return rows


def format_result_2d_line(frame: int, camera_id: int, global_id: int, box: Sequence[float]) -> str:
    """2-D MTMC output: ``frame camera_id global_id x1 y1 x2 y2``."""
    x1, y1, x2, y2 = box
    return f"{int(frame)} {int(camera_id)} {int(global_id)} {x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}"
