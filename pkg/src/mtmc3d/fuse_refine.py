"""Duplicate-box fusion and trajectory-based yaw."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Sequence, Tuple

import numpy as np

from .boxes import Box3D

FUSION_THRESHOLD = 0.1
YAW_PERIOD = 10
YAW_MIN_DISPLACEMENT = 0.15  # metres


def _extent(box: Box3D) -> Tuple[np.ndarray, np.ndarray]:
    half = box.dims / 2.0
    c = box.center
    return c - half, c + half


def ioa3d(a: Box3D, b: Box3D) -> float:
    """Axis-aligned intersection volume over the smaller of the two volumes."""
    lo_a, hi_a = _extent(a)
    lo_b, hi_b = _extent(b)
    overlap = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)
    inter = float(np.prod(overlap))
    return min(inter / min(a.volume, b.volume), 1.0)


def fuse(boxes: Sequence[Box3D], thr: float = FUSION_THRESHOLD) -> Tuple[List[Box3D], List[List[int]]]:
    """Greedy volume-ordered fusion of overlapping boxes.

    Boxes are visited largest first (ties: lower global id first). Each
    unused box seeds a group and absorbs every later unused box whose IoA
    with the seed exceeds ``thr``. A group becomes one box whose centre and
    dimensions are volume-weighted means; it keeps the smallest global id and
    that box's score and class.

    Returns the fused boxes and, for each, the global ids of its group.
    """
    order = sorted(boxes, key=lambda b: (-b.volume, b.global_id))
    used = [False] * len(order)
    fused: List[Box3D] = []
    groups: List[List[int]] = []
    for i, seed in enumerate(order):
        if used[i]:
            continue
        used[i] = True
        group = [seed]
        for j in range(i + 1, len(order)):
            if not used[j] and ioa3d(seed, order[j]) > thr:
                group.append(order[j])
                used[j] = True
        # plain left-to-right sums: numpy's pairwise summation would make the
        # result depend on the group size in the last bits
        total = 0.0
        acc = [0.0] * 6
        for b in group:
            v = b.volume
            total += v
            for k, val in enumerate((b.x, b.y, b.z, b.length, b.width, b.height)):
                acc[k] += v * val
        c = [a / total for a in acc]
        keeper = min(group, key=lambda b: b.global_id)
        fused.append(Box3D(c[0], c[1], c[2], c[3], c[4], c[5], keeper.yaw, keeper.score, keeper.class_id,
                           keeper.global_id))
        groups.append([b.global_id for b in group])
    return fused, groups


@dataclass
class TrackHistory:
    """Recent ground positions and current yaw per global id."""

    maxlen: int = YAW_PERIOD + 1
    positions: Dict[int, Deque[Tuple[int, float, float]]] = field(default_factory=dict)
    yaw: Dict[int, float] = field(default_factory=dict)

    def record(self, global_id: int, frame: int, x: float, y: float) -> None:
        buf = self.positions.setdefault(global_id, deque(maxlen=self.maxlen))
        if buf and frame <= buf[-1][0]:
            raise ValueError(f"track {global_id}: frame {frame} is not after {buf[-1][0]}")
        buf.append((frame, float(x), float(y)))
        self.yaw.setdefault(global_id, 0.0)

    def sample(self, global_id: int, frame: int):
        for f, x, y in self.positions.get(global_id, ()):
            if f == frame:
                return x, y
        return None


def refine_yaw(history: TrackHistory, global_id: int, frame: int, period: int = YAW_PERIOD,
               min_displacement: float = YAW_MIN_DISPLACEMENT) -> float:
    """Heading from the displacement over the last ``period`` frames.

    Updates only on frames that are multiples of ``period``, when a sample
    from ``period`` frames earlier exists and the move exceeds
    ``min_displacement``; otherwise the previous yaw is kept.
    """
    theta = history.yaw.get(global_id, 0.0)
    if frame % period != 0:
        return theta
    now = history.sample(global_id, frame)
    before = history.sample(global_id, frame - period)
    if now is None or before is None:
        return theta
    dx, dy = now[0] - before[0], now[1] - before[1]
    if math.hypot(dx, dy) > min_displacement:
        theta = math.atan2(dy, dx)
        if theta <= -math.pi:
            theta += 2 * math.pi
        history.yaw[global_id] = theta
    return theta
