"""Oriented 3D box shared by lifting, fusion, evaluation and I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

# Written yaw values carry 6 decimals, so pi itself may come back as 3.141593.
_YAW_SLACK = 1e-6


def wrap_angle(theta: float) -> float:
    """Map an angle into ``(-pi, pi]``."""
    theta = math.remainder(theta, 2.0 * math.pi)
    if theta <= -math.pi:
        theta += 2.0 * math.pi
    return theta


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    length: float
    width: float
    height: float
    yaw: float = 0.0
    score: float = 1.0
    class_id: int = 0
    global_id: int = -1

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.length, self.width, self.height, self.yaw, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"non-finite value in box {self}")
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValidationError(f"box dimensions must be positive: {self}")
        if not (-math.pi - _YAW_SLACK < self.yaw <= math.pi + _YAW_SLACK):
            raise ValidationError(f"yaw out of range: {self.yaw}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    def with_(self, **changes) -> "Box3D":
        return replace(self, **changes)

    def footprint(self) -> np.ndarray:
        """Ground-plane corners of the yaw-rotated footprint, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])

    def corners(self) -> np.ndarray:
        """All eight corners in world coordinates, ``(8, 3)``."""
        fp = self.footprint()
        z0, z1 = self.z - self.height / 2.0, self.z + self.height / 2.0
        return np.vstack([np.column_stack([fp, np.full(4, z0)]), np.column_stack([fp, np.full(4, z1)])])
