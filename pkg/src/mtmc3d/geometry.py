"""Camera coordinate algebra.

Conventions used throughout the package:

* Extrinsics map world to camera: ``X_c = R @ X_w + t``.
* Depth is planar, i.e. the camera-frame Z coordinate, not the ray length.
* Pixel ``(col, row)`` has its centre at ``(u, v) = (col + 0.5, row + 0.5)``;
  the image spans ``[0, width] x [0, height]``.
* The homography ``H`` maps image pixels to the top-down map, whose units are
  world metres on the ``z = 0`` ground plane.
* No lens distortion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, PointAtInfinityError, ValidationError

_ORTHO_TOL = 1e-9
_HOMOGRAPHY_EPS = 1e-12


@dataclass(frozen=True)
class CameraCalibration:
    camera_id: int
    fu: float
    fv: float
    cu: float
    cv: float
    R: np.ndarray
    t: np.ndarray
    H: np.ndarray
    image_width: int
    image_height: int
    # derived, filled in __post_init__
    H_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        H = np.asarray(self.H, dtype=np.float64).reshape(3, 3)
        for name, arr in (("R", R), ("t", t), ("H", H)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"camera {self.camera_id}: non-finite {name}")
        if not (self.fu > 0 and self.fv > 0):
            raise ValidationError(f"camera {self.camera_id}: focal lengths must be positive")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValidationError(f"camera {self.camera_id}: R is not a proper rotation")
        if abs(np.linalg.det(H)) <= _HOMOGRAPHY_EPS:
            raise ValidationError(f"camera {self.camera_id}: homography is singular")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValidationError(f"camera {self.camera_id}: bad image size")
        for name, arr in (("R", R), ("t", t), ("H", H)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        H_inv = np.linalg.inv(H)
        H_inv.setflags(write=False)
        object.__setattr__(self, "H_inv", H_inv)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu], [0.0, self.fv, self.cv], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {
            "camera_id": int(self.camera_id),
            "fu": float(self.fu),
            "fv": float(self.fv),
            "cu": float(self.cu),
            "cv": float(self.cv),
            "R": [float(x) for x in self.R.ravel()],
            "t": [float(x) for x in self.t],
            "H": [float(x) for x in self.H.ravel()],
            "width": int(self.image_width),
            "height": int(self.image_height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraCalibration":
        try:
            return cls(
                camera_id=int(d["camera_id"]),
                fu=float(d["fu"]),
                fv=float(d["fv"]),
                cu=float(d["cu"]),
                cv=float(d["cv"]),
                R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                t=np.array(d["t"], dtype=np.float64).reshape(3),
                H=np.array(d["H"], dtype=np.float64).reshape(3, 3),
                image_width=int(d["width"]),
                image_height=int(d["height"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed calibration record: {exc}") from exc


def backproject_pixel(u: float, v: float, z: float, calib: CameraCalibration) -> np.ndarray:
    """Lift pixel ``(u, v)`` with planar depth ``z`` into the camera frame."""
    if not (z > 0) or not np.isfinite(z):
        raise InvalidDepthError(f"depth must be positive and finite, got {z}")
    return np.array([(u - calib.cu) * z / calib.fu, (v - calib.cv) * z / calib.fv, z], dtype=np.float64)


def backproject_pixels(u: np.ndarray, v: np.ndarray, z: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    """Vectorised :func:`backproject_pixel`; returns an ``(N, 3)`` array."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)) or not np.all(np.isfinite(z)):
        raise InvalidDepthError("depth must be positive and finite")
    return np.stack([(u - calib.cu) * z / calib.fu, (v - calib.cv) * z / calib.fv, z], axis=-1)


def camera_to_world(p: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    """Apply the inverse extrinsics ``[R^T | -R^T t]``. Accepts ``(3,)`` or ``(N, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    return (p - calib.t) @ calib.R


def world_to_camera(p: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ calib.R.T + calib.t


def project_camera_to_pixel(p: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    """Pinhole projection of camera-frame point(s); returns ``(u, v)`` or ``(N, 2)``."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError("point at or behind the camera plane")
    return np.stack([calib.fu * p[..., 0] / z + calib.cu, calib.fv * p[..., 1] / z + calib.cv], axis=-1)


def project_world_to_pixel(p: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    return project_camera_to_pixel(world_to_camera(p, calib), calib)


def _apply_homography(H: np.ndarray, u, v) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = H[0, 0] * u + H[0, 1] * v + H[0, 2]
    y = H[1, 0] * u + H[1, 1] * v + H[1, 2]
    w = H[2, 0] * u + H[2, 1] * v + H[2, 2]
    if np.any(np.abs(w) < _HOMOGRAPHY_EPS):
        raise PointAtInfinityError("homography maps the point to infinity")
    return np.stack([x / w, y / w], axis=-1)


def homography_project(u, v, H: np.ndarray) -> np.ndarray:
    """Map image point(s) to the top-down map through ``H``."""
    H = np.asarray(H, dtype=np.float64)
    if abs(np.linalg.det(H)) <= _HOMOGRAPHY_EPS:
        raise ValidationError("homography is singular")
    return _apply_homography(H, u, v)


def ground_homography(K: np.ndarray, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Image -> ground-plane (z = 0) homography for a world->camera pose.

    A ground point ``(x, y, 0)`` images as ``K [r1 r2 t] (x, y, 1)^T``; the
    inverse of that matrix goes the other way.
    """
    G = K @ np.column_stack([R[:, 0], R[:, 1], t])
    H = np.linalg.inv(G)
    return H / H[2, 2] if abs(H[2, 2]) > _HOMOGRAPHY_EPS else H


def look_at_rotation(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """World->camera ``(R, t)`` for a camera at ``eye`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValidationError("look-at direction parallel to up vector")
    right /= norm
    down = np.cross(forward, right)
    R = np.vstack([right, down, forward])
    # re-orthonormalise to keep the 1e-9 invariant comfortably
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    t = -R @ eye
    return R, t
