"""Masked depth pixels -> world point cloud -> DBSCAN -> 3D box."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .boxes import Box3D
from .geometry import CameraCalibration, backproject_pixels, camera_to_world
from .ingest import ClassStats

logger = logging.getLogger(__name__)

__all__ = ["Box3D", "TargetCloud", "LiftInput", "lift_target", "dbscan", "fit_box", "fallback_box",
           "ALPHA_LOWER", "ALPHA_UPPER", "MIN_SAMPLES"]

ALPHA_LOWER = 0.7
ALPHA_UPPER = 1.5
MIN_SAMPLES = 50


@dataclass
class TargetCloud:
    points: np.ndarray  # (N, 3) world frame
    cameras: np.ndarray  # (N,) source camera per point
    score: float
    class_id: int
    global_id: int

    @property
    def empty(self) -> bool:
        return self.points.shape[0] == 0


@dataclass
class LiftInput:
    """One camera's view of a target: its mask, the camera's depth map, the calibration."""
    calib: CameraCalibration
    mask: np.ndarray
    depth: np.ndarray
    score: float


def lift_target(views: Sequence[LiftInput], class_id: int, global_id: int, stride: int = 1) -> TargetCloud:
    """Back-project every masked pixel with a depth sample and move it to world coordinates.

    Pixels whose depth is the sentinel 0 are skipped. ``stride > 1`` keeps every
    ``stride``-th row and column only.
    """
    pts, cams = [], []
    for view in views:
        mask = np.asarray(view.mask, dtype=bool)
        depth = np.asarray(view.depth)
        if mask.shape != depth.shape:
            raise ValueError(f"mask {mask.shape} and depth {depth.shape} disagree")
        rows, cols = np.nonzero(mask)
        if stride > 1:
            keep = (rows % stride == 0) & (cols % stride == 0)
            rows, cols = rows[keep], cols[keep]
        z = depth[rows, cols].astype(np.float64)
        keep = z > 0
        rows, cols, z = rows[keep], cols[keep], z[keep]
        if rows.size == 0:
            continue
        pc = backproject_pixels(cols + 0.5, rows + 0.5, z, view.calib)
        pts.append(camera_to_world(pc, view.calib))
        cams.append(np.full(rows.size, view.calib.camera_id))
    score = float(np.mean([v.score for v in views])) if views else 0.0
    if not pts:
        return TargetCloud(np.zeros((0, 3)), np.zeros(0, dtype=int), score, class_id, global_id)
    return TargetCloud(np.vstack(pts), np.concatenate(cams), score, class_id, global_id)


def dbscan(points: np.ndarray, epsilon: float, min_samples: int) -> np.ndarray:
    """DBSCAN labels (noise = -1).

    A point is core when at least ``min_samples`` points, itself included, lie
    within ``epsilon``. Clusters are numbered in order of their lowest-index
    core point; a border point joins the lowest-numbered cluster among its
    core neighbours.
    """
    if epsilon <= 0 or min_samples < 1:
        raise ValueError("epsilon must be > 0 and min_samples >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(pts).query_pairs(epsilon, output_type="ndarray")
    counts = 1 + np.bincount(pairs[:, 0], minlength=n) + np.bincount(pairs[:, 1], minlength=n)
    core = counts >= min_samples
    if not core.any():
        return labels
    core_idx = np.flatnonzero(core)
    pos = np.full(n, -1)
    pos[core_idx] = np.arange(core_idx.size)
    if pairs.size:
        cc = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    else:
        cc = np.zeros((0, 2), dtype=np.int64)
    # build the core adjacency in CSR form directly; going through COO costs a full sort
    m = core_idx.size
    src, dst = pos[cc[:, 0]], pos[cc[:, 1]]
    # a stable sort of small integers is a radix sort in numpy
    order = np.argsort(src.astype(np.uint16) if m <= np.iinfo(np.uint16).max else src, kind="stable")
    indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=m))])
    graph = csr_matrix((np.ones(len(cc)), dst[order], indptr), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    # renumber components by their lowest core index (core_idx is ascending)
    _, first = np.unique(comp, return_index=True)
    core_labels = np.argsort(np.argsort(first))[comp].astype(np.int64)
    labels[core_idx] = core_labels
    if pairs.size:
        # border points: non-core with a core neighbour
        border_best = np.full(n, np.iinfo(np.int64).max)
        for a, b in ((0, 1), (1, 0)):
            sel = core[pairs[:, a]] & ~core[pairs[:, b]]
            if sel.any():
                np.minimum.at(border_best, pairs[sel, b], labels[pairs[sel, a]])
        has = border_best != np.iinfo(np.int64).max
        labels[has] = border_best[has]
    return labels


def fallback_box(topdown: Sequence[float], class_id: int, stats: ClassStats, score: float,
                 global_id: int, yaw: float = 0.0) -> Box3D:
    """Class-mean box standing on the ground at a top-down location."""
    info = stats[class_id]
    return Box3D(float(topdown[0]), float(topdown[1]), info.height / 2.0, info.length, info.width, info.height,
                 yaw, score, class_id, global_id)


def fit_box(cloud: TargetCloud, labels: Optional[np.ndarray], stats: ClassStats,
            fallback_topdown: Optional[Sequence[float]] = None,
            alpha_lower: float = ALPHA_LOWER, alpha_upper: float = ALPHA_UPPER,
            yaw: float = 0.0) -> Tuple[Box3D, str]:
    """Fit a box to the largest DBSCAN cluster.

    Length and width are 5-95 percentile spreads along the box axes, which for
    the default ``yaw=0`` are the world x and y axes. Passing the track's
    current heading measures them along and across that heading instead; the
    centre (a plain mean) does not depend on it.

    Returns the box and how it was obtained: ``"fit"``, ``"class-mean"``
    (fitted volume outside the sanity band) or ``"fallback"`` (no usable
    cluster; class-mean box at ``fallback_topdown``).
    """
    info = stats[cloud.class_id]
    if labels is None or cloud.empty or not np.any(labels >= 0):
        if fallback_topdown is None:
            raise ValueError("empty cloud and no fallback location")
        return fallback_box(fallback_topdown, cloud.class_id, stats, cloud.score, cloud.global_id), "fallback"
    valid = labels[labels >= 0]
    sizes = np.bincount(valid)
    best = int(np.argmax(sizes))  # argmax keeps the lowest label on ties
    pts = cloud.points[labels == best]
    cx, cy = float(pts[:, 0].mean()), float(pts[:, 1].mean())
    if yaw == 0.0:
        u, v = pts[:, 0], pts[:, 1]
    else:
        c, s = np.cos(yaw), np.sin(yaw)
        u = c * pts[:, 0] + s * pts[:, 1]
        v = -s * pts[:, 0] + c * pts[:, 1]
    p5x, p95x = np.percentile(u, [5, 95])
    p5y, p95y = np.percentile(v, [5, 95])
    length, width = float(p95x - p5x), float(p95y - p5y)
    height = float(pts[:, 2].max())
    how = "fit"
    volume = length * width * height
    if not (length > 0 and width > 0 and height > 0) or volume < alpha_lower * info.volume or volume > alpha_upper * info.volume:
        length, width, height = info.length, info.width, info.height
        how = "class-mean"
    box = Box3D(cx, cy, height / 2.0, length, width, height, yaw, cloud.score, cloud.class_id, cloud.global_id)
    return box, how
