"""Rotated 3D IoU and HOTA (DetA / AssA / LocA) with 3D IoU similarity."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import Box3D
from .errors import UndefinedScoreError, ValidationError

DEFAULT_ALPHAS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))

TrackSet = Dict[int, Dict[int, Box3D]]  # frame -> id -> box


def to_trackset(rows: Iterable[Tuple[int, Box3D]]) -> TrackSet:
    ts: TrackSet = defaultdict(dict)
    for frame, box in rows:
        if box.global_id in ts[frame]:
            raise ValidationError(f"two boxes for id {box.global_id} in frame {frame}")
        ts[frame][box.global_id] = box
    return dict(ts)


# ---------------------------------------------------------------------------
# polygon helpers


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by a counter-clockwise convex ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def iou3d(a: Box3D, b: Box3D) -> float:
    """IoU of two yaw-rotated boxes: footprint polygon overlap times z overlap."""
    geom = ("x", "y", "z", "length", "width", "height", "yaw")
    if all(getattr(a, k) == getattr(b, k) for k in geom):
        return 1.0  # clipping a polygon against itself is only exact up to rounding
    za0, za1 = a.z - a.height / 2, a.z + a.height / 2
    zb0, zb1 = b.z - b.height / 2, b.z + b.height / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.x - b.x, a.y - b.y) >= ra + rb:
        return 0.0
    area = polygon_area(clip_convex(a.footprint(), b.footprint()))
    inter = area * dz
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# HOTA


@dataclass
class HotaResult:
    hota: float
    deta: float
    assa: float
    loca: float
    alphas: Tuple[float, ...]
    per_alpha: Dict[str, np.ndarray] = field(repr=False)

    def summary_line(self) -> str:
        return f"HOTA {self.hota:.6f} DetA {self.deta:.6f} AssA {self.assa:.6f} LocA {self.loca:.6f}"

    def per_alpha_csv(self) -> str:
        lines = ["alpha,HOTA,DetA,AssA,LocA"]
        for i, a in enumerate(self.alphas):
            vals = [self.per_alpha[k][i] for k in ("HOTA", "DetA", "AssA", "LocA")]
            lines.append(f"{a:.2f}," + ",".join(f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"


def similarity_matrix(gt_boxes: Sequence[Box3D], pred_boxes: Sequence[Box3D]) -> np.ndarray:
    sim = np.zeros((len(gt_boxes), len(pred_boxes)))
    for i, g in enumerate(gt_boxes):
        for j, p in enumerate(pred_boxes):
            sim[i, j] = iou3d(g, p)
    return sim


def match_frame(sim: np.ndarray, alpha: float) -> List[Tuple[int, int]]:
    """Pairs maximising total similarity among pairs with similarity >= alpha."""
    if sim.size == 0:
        return []
    admissible = sim >= alpha - 1e-12
    score = np.where(admissible, sim, 0.0)
    rows, cols = linear_sum_assignment(score, maximize=True)
    return [(r, c) for r, c in zip(rows, cols) if admissible[r, c]]


def hota(gt: TrackSet, pred: TrackSet, alphas: Sequence[float] = DEFAULT_ALPHAS) -> HotaResult:
    """HOTA over all frames, averaged across the ``alphas`` IoU thresholds."""
    n_gt_total = sum(len(v) for v in gt.values())
    if n_gt_total == 0:
        raise UndefinedScoreError("ground truth is empty; HOTA is undefined")
    alphas = tuple(float(a) for a in alphas)
    frames = sorted(set(gt) | set(pred))
    gt_count: Dict[int, int] = defaultdict(int)
    pred_count: Dict[int, int] = defaultdict(int)
    per_frame = []
    for f in frames:
        g = gt.get(f, {})
        p = pred.get(f, {})
        gids, pids = sorted(g), sorted(p)
        for i in gids:
            gt_count[i] += 1
        for j in pids:
            pred_count[j] += 1
        per_frame.append((gids, pids, similarity_matrix([g[i] for i in gids], [p[j] for j in pids])))
    n_pred_total = sum(pred_count.values())

    res = {k: np.zeros(len(alphas)) for k in ("HOTA", "DetA", "AssA", "LocA")}
    for ai, alpha in enumerate(alphas):
        tp = 0
        loc = 0.0
        pair_tp: Dict[Tuple[int, int], int] = defaultdict(int)
        for gids, pids, sim in per_frame:
            for r, c in match_frame(sim, alpha):
                tp += 1
                loc += sim[r, c]
                pair_tp[(gids[r], pids[c])] += 1
        fn = n_gt_total - tp
        fp = n_pred_total - tp
        deta = tp / (tp + fn + fp) if (tp + fn + fp) else 0.0
        if tp:
            ass_sum = 0.0
            for (g, p), tpa in pair_tp.items():
                ass_sum += tpa * tpa / (gt_count[g] + pred_count[p] - tpa)
            assa = ass_sum / tp
            loca = loc / tp
        else:
            assa = 0.0
            loca = float("nan")
        res["DetA"][ai] = deta
        res["AssA"][ai] = assa
        res["LocA"][ai] = loca
        res["HOTA"][ai] = math.sqrt(deta * assa)
    loca_vals = res["LocA"][~np.isnan(res["LocA"])]
    res["LocA"] = np.nan_to_num(res["LocA"], nan=0.0)
    return HotaResult(
        hota=float(res["HOTA"].mean()),
        deta=float(res["DetA"].mean()),
        assa=float(res["AssA"].mean()),
        loca=float(loca_vals.mean()) if loca_vals.size else 0.0,
        alphas=alphas,
        per_alpha=res,
    )


def identity_switches(gt: TrackSet, pred: TrackSet, alpha: float = 0.5, start_frame: int = 0) -> Dict[str, int]:
    """Count id changes along matched trajectories.

    ``gt_switches`` counts how often a ground-truth id is matched to a different
    prediction id than the previous time it was matched; ``pred_switches`` is
    the same from the prediction side.
    """
    last_for_gt: Dict[int, int] = {}
    last_for_pred: Dict[int, int] = {}
    gsw = psw = 0
    for f in sorted(set(gt) | set(pred)):
        if f < start_frame:
            continue
        g, p = gt.get(f, {}), pred.get(f, {})
        gids, pids = sorted(g), sorted(p)
        sim = similarity_matrix([g[i] for i in gids], [p[j] for j in pids])
        for r, c in match_frame(sim, alpha):
            gi, pj = gids[r], pids[c]
            if gi in last_for_gt and last_for_gt[gi] != pj:
                gsw += 1
            if pj in last_for_pred and last_for_pred[pj] != gi:
                psw += 1
            last_for_gt[gi] = pj
            last_for_pred[pj] = gi
    return {"gt_switches": gsw, "pred_switches": psw}
