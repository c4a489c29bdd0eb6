"""Independent reference implementations used to check the package.

Each one is written from the definition, as plainly as possible, and shares
no code with the module it checks.
"""
import math
from collections import deque
from itertools import permutations

import numpy as np


# ---------------------------------------------------------------------------
# DBSCAN, textbook O(n^2) version


def naive_dbscan(points, eps, min_samples):
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    neigh = [np.flatnonzero(d2[i] <= eps * eps) for i in range(n)]
    core = [len(nb) >= min_samples for nb in neigh]
    labels = [None] * n
    cluster = -1
    for i in range(n):
        if labels[i] is not None:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque(neigh[i])
        while queue:
            j = queue.popleft()
            if labels[j] == -1:
                labels[j] = cluster  # noise becomes border
            if labels[j] is not None:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(neigh[j])
    return np.array(labels)


def same_partition(a, b):
    """True when two labelings agree up to renaming (noise -1 must match exactly)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or not np.array_equal(a == -1, b == -1):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if x == -1:
            continue
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


# ---------------------------------------------------------------------------
# box fusion, step by step


def _vol(b):
    return b.length * b.width * b.height


def _ioa(bi, bj):
    inter = 1.0
    for c, s in (("x", "length"), ("y", "width"), ("z", "height")):
        lo = max(getattr(bi, c) - getattr(bi, s) / 2.0, getattr(bj, c) - getattr(bj, s) / 2.0)
        hi = min(getattr(bi, c) + getattr(bi, s) / 2.0, getattr(bj, c) + getattr(bj, s) / 2.0)
        inter *= max(hi - lo, 0.0)
    return inter / min(_vol(bi), _vol(bj))


def literal_fuse(boxes, thr):
    """Returns ``[(center, dims, id, score, class), ...]`` and the id groups."""
    O = sorted(boxes, key=lambda b: -_vol(b))  # 1. descending volume (stable)
    F, groups = [], []  # 2.
    U = [False] * len(O)
    for i in range(len(O)):  # 3.
        if U[i]:
            continue
        G = [O[i]]
        U[i] = True
        for j in range(i + 1, len(O)):  # 4.
            if not U[j] and _ioa(O[i], O[j]) > thr:
                G.append(O[j])
                U[j] = True
        # 5. volume-weighted centre and size; id, score, class from the minimum id
        V = [_vol(b) for b in G]
        total = 0.0
        for v in V:
            total += v
        L, S = [], []
        for attr_c, attr_s in (("x", "length"), ("y", "width"), ("z", "height")):
            num_c = num_s = 0.0
            for v, b in zip(V, G):
                num_c += v * getattr(b, attr_c)
                num_s += v * getattr(b, attr_s)
            L.append(num_c / total)
            S.append(num_s / total)
        keep = G[0]
        for b in G:
            if b.global_id < keep.global_id:
                keep = b
        F.append((tuple(L), tuple(S), keep.global_id, keep.score, keep.class_id))
        groups.append([b.global_id for b in G])
    return F, groups  # 6. loop ends once every U is set


# ---------------------------------------------------------------------------
# rotated-box IoU by sampling


def inside_box(pts, box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = pts[:, 0] - box.x, pts[:, 1] - box.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.length / 2) & (np.abs(v) <= box.width / 2) & (np.abs(pts[:, 2] - box.z) <= box.height / 2)


def sample_box(box, n, seed):
    """Scrambled Sobol points, uniform inside ``box``."""
    from scipy.stats import qmc

    q = qmc.Sobol(3, scramble=True, seed=seed).random(n) - 0.5
    local = q * np.array([box.length, box.width, box.height])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = box.x + c * local[:, 0] - s * local[:, 1]
    y = box.y + s * local[:, 0] + c * local[:, 1]
    return np.column_stack([x, y, box.z + local[:, 2]])


def mc_iou(a, b, n=1 << 20, seed=0):
    """IoU with the intersection volume estimated from points drawn inside the smaller box."""
    small, big = (a, b) if _vol(a) <= _vol(b) else (b, a)
    frac = inside_box(sample_box(small, n, seed), big).mean()
    inter = frac * _vol(small)
    return inter / (_vol(a) + _vol(b) - inter)


# ---------------------------------------------------------------------------
# masks


def brute_erode(mask):
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    out = np.zeros_like(m)
    for r in range(h):
        for c in range(w):
            ok = True
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if not (0 <= rr < h and 0 <= cc < w) or not m[rr, cc]:
                        ok = False
            out[r, c] = ok
    return out


# ---------------------------------------------------------------------------
# ray casting against one cuboid, face by face


def ray_box_depth(calib, u, v, box):
    """Planar depth of the first face of ``box`` hit by the ray through pixel (u, v), or None."""
    d_cam = np.array([(u - calib.cu) / calib.fu, (v - calib.cv) / calib.fv, 1.0])
    origin = -calib.R.T @ calib.t
    d = calib.R.T @ d_cam
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    axes = [np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0])]
    half = [box.length / 2, box.width / 2, box.height / 2]
    center = np.array([box.x, box.y, box.z])
    best = None
    for k in range(3):
        for sign in (-1.0, 1.0):
            normal = axes[k]
            plane_pt = center + sign * half[k] * normal
            denom = d @ normal
            if abs(denom) < 1e-15:
                continue
            t = ((plane_pt - origin) @ normal) / denom
            if t <= 0:
                continue
            hit = origin + t * d - center
            if all(abs(hit @ axes[o]) <= half[o] + 1e-9 for o in range(3) if o != k):
                if best is None or t < best:
                    best = t
    return best  # d_cam has unit z, so the ray parameter is the planar depth


# ---------------------------------------------------------------------------
# HOTA on tiny inputs, with exhaustive matching


def exhaustive_hota(gt, pred, sim_fn, alphas):
    """HOTA components from the defining formulas; matching tries every injection."""
    frames = sorted(set(gt) | set(pred))
    gt_n, pr_n = {}, {}
    for f in frames:
        for g in gt.get(f, {}):
            gt_n[g] = gt_n.get(g, 0) + 1
        for p in pred.get(f, {}):
            pr_n[p] = pr_n.get(p, 0) + 1
    n_gt, n_pr = sum(gt_n.values()), sum(pr_n.values())
    out = {"HOTA": [], "DetA": [], "AssA": [], "LocA": []}
    for alpha in alphas:
        tp, loc, pairs = 0, 0.0, {}
        for f in frames:
            gs, ps = sorted(gt.get(f, {})), sorted(pred.get(f, {}))
            best, best_m = -1.0, []
            small, large = (gs, ps) if len(gs) <= len(ps) else (ps, gs)
            for perm in permutations(large, len(small)):
                m, total = [], 0.0
                for a, b in zip(small, perm):
                    g, p = (a, b) if small is gs else (b, a)
                    sim = sim_fn(gt[f][g], pred[f][p])
                    if sim >= alpha:
                        m.append((g, p, sim))
                        total += sim
                if total > best:
                    best, best_m = total, m
            for g, p, sim in best_m:
                tp += 1
                loc += sim
                pairs[(g, p)] = pairs.get((g, p), 0) + 1
        deta = tp / (n_gt + n_pr - tp) if (n_gt + n_pr - tp) else 0.0
        assa = sum(c * c / (gt_n[g] + pr_n[p] - c) for (g, p), c in pairs.items()) / tp if tp else 0.0
        out["DetA"].append(deta)
        out["AssA"].append(assa)
        out["LocA"].append(loc / tp if tp else float("nan"))
        out["HOTA"].append(math.sqrt(deta * assa))
    return {k: np.array(v) for k, v in out.items()}
