"""Per-frame cross-camera clustering of locally tracked targets."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .ingest import ClassStats

Key = Tuple[int, int]  # (camera_id, local_id)


@dataclass
class TargetSnapshot:
    camera_id: int
    local_id: int
    class_id: int
    embedding: np.ndarray
    topdown: Tuple[float, float]
    foot_pixel: Tuple[float, float] = (0.0, 0.0)
    score: float = 1.0
    detection: object = field(default=None, repr=False, compare=False)

    @property
    def key(self) -> Key:
        return (self.camera_id, self.local_id)


@dataclass
class Cluster:
    members: List[TargetSnapshot]
    centroid: np.ndarray = field(init=False)
    appearance: np.ndarray = field(init=False)
    class_id: int = field(init=False)

    def __post_init__(self):
        if not self.members:
            raise ValidationError("a cluster needs at least one member")
        cams = [m.camera_id for m in self.members]
        if len(set(cams)) != len(cams):
            raise ValidationError(f"cluster holds two members from one camera: {sorted(cams)}")
        self.members = sorted(self.members, key=lambda m: m.key)
        self.centroid = np.mean([m.topdown for m in self.members], axis=0)
        app = np.sum([m.embedding for m in self.members], axis=0)
        norm = np.linalg.norm(app)
        self.appearance = app / norm if norm > 0 else app
        counts = Counter(m.class_id for m in self.members)
        top = max(counts.values())
        self.class_id = min(c for c, n in counts.items() if n == top)

    @property
    def keys(self) -> List[Key]:
        return [m.key for m in self.members]

    def member(self, key: Key) -> TargetSnapshot:
        for m in self.members:
            if m.key == key:
                return m
        raise KeyError(key)


@dataclass
class SpatialConfig:
    app_gate: float = 0.5
    pedestrian_class: int = 0


def build_distance_matrix(snapshots: Sequence[TargetSnapshot], class_id: int, stats: ClassStats,
                          config: Optional[SpatialConfig] = None) -> np.ndarray:
    """Gated pairwise distances for one class.

    Pedestrians are compared by cosine distance of their embeddings, every
    other class by top-down Euclidean distance. Any pair beyond either gate,
    or from the same camera, is set to ``inf``.
    """
    config = config or SpatialConfig()
    if any(s.class_id != class_id for s in snapshots):
        raise ValidationError("build_distance_matrix expects snapshots of a single class")
    n = len(snapshots)
    if n == 0:
        return np.zeros((0, 0))
    emb = np.array([s.embedding for s in snapshots], dtype=np.float64)
    pos = np.array([s.topdown for s in snapshots], dtype=np.float64)
    cams = np.array([s.camera_id for s in snapshots])
    cos = np.clip(1.0 - emb @ emb.T, 0.0, 2.0)
    euc = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    dist = cos if class_id == config.pedestrian_class else euc
    gate = stats[class_id].spatial_gate
    blocked = (cos > config.app_gate) | (euc > gate) | (cams[:, None] == cams[None, :])
    dist = np.where(blocked, np.inf, dist)
    np.fill_diagonal(dist, 0.0)
    return dist


def constrained_average_linkage(dist: np.ndarray, cut: float, keys: Sequence) -> List[List[int]]:
    """Average-linkage agglomeration that never merges across an ``inf`` pair.

    Merging stops once the closest admissible pair is farther than ``cut``.
    Ties go to the pair whose sorted minimal member keys are lexicographically
    smallest.
    """
    n = dist.shape[0]
    groups: Dict[int, List[int]] = {i: [i] for i in range(n)}
    sizes = {i: 1 for i in range(n)}
    mins = {i: keys[i] for i in range(n)}
    link = dist.astype(np.float64).copy()
    np.fill_diagonal(link, np.inf)
    active = list(range(n))
    while len(active) > 1:
        best = None
        for ai, a in enumerate(active):
            for b in active[ai + 1:]:
                d = link[a, b]
                if not np.isfinite(d) or d > cut:
                    continue
                tie = tuple(sorted((mins[a], mins[b])))
                cand = (d, tie, a, b)
                if best is None or cand[:2] < best[:2]:
                    best = cand
        if best is None:
            break
        _, _, a, b = best
        na, nb = sizes[a], sizes[b]
        for c in active:
            if c in (a, b):
                continue
            da, db = link[a, c], link[b, c]
            merged = np.inf if not (np.isfinite(da) and np.isfinite(db)) else (na * da + nb * db) / (na + nb)
            link[a, c] = link[c, a] = merged
        groups[a].extend(groups.pop(b))
        sizes[a] = na + nb
        mins[a] = min(mins[a], mins.pop(b))
        active.remove(b)
        link[b, :] = np.inf
        link[:, b] = np.inf
    return [sorted(groups[a]) for a in active]


def cluster_frame(snapshots: Sequence[TargetSnapshot], stats: ClassStats,
                  config: Optional[SpatialConfig] = None) -> List[Cluster]:
    """Group one frame's snapshots into clusters, class by class."""
    config = config or SpatialConfig()
    seen = set()
    for s in snapshots:
        if s.key in seen:
            raise ValidationError(f"duplicate snapshot {s.key}")
        seen.add(s.key)
    by_class: Dict[int, List[TargetSnapshot]] = defaultdict(list)
    for s in snapshots:
        by_class[s.class_id].append(s)
    clusters: List[Cluster] = []
    for cid in sorted(by_class):
        snaps = sorted(by_class[cid], key=lambda s: s.key)
        dist = build_distance_matrix(snaps, cid, stats, config)
        groups = constrained_average_linkage(dist, stats[cid].cut, [s.key for s in snaps])
        for g in groups:
            clusters.append(Cluster([snaps[i] for i in g]))
    clusters.sort(key=lambda c: (c.class_id, c.keys[0]))
    return clusters
