"""Global id assignment across frames.

Clusters are matched stage by stage: confirmed tracks (by local-id overlap),
lost tracks (appearance + growing spatial radius), tentative tracks (overlap
again), and finally new tentative tracks are spawned. Matching by local-id
overlap is what keeps a global id attached to the same per-camera tracks from
frame to frame; track splitting lets a better-fitting local id replace a
wrongly clustered one.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .spatial_assoc import Cluster, Key, TargetSnapshot


class TrackState(str, enum.Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    LOST = "lost"


@dataclass
class TemporalConfig:
    mode: str = "consistency"  # or "appearance" (Hungarian on appearance only)
    track_splitting: bool = True
    app_match_max: float = 0.45  # appearance gate for the appearance-only mode
    app_lost_max: float = 0.45
    lost_radius0: float = 1.0
    lost_radius_rate: float = 0.05
    reactivate_m0: int = 1
    reactivate_div: int = 60
    n_confirm: int = 3
    ema_alpha: float = 0.9
    max_lost_frames: int = 900

    def validate(self) -> None:
        if self.mode not in ("consistency", "appearance"):
            raise ValidationError(f"unknown association mode {self.mode!r}")
        if self.n_confirm < 1 or self.reactivate_m0 < 1 or self.reactivate_div < 1:
            raise ValidationError("lifecycle counters must be >= 1")
        if not (0 < self.ema_alpha < 1):
            raise ValidationError("ema_alpha must lie in (0, 1)")


@dataclass
class GlobalTrack:
    global_id: int
    state: TrackState
    class_id: int
    membership: Dict[int, int] = field(default_factory=dict)
    appearance: np.ndarray = field(default=None, repr=False)
    last_topdown: np.ndarray = field(default=None)
    last_seen_frame: int = 0
    lost_duration: int = 0
    consecutive_matches: int = 0
    reactivation_count: int = 0
    member_appearance: Dict[Key, np.ndarray] = field(default_factory=dict, repr=False)

    def membership_keys(self) -> Set[Key]:
        return {(c, l) for c, l in self.membership.items()}


@dataclass
class OverlapReport:
    expected: Set[Key]
    unexpected: Set[Key]
    vacated: Set[Key]

    def as_dict(self) -> dict:
        return {k: sorted(map(list, getattr(self, k))) for k in ("expected", "unexpected", "vacated")}


def overlap_report(cluster: Cluster, track: GlobalTrack) -> OverlapReport:
    keys = set(cluster.keys)
    mkeys = track.membership_keys()
    return OverlapReport(expected=keys & mkeys, unexpected=keys - mkeys, vacated=mkeys - keys)


@dataclass
class Assignment:
    global_id: int
    state: TrackState
    cluster: Cluster
    stage: str


def _cos_sim(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


_BIG = 1e12


class TemporalAssociator:
    def __init__(self, config: Optional[TemporalConfig] = None):
        self.config = config or TemporalConfig()
        self.config.validate()
        self.tracks: Dict[int, GlobalTrack] = {}
        self.owner: Dict[Key, int] = {}
        self.next_id = 1
        self.events: List[dict] = []
        self.last_reports: List[dict] = []
        self.frame_counters: Dict[str, int] = {}

    # -- bookkeeping -------------------------------------------------------

    def _event(self, frame: int, kind: str, **data) -> None:
        self.events.append({"frame": frame, "type": kind, **data})
        self.frame_counters[kind] = self.frame_counters.get(kind, 0) + 1

    def _claim(self, track: GlobalTrack, key: Key) -> None:
        cam, lid = key
        old = track.membership.get(cam)
        if old is not None and old != lid and self.owner.get((cam, old)) == track.global_id:
            del self.owner[(cam, old)]
        prev = self.owner.get(key)
        if prev is not None and prev != track.global_id and prev in self.tracks:
            other = self.tracks[prev]
            if other.membership.get(cam) == lid:
                del other.membership[cam]
        track.membership[cam] = lid
        self.owner[key] = track.global_id

    def _release(self, track: GlobalTrack) -> None:
        for key in track.membership_keys():
            if self.owner.get(key) == track.global_id:
                del self.owner[key]
        track.membership.clear()

    def _refresh(self, track: GlobalTrack, cluster: Cluster, frame: int) -> None:
        a = self.config.ema_alpha
        if track.appearance is None:
            track.appearance = cluster.appearance.copy()
        else:
            track.appearance = _normalize(a * track.appearance + (1 - a) * cluster.appearance)
        track.last_topdown = cluster.centroid.copy()
        track.last_seen_frame = frame
        track.lost_duration = 0
        for m in cluster.members:
            track.member_appearance[m.key] = m.embedding
        # keep only entries that can still compete in a split
        live = track.membership_keys()
        for key in list(track.member_appearance):
            if key not in live and key not in cluster.keys:
                del track.member_appearance[key]

    def tracks_in(self, state: TrackState) -> List[GlobalTrack]:
        return [t for gid, t in sorted(self.tracks.items()) if t.state == state]

    def lost_radius(self, d: int) -> float:
        return self.config.lost_radius0 + self.config.lost_radius_rate * d

    def reactivation_matches(self, d: int) -> int:
        return self.config.reactivate_m0 + d // self.config.reactivate_div

    # -- splitting -----------------------------------------------------------

    def resolve_split(self, track: GlobalTrack, report: OverlapReport, cluster: Cluster,
                      present: Set[Key]) -> Dict[Key, str]:
        """Decide, for every unexpected member, whether it takes over its
        camera's slot in ``track`` ("accept") or moves on to later stages ("route").

        The incumbent local id only competes when it is observed this frame;
        otherwise any unexpected member wins against similarity -1.
        """
        decisions: Dict[Key, str] = {}
        if not report.expected:
            return {key: "route" for key in report.unexpected}
        ref = np.mean([cluster.member(k).embedding for k in sorted(report.expected)], axis=0)
        for key in sorted(report.unexpected):
            cam = key[0]
            a = _cos_sim(cluster.member(key).embedding, ref)
            old = track.membership.get(cam)
            old_key = None if old is None else (cam, old)
            if old_key is not None and old_key in present and old_key in track.member_appearance:
                b = _cos_sim(track.member_appearance[old_key], ref)
            else:
                b = -1.0
            decisions[key] = "accept" if a > b else "route"
        return decisions

    def _apply_overlap_match(self, track: GlobalTrack, cluster: Cluster, frame: int,
                             present: Set[Key]) -> Tuple[Optional[Cluster], Optional[Cluster]]:
        report = overlap_report(cluster, track)
        self.last_reports.append({"global_id": track.global_id, **report.as_dict()})
        if self.config.track_splitting:
            decisions = self.resolve_split(track, report, cluster, present)
        else:
            decisions = {k: "accept" for k in report.unexpected}
        assigned = [m for m in cluster.members if m.key in report.expected]
        routed = []
        for m in cluster.members:
            if m.key in report.expected:
                continue
            if decisions[m.key] == "accept":
                old = track.membership.get(m.camera_id)
                if old is not None and (m.camera_id, old) in present and self.config.track_splitting:
                    self._event(frame, "split", global_id=track.global_id, camera_id=m.camera_id,
                                old_local_id=old, new_local_id=m.local_id)
                self._claim(track, m.key)
                assigned.append(m)
            else:
                routed.append(m)
        for m in assigned:
            if m.key in report.expected:
                self._claim(track, m.key)
        kept = Cluster(assigned)
        self._refresh(track, kept, frame)
        return kept, (Cluster(routed) if routed else None)

    # -- matching stages -----------------------------------------------------

    def _overlap_assign(self, clusters: Sequence[Cluster], tracks: Sequence[GlobalTrack]):
        if not clusters or not tracks:
            return []
        overlap = np.zeros((len(clusters), len(tracks)))
        app = np.zeros_like(overlap)
        for i, c in enumerate(clusters):
            keys = set(c.keys)
            for j, t in enumerate(tracks):
                overlap[i, j] = len(keys & t.membership_keys())
                app[i, j] = 1.0 - _cos_sim(c.appearance, t.appearance) if t.appearance is not None else 2.0
        rank = np.argsort(np.argsort([t.global_id for t in tracks]))
        cost = -overlap * 1e6 + app * 1e2 + rank[None, :] * 1e-3
        cost = np.where(overlap > 0, cost, _BIG)
        rows, cols = linear_sum_assignment(cost)
        return [(r, c) for r, c in zip(rows, cols) if overlap[r, c] > 0]

    def _appearance_assign(self, clusters: Sequence[Cluster], tracks: Sequence[GlobalTrack], gate: float,
                           frame: int = 0, spatial: bool = False):
        if not clusters or not tracks:
            return []
        dist = np.full((len(clusters), len(tracks)), _BIG)
        for i, c in enumerate(clusters):
            for j, t in enumerate(tracks):
                if c.class_id != t.class_id or t.appearance is None:
                    continue
                d = 1.0 - _cos_sim(c.appearance, t.appearance)
                if d > gate:
                    continue
                if spatial:
                    lost_for = max(frame - t.last_seen_frame - 1, 0)
                    if np.linalg.norm(c.centroid - t.last_topdown) > self.lost_radius(lost_for):
                        continue
                dist[i, j] = d
        rows, cols = linear_sum_assignment(dist)
        return [(r, c) for r, c in zip(rows, cols) if dist[r, c] < _BIG]

    def match_confirmed(self, clusters: List[Cluster], frame: int, present: Set[Key]):
        tracks = self.tracks_in(TrackState.CONFIRMED)
        out, leftovers = [], []
        if self.config.mode == "appearance":
            pairs = self._appearance_assign(clusters, tracks, self.config.app_match_max)
        else:
            pairs = self._overlap_assign(clusters, tracks)
        matched_c = {i for i, _ in pairs}
        matched_t = set()
        for i, j in pairs:
            track = tracks[j]
            matched_t.add(track.global_id)
            if self.config.mode == "appearance":
                for m in clusters[i].members:
                    self._claim(track, m.key)
                self._refresh(track, clusters[i], frame)
                kept, routed = clusters[i], None
            else:
                kept, routed = self._apply_overlap_match(track, clusters[i], frame, present)
            out.append(Assignment(track.global_id, track.state, kept, "confirmed"))
            if routed is not None:
                leftovers.append(routed)
        leftovers = [c for i, c in enumerate(clusters) if i not in matched_c] + leftovers
        for track in tracks:
            if track.global_id not in matched_t:
                track.state = TrackState.LOST
                track.reactivation_count = 0
                self._event(frame, "lost", global_id=track.global_id)
        return out, leftovers

    def match_lost(self, clusters: List[Cluster], frame: int):
        tracks = self.tracks_in(TrackState.LOST)
        pairs = self._appearance_assign(clusters, tracks, self.config.app_lost_max, frame, spatial=True)
        out = []
        matched_c, matched_t = set(), set()
        for i, j in pairs:
            track, cluster = tracks[j], clusters[i]
            matched_c.add(i)
            matched_t.add(track.global_id)
            lost_for = max(frame - track.last_seen_frame - 1, 0)
            track.reactivation_count += 1
            if track.reactivation_count >= self.reactivation_matches(lost_for):
                self._release(track)
                for m in cluster.members:
                    self._claim(track, m.key)
                self._refresh(track, cluster, frame)
                track.state = TrackState.CONFIRMED
                track.reactivation_count = 0
                self._event(frame, "reactivate", global_id=track.global_id, lost_frames=lost_for)
                out.append(Assignment(track.global_id, track.state, cluster, "lost"))
            else:
                # held for this lost track; no id is emitted until reactivation
                out.append(Assignment(track.global_id, track.state, cluster, "lost-pending"))
        for track in tracks:
            if track.global_id not in matched_t:
                track.reactivation_count = 0
        return out, [c for i, c in enumerate(clusters) if i not in matched_c]

    def match_tentative(self, clusters: List[Cluster], frame: int, present: Set[Key]):
        tracks = self.tracks_in(TrackState.TENTATIVE)
        if self.config.mode == "appearance":
            pairs = self._appearance_assign(clusters, tracks, self.config.app_match_max)
        else:
            pairs = self._overlap_assign(clusters, tracks)
        out, leftovers = [], []
        matched_c, matched_t = set(), set()
        for i, j in pairs:
            track = tracks[j]
            matched_c.add(i)
            matched_t.add(track.global_id)
            if self.config.mode == "appearance":
                for m in clusters[i].members:
                    self._claim(track, m.key)
                self._refresh(track, clusters[i], frame)
                kept, routed = clusters[i], None
            else:
                kept, routed = self._apply_overlap_match(track, clusters[i], frame, present)
            track.consecutive_matches += 1
            if track.consecutive_matches >= self.config.n_confirm:
                track.state = TrackState.CONFIRMED
                self._event(frame, "confirm", global_id=track.global_id)
            out.append(Assignment(track.global_id, track.state, kept, "tentative"))
            if routed is not None:
                leftovers.append(routed)
        for track in tracks:
            if track.global_id not in matched_t:
                self._release(track)
                del self.tracks[track.global_id]
                self._event(frame, "remove", global_id=track.global_id)
        return out, [c for i, c in enumerate(clusters) if i not in matched_c] + leftovers

    def spawn(self, clusters: List[Cluster], frame: int) -> List[Assignment]:
        out = []
        for cluster in clusters:
            track = GlobalTrack(global_id=self.next_id, state=TrackState.TENTATIVE, class_id=cluster.class_id)
            self.next_id += 1
            self.tracks[track.global_id] = track
            for m in cluster.members:
                self._claim(track, m.key)
            self._refresh(track, cluster, frame)
            self._event(frame, "spawn", global_id=track.global_id)
            out.append(Assignment(track.global_id, track.state, cluster, "spawn"))
        return out

    def update(self, frame: int, clusters: Sequence[Cluster]) -> List[Assignment]:
        """Run all stages for one frame; returns every cluster's fate."""
        self.last_reports = []
        self.frame_counters = {}
        present = {k for c in clusters for k in c.keys}
        clusters = list(clusters)
        assigned, left = self.match_confirmed(clusters, frame, present)
        lost_out, left = self.match_lost(left, frame)
        tent_out, left = self.match_tentative(left, frame, present)
        spawned = self.spawn(left, frame)
        for track in list(self.tracks.values()):
            if track.state == TrackState.LOST:
                track.lost_duration = frame - track.last_seen_frame
                if track.lost_duration > self.config.max_lost_frames:
                    self._release(track)
                    del self.tracks[track.global_id]
                    self._event(frame, "expire", global_id=track.global_id)
        return assigned + lost_out + tent_out + spawned

    def check_invariants(self) -> None:
        seen: Dict[Key, int] = {}
        for gid, t in self.tracks.items():
            for key in t.membership_keys():
                if key in seen:
                    raise AssertionError(f"{key} owned by tracks {seen[key]} and {gid}")
                seen[key] = gid
