"""Pipeline configuration: one JSON document, defaults baked in, every field overridable."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

from .errors import ValidationError
from .fuse_refine import FUSION_THRESHOLD, YAW_MIN_DISPLACEMENT, YAW_PERIOD
from .lift3d import ALPHA_LOWER, ALPHA_UPPER, MIN_SAMPLES
from .sct import SCTConfig
from .spatial_assoc import SpatialConfig
from .temporal_assoc import TemporalConfig


@dataclass
class LiftConfig:
    box_mode: str = "lift"  # "lift" (depth + masks) or "fixed" (class-mean box at the cluster centroid)
    erode_masks: bool = True
    pixel_stride: int = 1
    min_samples: int = MIN_SAMPLES
    alpha_lower: float = ALPHA_LOWER
    alpha_upper: float = ALPHA_UPPER
    epsilon_overrides: Dict[str, float] = field(default_factory=dict)  # class id -> epsilon


@dataclass
class FusionConfig:
    enabled: bool = True
    threshold: float = FUSION_THRESHOLD


@dataclass
class YawConfig:
    enabled: bool = True
    period: int = YAW_PERIOD
    min_displacement: float = YAW_MIN_DISPLACEMENT


@dataclass
class CorruptionConfig:
    """Deliberate damage to the per-frame clusters, for robustness experiments."""
    rate: float = 0.0
    seed: int = 0


@dataclass
class PipelineConfig:
    mode: str = "3d"
    workers: int = 1
    pedestrian_class: int = 0
    keypoint_confidence: float = 0.5
    sct: SCTConfig = field(default_factory=SCTConfig)
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    cut_overrides: Dict[str, float] = field(default_factory=dict)  # class id -> linkage cut
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    yaw: YawConfig = field(default_factory=YawConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)

    def validate(self) -> "PipelineConfig":
        def check(ok: bool, msg: str):
            if not ok:
                raise ValidationError(msg)

        check(self.mode in ("2d", "3d"), f"mode must be 2d or 3d, got {self.mode!r}")
        check(self.workers >= 1, "workers must be >= 1")
        check(0 <= self.keypoint_confidence <= 1, "keypoint_confidence must lie in [0, 1]")
        s = self.sct
        check(0 <= s.iou_weight <= 1, "sct.iou_weight must lie in [0, 1]")
        check(0 <= s.iou_min <= 1 and 0 <= s.app_max <= 2, "sct gates out of range")
        check(0 < s.ema_alpha < 1, "sct.ema_alpha must lie in (0, 1)")
        check(s.max_age >= 0, "sct.max_age must be >= 0")
        check(0 <= self.spatial.app_gate <= 2, "spatial.app_gate must lie in [0, 2]")
        for k, v in self.cut_overrides.items():
            check(v > 0, f"cut for class {k} must be > 0")
        self.temporal.validate()
        check(self.temporal.max_lost_frames >= 0, "temporal.max_lost_frames must be >= 0")
        lf = self.lift
        check(lf.box_mode in ("lift", "fixed"), f"lift.box_mode must be lift or fixed, got {lf.box_mode!r}")
        check(lf.pixel_stride >= 1, "lift.pixel_stride must be >= 1")
        check(lf.min_samples >= 1, "lift.min_samples must be >= 1")
        check(0 < lf.alpha_lower <= 1 <= lf.alpha_upper, "need 0 < alpha_lower <= 1 <= alpha_upper")
        for k, v in lf.epsilon_overrides.items():
            check(v > 0, f"epsilon for class {k} must be > 0")
        check(0 <= self.fusion.threshold < 1, "fusion.threshold must lie in [0, 1)")
        check(self.yaw.period >= 1 and self.yaw.min_displacement >= 0, "yaw settings out of range")
        check(0 <= self.corruption.rate <= 1, "corruption.rate must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        sections = {"sct": SCTConfig, "spatial": SpatialConfig, "temporal": TemporalConfig, "lift": LiftConfig,
                    "fusion": FusionConfig, "yaw": YawConfig, "corruption": CorruptionConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ValidationError(f"config section {key!r} must be an object")
                try:
                    kwargs[key] = sections[key](**value)
                except TypeError as exc:
                    raise ValidationError(f"config section {key!r}: {exc}") from exc
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path: Optional[str]) -> "PipelineConfig":
        if path is None:
            return cls().validate()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


# values that come from the published method rather than from this implementation
PUBLISHED = {
    "lift.min_samples": "published default (DBSCAN core threshold)",
    "lift.alpha_lower": "published default (volume sanity lower bound)",
    "lift.alpha_upper": "published default (volume sanity upper bound)",
    "fusion.threshold": "published default (IoA fusion threshold)",
    "yaw.period": "published default (frames between yaw updates)",
    "yaw.min_displacement": "published default (metres moved before yaw updates)",
}


def annotated_dump(config: PipelineConfig) -> str:
    """JSON dump of the config with a ``_notes`` block marking published constants.

    Everything not listed in ``_notes`` is an implementation choice.
    """
    data = config.to_dict()
    data["_notes"] = dict(PUBLISHED)
    return json.dumps(data, indent=2, sort_keys=False) + "\n"
