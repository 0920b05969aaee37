"""Scenario configuration for the desk-scale simulator.

Everything the end-to-end loop needs is collected here and is JSON
(de)serializable: world rendering and scheduling, stage-1 synthetic data
generation, the oracle scoring backend, edge and cloud knobs, the fixed
held-out evaluation set, the label-augmentation ablation sweep, and
transport settings. Any field can be overridden from a config file; the
remaining fields keep their defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .edge import EdgeConfig


@dataclass(frozen=True)
class CameraSpec:
    camera_id: str
    modality: str = "rgb"


@dataclass(frozen=True)
class WorldSpec:
    frame_width: int = 128
    frame_height: int = 96
    frames_per_day: int = 240  # per camera
    frame_interval_s: float = 1.0
    cameras: Tuple[CameraSpec, ...] = (
        CameraSpec("cam-near", "rgb"),
        CameraSpec("cam-far", "rgb"),
        CameraSpec("cam-thermal", "thermal"),
    )
    sightings_per_week: float = 17.0
    near_fraction: float = 0.55
    range_near_m: Tuple[float, float] = (28.0, 95.0)
    range_far_m: Tuple[float, float] = (105.0, 195.0)
    case_duration_s: Tuple[float, float] = (8.0, 16.0)
    focal_px_m: float = 1300.0  # apparent height in px = focal / range
    distractor_rates_per_day: Dict[str, float] = field(
        default_factory=lambda: {"heron": 3.0, "vehicle": 8.0, "vegetation": 4.0, "shadow": 4.0}
    )
    distractor_duration_s: Tuple[float, float] = (4.0, 10.0)
    drift_day: Optional[float] = None
    drift_level_shift: float = 24.0
    drift_speckle_per_frame: float = 5.0

    @property
    def day_seconds(self) -> float:
        return self.frames_per_day * self.frame_interval_s


@dataclass(frozen=True)
class Stage1Spec:
    web_rgb_images: int = 24
    web_thermal_images: int = 8
    synthetic_rgb: int = 120
    synthetic_thermal: int = 36
    synthetic_negatives_rgb: int = 70
    synthetic_negatives_thermal: int = 20
    backgrounds_per_modality: int = 8
    scale_range: Tuple[float, float] = (0.12, 0.42)
    instances_per_sample: Tuple[int, int] = (1, 2)
    blend_sigma: float = 1.0


@dataclass(frozen=True)
class OracleSpec:
    affinity: Dict[Tuple[str, str], float] = field(default_factory=dict)
    noise_amp: float = 0.03
    jitter_px: float = 1.0
    proposals_per_object: int = 2


@dataclass(frozen=True)
class HoldoutSpec:
    cases_near: int = 8
    cases_far: int = 8
    cases_thermal: int = 4
    frames_per_case: int = 10
    negatives_rgb: int = 240
    negatives_thermal: int = 60


@dataclass(frozen=True)
class CloudSpec:
    stage1_threshold: float = 0.5
    stage2_threshold: float = 0.65
    nms_iou: float = 0.5
    expansion_depth: int = 1
    use_descriptors: bool = True
    field_cap: int = 6000
    field_floor: int = 4000
    val_target: int = 24
    fpr_cap: float = 0.02
    frozen_fraction: float = 0.5


@dataclass(frozen=True)
class TransportSpec:
    loss_rate: float = 0.0
    budget_bytes: int = 10 * 1024 * 1024
    budget_window_s: float = 600.0


@dataclass(frozen=True)
class AblationSpec:
    enabled: bool = True
    thresholds: Tuple[float, ...] = (0.3, 0.5, 0.6, 0.7, 0.8)
    positive_frames: int = 48
    negative_frames: int = 48
    target_affinity: float = 0.4
    child_affinity: float = 0.8
    child_label: str = "southern cassowary"


def default_affinity(target: str = "cassowary") -> Dict[Tuple[str, str], float]:
    """Oracle confusion configuration used by the default scenario.

    The target class scores weakly under its own name and strongly under
    related labels; the visually similar distractor bleeds a little onto
    the bird-related labels, and the remaining distractors are near zero.
    """
    rows = {
        target: {
            target: 0.42,
            "southern cassowary": 0.80,
            "double-wattled cassowary": 0.74,
            "ratite": 0.70,
            "ratite bird": 0.70,
            "flightless bird": 0.75,
            f"black {target}": 0.50,
            "black flightless bird": 0.78,
            "black ratite": 0.72,
            "black ratite bird": 0.66,
        },
        "heron": {
            target: 0.15,
            "southern cassowary": 0.22,
            "double-wattled cassowary": 0.20,
            "ratite": 0.25,
            "ratite bird": 0.25,
            "flightless bird": 0.30,
            f"black {target}": 0.12,
            "black flightless bird": 0.20,
            "black ratite": 0.18,
            "black ratite bird": 0.16,
        },
        "vehicle": {target: 0.05, "flightless bird": 0.06, "southern cassowary": 0.04},
        "vegetation": {target: 0.08, "flightless bird": 0.10, "southern cassowary": 0.06},
        "shadow": {target: 0.05, "flightless bird": 0.05, "southern cassowary": 0.03},
    }
    return {(t, l): v for t, labels in rows.items() for l, v in labels.items()}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 7
    target_class: str = "cassowary"
    iterations: int = 5
    days_per_iteration: float = 2.0
    world: WorldSpec = field(default_factory=WorldSpec)
    stage1: Stage1Spec = field(default_factory=Stage1Spec)
    oracle: OracleSpec = field(default_factory=lambda: OracleSpec(affinity=default_affinity()))
    holdout: HoldoutSpec = field(default_factory=HoldoutSpec)
    cloud: CloudSpec = field(default_factory=CloudSpec)
    edge: EdgeConfig = field(default_factory=EdgeConfig)
    transport: TransportSpec = field(default_factory=TransportSpec)
    ablation: AblationSpec = field(default_factory=AblationSpec)

    @property
    def total_days(self) -> float:
        return self.iterations * self.days_per_iteration

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oracle"]["affinity"] = [
            [t, l, v] for (t, l), v in sorted(self.oracle.affinity.items())
        ]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        base = cls()
        world_d = {**asdict(base.world), **data.get("world", {})}
        cameras = tuple(
            CameraSpec(**c) if isinstance(c, dict) else c for c in world_d.pop("cameras")
        )
        world = WorldSpec(cameras=cameras, **_tupled(world_d, WorldSpec))
        oracle_d = {**asdict(base.oracle), **data.get("oracle", {})}
        affinity = oracle_d.pop("affinity")
        if isinstance(affinity, list):
            affinity = {(t, l): v for t, l, v in affinity}
        oracle = OracleSpec(affinity=affinity, **oracle_d)
        return cls(
            seed=data.get("seed", base.seed),
            target_class=data.get("target_class", base.target_class),
            iterations=data.get("iterations", base.iterations),
            days_per_iteration=data.get("days_per_iteration", base.days_per_iteration),
            world=world,
            stage1=Stage1Spec(**_tupled({**asdict(base.stage1), **data.get("stage1", {})}, Stage1Spec)),
            oracle=oracle,
            holdout=HoldoutSpec(**{**asdict(base.holdout), **data.get("holdout", {})}),
            cloud=CloudSpec(**{**asdict(base.cloud), **data.get("cloud", {})}),
            edge=EdgeConfig(**{**asdict(base.edge), **data.get("edge", {})}),
            transport=TransportSpec(**{**asdict(base.transport), **data.get("transport", {})}),
            ablation=AblationSpec(**_tupled({**asdict(base.ablation), **data.get("ablation", {})}, AblationSpec)),
        )

    @classmethod
    def load(cls, path_or_name: Union[str, Path]) -> "ScenarioConfig":
        """Load from a JSON file, or return the defaults for "default"."""
        if str(path_or_name) == "default":
            return cls()
        return cls.from_dict(json.loads(Path(path_or_name).read_text()))


def _tupled(d: dict, cls) -> dict:
    """JSON arrays back to tuples for tuple-typed dataclass fields."""
    out = {}
    for k, v in d.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out
