"""Cloud-side node: pseudo-labelling of uploaded field data at a raised
threshold, bounded training-set curation, toy-detector fine-tuning with a
frozen/tunable split, and a versioned model registry with publish/rollback.

Pseudo-labelling is parallelizable per image; curation, fine-tuning and
publishing are serialized per pipeline instance (single mutator of the
manifest and registry).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox, ScoredBox, scored_box_from_json, scored_box_to_json
from .detector import (
    ClassModel,
    ModalityMismatchError,
    ToyDetector,
    ToyDetectorParams,
    canonical_crop,
    deserialize_params,
    estimate_class_model,
    estimate_feature_stats,
    serialize_params,
)
from .edge import FrameRecord, UploadBatch
from .images import RasterImage
from .labelaug import (
    LabelHierarchy,
    OracleImage,
    PseudoLabelSet,
    ScoringBackend,
    label_augmented_nms,
    stable_seed,
)
from .metrics import (
    RANGE_FAR,
    RANGE_NEAR,
    average_precision,
    frame_tpr,
    roc_points,
    select_operating_point,
)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    source: str  # "synthetic" | "field" | "web"
    labels: Tuple[ScoredBox, ...]
    iteration: int
    modality: str
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in ("synthetic", "field", "web"):
            raise ValueError(f"unknown entry source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "source": self.source,
            "labels": [json.loads(scored_box_to_json(sb)) for sb in self.labels],
            "iteration": self.iteration,
            "modality": self.modality,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            image_id=d["image_id"],
            source=d["source"],
            labels=tuple(scored_box_from_json(json.dumps(sb)) for sb in d["labels"]),
            iteration=d["iteration"],
            modality=d["modality"],
            meta=d.get("meta", {}),
        )


@dataclass
class TrainingManifest:
    """Bounded training set with a refreshed validation split.

    The field-entry count never exceeds ``field_cap`` after curation;
    eviction removes the oldest-iteration field entries first and never
    touches synthetic or web entries. Validation ids are always disjoint
    from the ids used for training.
    """

    entries: Dict[str, ManifestEntry] = field(default_factory=dict)
    validation_ids: Tuple[str, ...] = ()
    field_cap: int = 6000
    field_floor: int = 4000
    iteration: int = 0

    def field_count(self) -> int:
        return sum(1 for e in self.entries.values() if e.source == "field")

    def training_entries(self) -> List[ManifestEntry]:
        val = set(self.validation_ids)
        return [e for e in self.entries.values() if e.image_id not in val]

    def validation_entries(self) -> List[ManifestEntry]:
        return [self.entries[i] for i in self.validation_ids if i in self.entries]

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "field_cap": self.field_cap,
            "field_floor": self.field_floor,
            "validation_ids": list(self.validation_ids),
            "entries": [e.to_dict() for e in self.entries.values()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingManifest":
        m = cls(
            field_cap=d["field_cap"],
            field_floor=d.get("field_floor", 4000),
            iteration=d["iteration"],
            validation_ids=tuple(d["validation_ids"]),
        )
        for ed in d["entries"]:
            e = ManifestEntry.from_dict(ed)
            m.entries[e.image_id] = e
        return m

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()


def curate_training_set(
    manifest: TrainingManifest,
    new_entries: Sequence[ManifestEntry],
    iteration: int,
    val_target: int = 1000,
    seed: int = 0,
) -> TrainingManifest:
    """Append new entries, evict over-cap field entries, refresh validation.

    Eviction removes oldest-iteration field entries (insertion order on
    ties) until the field count is back at the cap. The validation split
    is redrawn each iteration as a stratified sample over
    (has-labels, modality) strata of the field pool (falling back to the
    whole pool before any field data exists), capped at 20% of the pool.
    """
    out = TrainingManifest(
        entries=dict(manifest.entries),
        validation_ids=manifest.validation_ids,
        field_cap=manifest.field_cap,
        field_floor=manifest.field_floor,
        iteration=iteration,
    )
    for e in new_entries:
        if e.image_id in out.entries:
            raise ValueError(f"duplicate image id in manifest: {e.image_id!r}")
        out.entries[e.image_id] = replace(e, iteration=iteration)

    over = out.field_count() - out.field_cap
    if over > 0:
        field_ids = [i for i, e in out.entries.items() if e.source == "field"]
        field_ids.sort(key=lambda i: out.entries[i].iteration)  # stable: insertion order on ties
        for i in field_ids[:over]:
            del out.entries[i]

    pool = [e for e in out.entries.values() if e.source == "field"]
    if not pool:
        pool = list(out.entries.values())
    target = min(val_target, len(pool) // 5)
    rng = np.random.default_rng(stable_seed(seed, "validation", iteration))
    strata: Dict[Tuple[bool, str], List[str]] = {}
    for e in pool:
        strata.setdefault((bool(e.labels), e.modality), []).append(e.image_id)
    chosen: List[str] = []
    total = len(pool)
    for key in sorted(strata):
        ids = strata[key]
        quota = int(round(target * len(ids) / total))
        quota = min(quota, len(ids))
        if quota > 0:
            picks = rng.choice(len(ids), size=quota, replace=False)
            chosen.extend(ids[int(k)] for k in sorted(picks))
    out.validation_ids = tuple(chosen)
    return out


def pseudo_label_batch(
    batch: UploadBatch,
    target: str,
    hierarchy: LabelHierarchy,
    backend: ScoringBackend,
    stage2_threshold: float,
    stage1_threshold: Optional[float] = None,
    nms_iou: float = 0.5,
    depth: int = 1,
    use_descriptors: bool = False,
    make_handle: Optional[Callable[[FrameRecord], object]] = None,
) -> List[PseudoLabelSet]:
    """Label every uploaded frame; empty results are kept as explicit
    negatives. The stage-2 threshold must not be below the stage-1 one."""
    if stage1_threshold is not None and stage2_threshold < stage1_threshold:
        raise ValueError(
            f"stage-2 threshold {stage2_threshold} below stage-1 threshold {stage1_threshold}"
        )
    if make_handle is None:
        make_handle = oracle_handle
    out = []
    for item in batch.items:
        out.append(
            label_augmented_nms(
                make_handle(item.frame),
                target,
                hierarchy,
                backend,
                score_threshold=stage2_threshold,
                iou_threshold=nms_iou,
                depth=depth,
                use_descriptors=use_descriptors,
            )
        )
    return out


def oracle_handle(frame: FrameRecord) -> OracleImage:
    return OracleImage(
        image_id=frame.frame_id,
        dims=frame.image.dims,
        objects=tuple((g.box, g.label) for g in frame.ground_truth),
    )


# --- model versions and registry ---------------------------------------------


@dataclass(frozen=True)
class ModelVersion:
    version_id: int
    parent: Optional[int]
    manifest_hash: str
    training_config: Dict
    metrics: Dict
    created_iteration: int

    @property
    def name(self) -> str:
        return f"v{self.version_id}"

    def to_dict(self) -> dict:
        return {
            "version_id": self.version_id,
            "parent": self.parent,
            "manifest_hash": self.manifest_hash,
            "training_config": self.training_config,
            "metrics": self.metrics,
            "created_iteration": self.created_iteration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelVersion":
        return cls(
            version_id=d["version_id"],
            parent=d["parent"],
            manifest_hash=d["manifest_hash"],
            training_config=d["training_config"],
            metrics=d["metrics"],
            created_iteration=d["created_iteration"],
        )


class ModelRegistry:
    """Monotonic model versions with an active pointer and rollback."""

    def __init__(self):
        self.versions: Dict[int, ModelVersion] = {}
        self.blobs: Dict[int, bytes] = {}
        self.active: Optional[int] = None
        self.deployments: List[dict] = []

    def register(
        self,
        params: ToyDetectorParams,
        manifest_hash: str,
        training_config: Dict,
        metrics: Dict,
        created_iteration: int,
    ) -> ModelVersion:
        version_id = max(self.versions) + 1 if self.versions else 1
        version = ModelVersion(
            version_id=version_id,
            parent=self.active,
            manifest_hash=manifest_hash,
            training_config=training_config,
            metrics=metrics,
            created_iteration=created_iteration,
        )
        self.versions[version_id] = version
        self.blobs[version_id] = serialize_params(params)
        return version

    def params(self, version_id: int) -> ToyDetectorParams:
        return deserialize_params(self.blobs[version_id])

    def publish(self, version_id: int) -> dict:
        """Mark a version active. Idempotent; the previous active version
        is retained for rollback."""
        if version_id not in self.versions:
            raise KeyError(f"unknown model version {version_id}")
        if self.versions[version_id].metrics is None:
            raise ValueError("cannot publish a version without metrics")
        if self.active == version_id:
            return self.deployments[-1]
        previous = self.active
        self.active = version_id
        record = {
            "version_id": version_id,
            "previous": previous,
            "deployed_at_iteration": self.versions[version_id].created_iteration,
        }
        self.deployments.append(record)
        return record

    def rollback(self) -> dict:
        if self.active is None or self.versions[self.active].parent is None:
            raise ValueError("no parent version to roll back to")
        return self.publish(self.versions[self.active].parent)

    def model_update_payload(self, version_id: int) -> bytes:
        """Wire payload for a ModelUpdate message: u32 meta length, meta
        JSON, then the parameter blob."""
        meta = canonical_json(self.versions[version_id].to_dict()).encode("utf-8")
        blob = self.blobs[version_id]
        return len(meta).to_bytes(4, "big") + meta + blob

    def to_dict(self) -> dict:
        return {
            "versions": [self.versions[k].to_dict() for k in sorted(self.versions)],
            "active": self.active,
            "deployments": self.deployments,
        }

    def save(self, state_dir: Path) -> None:
        state_dir.mkdir(parents=True, exist_ok=True)
        (state_dir / "registry.json").write_text(canonical_json(self.to_dict()) + "\n")
        blob_dir = state_dir / "params"
        blob_dir.mkdir(exist_ok=True)
        for vid, blob in self.blobs.items():
            (blob_dir / f"v{vid}.bin").write_bytes(blob)

    @classmethod
    def load(cls, state_dir: Path) -> "ModelRegistry":
        reg = cls()
        data = json.loads((state_dir / "registry.json").read_text())
        for vd in data["versions"]:
            v = ModelVersion.from_dict(vd)
            reg.versions[v.version_id] = v
            reg.blobs[v.version_id] = (state_dir / "params" / f"v{v.version_id}.bin").read_bytes()
        reg.active = data["active"]
        reg.deployments = data["deployments"]
        return reg


def apply_model_update(payload: bytes) -> Tuple[ModelVersion, ToyDetectorParams]:
    """Edge-side decode of a ModelUpdate payload."""
    meta_len = int.from_bytes(payload[:4], "big")
    meta = json.loads(payload[4 : 4 + meta_len].decode("utf-8"))
    params = deserialize_params(payload[4 + meta_len :])
    return ModelVersion.from_dict(meta), params


# --- fine-tuning --------------------------------------------------------------


THRESHOLD_GRID = tuple(round(0.30 + 0.01 * i, 2) for i in range(66))


@dataclass(frozen=True)
class TrainConfig:
    frozen_fraction: float = 0.5
    fpr_cap: float = 0.02
    cal_max_pos: int = 150
    cal_max_neg: int = 250
    threshold_grid: Tuple[float, ...] = THRESHOLD_GRID
    stat_sample: int = 120


class NothingToLearnError(ValueError):
    pass


def _recent_first(entries: Sequence[ManifestEntry]) -> List[ManifestEntry]:
    indexed = list(enumerate(entries))
    indexed.sort(key=lambda t: (-t[1].iteration, t[0]))
    return [e for _, e in indexed]


def fine_tune(
    params: ToyDetectorParams,
    manifest: TrainingManifest,
    frozen_fraction: float,
    store: Mapping[str, RasterImage],
    config: TrainConfig = TrainConfig(),
    modalities: Optional[Sequence[str]] = None,
) -> ToyDetectorParams:
    """Re-estimate the tunable part of the detector from manifest labels.

    With ``frozen_fraction`` >= 0.5 the frozen feature statistics are
    held bit-identical; below that they are re-estimated alongside the
    templates. Per modality, templates and histograms are the means over
    labelled crops, and the detection threshold is recalibrated as the
    max-TPR ROC point subject to the configured FPR cap over recent
    training entries. Raises NothingToLearnError when the manifest holds
    no positive labels for the requested modalities.
    """
    if not (0.0 <= frozen_fraction < 1.0):
        raise ValueError("frozen_fraction must be in [0, 1)")
    training = manifest.training_entries()
    if modalities is None:
        modalities = sorted({e.modality for e in training})
    by_modality: Dict[str, List[ManifestEntry]] = {m: [] for m in modalities}
    for e in training:
        if e.modality in by_modality:
            by_modality[e.modality].append(e)

    total_positives = sum(
        1 for m in modalities for e in by_modality[m] if e.labels
    )
    if total_positives == 0:
        raise NothingToLearnError("nothing to learn: manifest holds no positive labels")

    feature_stats = dict(params.feature_stats)
    class_models = {m: dict(v) for m, v in params.class_models.items()}

    for modality in modalities:
        entries = by_modality[modality]
        if not entries:
            continue
        positives = [e for e in entries if e.labels]
        negatives = [e for e in entries if not e.labels]
        if frozen_fraction < 0.5 or modality not in feature_stats:
            sample = _recent_first(entries)[: config.stat_sample]
            feature_stats[modality] = estimate_feature_stats(
                [store[e.image_id] for e in sample]
            )
        if not positives:
            continue
        crops_by_class: Dict[str, List[np.ndarray]] = {}
        for e in positives:
            gray = store[e.image_id].gray()
            for sb in e.labels:
                crops_by_class.setdefault(sb.label, []).append(
                    canonical_crop(gray, sb.box, params.canonical_size)
                )
        models: Dict[str, ClassModel] = {}
        for cls in sorted(crops_by_class):
            previous = class_models.get(modality, {}).get(cls)
            provisional = previous.threshold if previous else 0.5
            models[cls] = estimate_class_model(
                crops_by_class[cls], params.hist_bins, provisional
            )
        probe_params = replace(
            params,
            feature_stats=feature_stats,
            class_models={**class_models, modality: models},
        )
        thresholds = _calibrate_thresholds(
            probe_params, modality, positives, negatives, store, config
        )
        for cls, threshold in thresholds.items():
            models[cls] = replace(models[cls], threshold=threshold)
        class_models[modality] = models

    return replace(params, feature_stats=feature_stats, class_models=class_models)


def _calibrate_thresholds(
    params: ToyDetectorParams,
    modality: str,
    positives: Sequence[ManifestEntry],
    negatives: Sequence[ManifestEntry],
    store: Mapping[str, RasterImage],
    config: TrainConfig,
) -> Dict[str, float]:
    """Per-class max-TPR threshold with FPR at or below the cap, swept over
    cached raw scores of recent entries. Falls back to the most
    conservative grid point when the cap is infeasible."""
    detector = ToyDetector("calibration", params)
    pos = _recent_first(positives)[: config.cal_max_pos]
    neg = _recent_first(negatives)[: config.cal_max_neg]
    pos_scored = [(detector.raw_scores(store[e.image_id]), [sb.box for sb in e.labels]) for e in pos]
    neg_scored = [detector.raw_scores(store[e.image_id]) for e in neg]
    out: Dict[str, float] = {}
    for cls in sorted(params.class_models.get(modality, {})):
        pos_cls = [
            ([d for d in dets if d.label == cls], boxes) for dets, boxes in pos_scored
        ]
        neg_cls = [[d for d in dets if d.label == cls] for dets in neg_scored]
        points = roc_points(pos_cls, neg_cls, config.threshold_grid)
        try:
            out[cls] = select_operating_point(points, config.fpr_cap).threshold
        except ValueError:
            out[cls] = max(config.threshold_grid)
    return out


def adapt_modality(
    params: ToyDetectorParams,
    manifest: TrainingManifest,
    store: Mapping[str, RasterImage],
    config: TrainConfig = TrainConfig(),
) -> ToyDetectorParams:
    """Thermal-channel adaptation: the fine-tune path restricted to
    1-channel entries. Parameters of other modalities are untouched."""
    thermal = [e for e in manifest.training_entries() if e.modality == "thermal"]
    if not thermal:
        raise NothingToLearnError("nothing to learn: manifest holds no thermal entries")
    return fine_tune(
        params,
        manifest,
        config.frozen_fraction,
        store,
        config=config,
        modalities=["thermal"],
    )


# --- validation metrics snapshot ---------------------------------------------


def validation_metrics(
    params: ToyDetectorParams,
    manifest: TrainingManifest,
    store: Mapping[str, RasterImage],
    target: str,
) -> Dict:
    """Detector metrics against the manifest's validation split, using the
    pseudo-labels as ground truth. Range groups come from entry metadata
    when present."""
    detector = ToyDetector("validation", params)
    entries = manifest.validation_entries()
    tprs: Dict[str, List[float]] = {RANGE_NEAR: [], RANGE_FAR: [], "all": []}
    neg_flagged = 0
    neg_total = 0
    ap_dets: List[Tuple[str, ScoredBox]] = []
    ap_gt: Dict[str, List[BBox]] = {}
    for e in entries:
        try:
            dets = detector.infer(store[e.image_id])
        except ModalityMismatchError:
            continue
        if e.labels:
            value = frame_tpr(dets, [sb.box for sb in e.labels])
            tprs["all"].append(value)
            group = e.meta.get("range_group")
            if group in tprs:
                tprs[group].append(value)
            ap_gt[e.image_id] = [sb.box for sb in e.labels]
            for d in dets:
                if d.label == target:
                    ap_dets.append((e.image_id, d))
        else:
            neg_total += 1
            if dets:
                neg_flagged += 1
    def mean_or_none(xs):
        return sum(xs) / len(xs) if xs else None

    metrics = {
        "mtpr": {k: mean_or_none(v) for k, v in tprs.items()},
        "fpr": (neg_flagged / neg_total) if neg_total else None,
        "map": None,
    }
    if ap_gt:
        metrics["map"] = average_precision(ap_dets, ap_gt)
    return metrics


# --- cloud node ----------------------------------------------------------------


@dataclass
class CloudConfig:
    target_class: str = "cassowary"
    stage1_threshold: float = 0.5
    stage2_threshold: float = 0.65
    nms_iou: float = 0.5
    expansion_depth: int = 1
    use_descriptors: bool = True
    field_cap: int = 6000
    field_floor: int = 4000
    val_target: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)


class CloudNode:
    """Owns the manifest, image store, detector parameters and registry."""

    def __init__(
        self,
        hierarchy: LabelHierarchy,
        backend: ScoringBackend,
        config: CloudConfig = CloudConfig(),
        seed: int = 0,
        state_dir: Optional[Path] = None,
    ):
        self.hierarchy = hierarchy
        self.backend = backend
        self.config = config
        self.seed = seed
        self.state_dir = Path(state_dir) if state_dir else None
        self.manifest = TrainingManifest(
            field_cap=config.field_cap, field_floor=config.field_floor
        )
        self.store: Dict[str, RasterImage] = {}
        self.registry = ModelRegistry()
        self.params = ToyDetectorParams()
        self.iteration = 0

    def add_entries(self, entries: Sequence[ManifestEntry], images: Mapping[str, RasterImage],
                    iteration: Optional[int] = None) -> None:
        it = self.iteration if iteration is None else iteration
        self.manifest = curate_training_set(
            self.manifest, entries, it, val_target=self.config.val_target, seed=self.seed
        )
        for image_id, image in images.items():
            self.store[image_id] = image

    def ingest_batch(self, batch: UploadBatch, iteration: int) -> List[PseudoLabelSet]:
        """Pseudo-label an uploaded batch and curate the results in."""
        label_sets = pseudo_label_batch(
            batch,
            self.config.target_class,
            self.hierarchy,
            self.backend,
            stage2_threshold=self.config.stage2_threshold,
            stage1_threshold=self.config.stage1_threshold,
            nms_iou=self.config.nms_iou,
            depth=self.config.expansion_depth,
            use_descriptors=self.config.use_descriptors,
        )
        entries = []
        images = {}
        for item, ps in zip(batch.items, label_sets):
            frame = item.frame
            meta = {"camera": frame.camera_id, "timestamp": frame.timestamp}
            group = frame.range_group(self.config.target_class)
            if group:
                meta["range_group"] = group
            entries.append(
                ManifestEntry(
                    image_id=frame.frame_id,
                    source="field",
                    labels=ps.boxes,
                    iteration=iteration,
                    modality=frame.modality,
                    meta=meta,
                )
            )
            images[frame.frame_id] = frame.image
        self.iteration = iteration
        self.add_entries(entries, images, iteration)
        return label_sets

    def fine_tune(self, frozen_fraction: Optional[float] = None) -> Tuple[ToyDetectorParams, ModelVersion]:
        frac = self.config.train.frozen_fraction if frozen_fraction is None else frozen_fraction
        self.params = fine_tune(
            self.params, self.manifest, frac, self.store, config=self.config.train
        )
        metrics = validation_metrics(
            self.params, self.manifest, self.store, self.config.target_class
        )
        version = self.registry.register(
            self.params,
            manifest_hash=self.manifest.hash(),
            training_config={
                "frozen_fraction": frac,
                "fpr_cap": self.config.train.fpr_cap,
                "stage2_threshold": self.config.stage2_threshold,
            },
            metrics=metrics,
            created_iteration=self.manifest.iteration,
        )
        return self.params, version

    def adapt_modality(self) -> Tuple[ToyDetectorParams, ModelVersion]:
        self.params = adapt_modality(
            self.params, self.manifest, self.store, config=self.config.train
        )
        metrics = validation_metrics(
            self.params, self.manifest, self.store, self.config.target_class
        )
        version = self.registry.register(
            self.params,
            manifest_hash=self.manifest.hash(),
            training_config={"frozen_fraction": self.config.train.frozen_fraction, "modality": "thermal"},
            metrics=metrics,
            created_iteration=self.manifest.iteration,
        )
        return self.params, version

    def publish_model(self, version_id: int) -> dict:
        record = self.registry.publish(version_id)
        if self.state_dir:
            self.save()
        return record

    def save(self) -> None:
        if not self.state_dir:
            return
        self.state_dir.mkdir(parents=True, exist_ok=True)
        (self.state_dir / "manifest.json").write_text(
            canonical_json(self.manifest.to_dict()) + "\n"
        )
        self.registry.save(self.state_dir)
