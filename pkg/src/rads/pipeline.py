"""End-to-end orchestration: stage-1 bootstrap on synthetic composites,
then the iterative field loop (edge detection and logging, budgeted upload
over the wire protocol, cloud pseudo-labelling, curation, fine-tuning and
model publication), with every model version evaluated on one fixed
held-out stream. Also the data-shift experiment and the label-augmentation
ablation sweep.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox, ScoredBox
from .cloud import (
    CloudConfig,
    CloudNode,
    ManifestEntry,
    ModelVersion,
    TrainConfig,
    apply_model_update,
    canonical_json,
    oracle_handle,
)
from .detector import ToyDetector, ToyDetectorParams
from .edge import (
    EdgeConfig,
    EdgeNode,
    FrameRecord,
    GroundTruthObject,
    UploadBatch,
    deserialize_upload_batch,
    serialize_upload_batch,
)
from .images import RasterImage
from .labelaug import (
    LabelHierarchy,
    OracleImage,
    SimulatedOracleBackend,
    builtin_hierarchy,
    label_augmented_nms,
    stable_seed,
)
from .metrics import (
    RANGE_FAR,
    RANGE_NEAR,
    average_precision,
    classify_events,
    fpr as frame_level_fpr,
    frame_tpr,
    mtpr,
    roc_points,
)
from .scenario import ScenarioConfig
from .synth import OtsuMaskProvider, PlacementPolicy, extract_instance, generate_synthetic_set
from .transport import (
    BandwidthLedger,
    InProcChannel,
    Message,
    MessageType,
    Session,
    encode,
    pump_until,
)
from .world import (
    HoldoutSet,
    WebImage,
    WorldSim,
    _apparent_height,
    _stamp_target,
    _to_image,
    build_holdout,
    make_web_images,
    render_background_frames,
)


def make_backend(config: ScenarioConfig) -> SimulatedOracleBackend:
    return SimulatedOracleBackend(
        affinity=config.oracle.affinity,
        noise_amp=config.oracle.noise_amp,
        jitter_px=config.oracle.jitter_px,
        seed=config.seed,
        proposals_per_object=config.oracle.proposals_per_object,
    )


def build_cloud(config: ScenarioConfig, state_dir: Optional[Path] = None) -> CloudNode:
    cloud_cfg = CloudConfig(
        target_class=config.target_class,
        stage1_threshold=config.cloud.stage1_threshold,
        stage2_threshold=config.cloud.stage2_threshold,
        nms_iou=config.cloud.nms_iou,
        expansion_depth=config.cloud.expansion_depth,
        use_descriptors=config.cloud.use_descriptors,
        field_cap=config.cloud.field_cap,
        field_floor=config.cloud.field_floor,
        val_target=config.cloud.val_target,
        train=TrainConfig(
            frozen_fraction=config.cloud.frozen_fraction,
            fpr_cap=config.cloud.fpr_cap,
        ),
    )
    return CloudNode(
        hierarchy=builtin_hierarchy(),
        backend=make_backend(config),
        config=cloud_cfg,
        seed=config.seed,
        state_dir=state_dir,
    )


# --- stage 1 -------------------------------------------------------------------


def _labelled_instances(
    cloud: CloudNode, web_images: Sequence[WebImage], threshold: float, config: ScenarioConfig
):
    """Label object-centric images and cut out the masked instances."""
    provider = OtsuMaskProvider()
    instances = []
    labelled: List[Tuple[WebImage, Tuple[ScoredBox, ...]]] = []
    for wi in web_images:
        handle = OracleImage(image_id=wi.image_id, dims=wi.image.dims, objects=wi.objects)
        ps = label_augmented_nms(
            handle,
            config.target_class,
            cloud.hierarchy,
            cloud.backend,
            score_threshold=threshold,
            iou_threshold=config.cloud.nms_iou,
            depth=config.cloud.expansion_depth,
            use_descriptors=config.cloud.use_descriptors,
        )
        labelled.append((wi, ps.boxes))
        for sb in ps.boxes:
            try:
                instances.append(
                    extract_instance(wi.image, sb.box, provider, config.target_class)
                )
            except ValueError:
                continue
    return instances, labelled


def run_stage1(config: ScenarioConfig, cloud: CloudNode) -> ModelVersion:
    """Bootstrap the first model from web-analog instances composited onto
    field backgrounds, plus distractor-bearing synthetic negatives."""
    spec = config.stage1
    entries: List[ManifestEntry] = []
    images: Dict[str, RasterImage] = {}

    for modality, n_web, n_syn, n_neg in (
        ("rgb", spec.web_rgb_images, spec.synthetic_rgb, spec.synthetic_negatives_rgb),
        ("thermal", spec.web_thermal_images, spec.synthetic_thermal, spec.synthetic_negatives_thermal),
    ):
        web = make_web_images(config, modality, n_web)
        instances, labelled = _labelled_instances(cloud, web, config.cloud.stage1_threshold, config)
        if not instances:
            raise ValueError(f"stage 1 produced no {modality} instances to composite")
        for wi, boxes in labelled:
            if not boxes:
                continue
            entries.append(
                ManifestEntry(
                    image_id=wi.image_id,
                    source="web",
                    labels=boxes,
                    iteration=0,
                    modality=modality,
                )
            )
            images[wi.image_id] = wi.image
        backgrounds = [
            f.image
            for f in render_background_frames(
                config, modality, spec.backgrounds_per_modality, tag="bg"
            )
        ]
        samples = generate_synthetic_set(
            instances,
            backgrounds,
            n=n_syn,
            policy=PlacementPolicy(
                scale_range=spec.scale_range,
                instances_per_sample=spec.instances_per_sample,
                sigma=spec.blend_sigma,
            ),
            seed=stable_seed(config.seed, "synth", modality),
            label=config.target_class,
        )
        for s in samples:
            sid = f"{modality}-{s.provenance['sample_id']}"
            entries.append(
                ManifestEntry(
                    image_id=sid,
                    source="synthetic",
                    labels=tuple(s.labels),
                    iteration=0,
                    modality=modality,
                )
            )
            images[sid] = s.image
        negatives = render_background_frames(
            config,
            modality,
            n_neg,
            tag="synneg",
            distractor_classes=("heron", "vehicle", "vegetation", "shadow"),
        )
        for f in negatives:
            entries.append(
                ManifestEntry(
                    image_id=f.frame_id,
                    source="synthetic",
                    labels=(),
                    iteration=0,
                    modality=modality,
                )
            )
            images[f.frame_id] = f.image

    cloud.add_entries(entries, images, iteration=0)
    _, version = cloud.fine_tune(frozen_fraction=0.0)
    cloud.publish_model(version.version_id)
    return version


# --- held-out evaluation ---------------------------------------------------------


ROC_GRID = tuple(round(0.30 + 0.01 * i, 2) for i in range(66))


def evaluate_on_holdout(
    params: ToyDetectorParams,
    holdout: HoldoutSet,
    target: str,
    model_name: str,
    with_roc: bool = False,
) -> Dict:
    detector = ToyDetector(model_name, params)
    frame_results: Dict[str, float] = {}
    dets_per_frame: Dict[str, List[ScoredBox]] = {}
    raw_per_frame: Dict[str, List[ScoredBox]] = {}
    for fid, frame in holdout.frames.items():
        raw = detector.raw_scores(frame.image)
        raw_per_frame[fid] = raw
        threshold_map = detector.params.class_models.get(frame.modality, {})
        dets = [d for d in raw if d.label in threshold_map and d.score >= threshold_map[d.label].threshold]
        dets_per_frame[fid] = dets
        gts = [g.box for g in frame.ground_truth if g.label == target]
        if gts:
            frame_results[fid] = frame_tpr(dets, gts)

    rgb_cases = [c for c in holdout.cases if c.modality == "rgb"]
    thermal_cases = [c for c in holdout.cases if c.modality == "thermal"]
    metrics = {
        "model": model_name,
        "mtpr_near": mtpr(rgb_cases, frame_results, RANGE_NEAR),
        "mtpr_far": mtpr(rgb_cases, frame_results, RANGE_FAR),
        "mtpr_all": mtpr(rgb_cases, frame_results),
        "mtpr_thermal": mtpr(thermal_cases, frame_results) if thermal_cases else None,
        "fpr": frame_level_fpr(holdout.negatives_rgb, dets_per_frame),
        "fpr_thermal": (
            frame_level_fpr(holdout.negatives_thermal, dets_per_frame)
            if holdout.negatives_thermal
            else None
        ),
    }
    ap_dets: List[Tuple[str, ScoredBox]] = []
    ap_gt: Dict[str, List[BBox]] = {}
    for c in rgb_cases:
        for fid in c.frame_ids:
            ap_gt[fid] = [g.box for g in holdout.frames[fid].ground_truth if g.label == target]
    for fid in list(ap_gt) + holdout.negatives_rgb:
        for d in dets_per_frame.get(fid, []):
            if d.label == target:
                ap_dets.append((fid, d))
    metrics["ap"] = average_precision(ap_dets, ap_gt) if ap_gt else None

    if with_roc:
        roc = {}
        for group, cases in (("near", [c for c in rgb_cases if c.range_group == RANGE_NEAR]),
                             ("far", [c for c in rgb_cases if c.range_group == RANGE_FAR]),
                             ("thermal", thermal_cases)):
            if not cases:
                continue
            positives = []
            for c in cases:
                for fid in c.frame_ids:
                    frame = holdout.frames[fid]
                    positives.append(
                        (raw_per_frame[fid], [g.box for g in frame.ground_truth if g.label == target])
                    )
            negs = holdout.negatives_thermal if group == "thermal" else holdout.negatives_rgb
            negatives = [raw_per_frame[fid] for fid in negs]
            points = roc_points(positives, negatives, ROC_GRID)
            roc[group] = [[p.threshold, p.tpr, p.fpr] for p in points]
        metrics["roc"] = roc
    return metrics


def evaluate_fpr_on_frames(params: ToyDetectorParams, frames: Sequence[FrameRecord],
                           model_name: str = "probe") -> float:
    detector = ToyDetector(model_name, params)
    dets = {f.frame_id: detector.infer(f.image) for f in frames}
    return frame_level_fpr([f.frame_id for f in frames], dets)


# --- stage 2 loop ----------------------------------------------------------------


@dataclass
class RunReport:
    config_digest: str
    seed: int
    target: str
    iterations: List[Dict] = field(default_factory=list)
    events: Dict = field(default_factory=dict)
    drift: Optional[Dict] = None
    ablation: Optional[List[Dict]] = None
    total_frames: int = 0
    total_uploaded: int = 0

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "seed": self.seed,
            "target": self.target,
            "iterations": self.iterations,
            "events": self.events,
            "drift": self.drift,
            "ablation": self.ablation,
            "total_frames": self.total_frames,
            "total_uploaded": self.total_uploaded,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict()) + "\n"


def config_digest(config: ScenarioConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()[:16]


def run_stage2(
    config: ScenarioConfig,
    iterations: Optional[int] = None,
    state_dir: Optional[Path] = None,
) -> Tuple[RunReport, Dict]:
    """Full loop: stage 1 bootstrap, then k field iterations. Returns the
    deterministic run report plus wall-clock timings (kept out of the
    report so reports stay byte-identical across reruns)."""
    timings: Dict = {}
    t0 = time.perf_counter()
    k = config.iterations if iterations is None else iterations

    cloud = build_cloud(config, state_dir=state_dir)
    v1 = run_stage1(config, cloud)
    timings["stage1_s"] = time.perf_counter() - t0

    holdout = build_holdout(config)
    report = RunReport(
        config_digest=config_digest(config),
        seed=config.seed,
        target=config.target_class,
    )
    row = evaluate_on_holdout(cloud.registry.params(v1.version_id), holdout,
                              config.target_class, v1.name, with_roc=True)
    row.update({"iteration": 0, "uploaded": 0, "window_frames": 0,
                "validation": v1.metrics, "version_id": v1.version_id})
    report.iterations.append(row)

    sim = WorldSim(config, total_days=k * config.days_per_iteration)
    edge = EdgeNode(
        ToyDetector(v1.name, cloud.registry.params(v1.version_id)),
        config=config.edge,
        seed=config.seed,
    )

    clock = [0.0]
    edge_ch, cloud_ch = InProcChannel.pair(config.transport.loss_rate, seed=config.seed)
    edge_session = Session(edge_ch, "edge", clock=lambda: clock[0], ack_timeout=0.05)
    cloud_session = Session(cloud_ch, "cloud", clock=lambda: clock[0], ack_timeout=0.05)
    ledger = BandwidthLedger(
        budget_bytes=config.transport.budget_bytes,
        window_seconds=config.transport.budget_window_s,
    )

    active_params = cloud.registry.params(v1.version_id)
    drift_start = sim.schedule.drift_start_s
    pre_drift_model: Optional[int] = None
    post_drift_model: Optional[int] = None

    timings["iterations_s"] = []
    for i in range(1, k + 1):
        t_iter = time.perf_counter()
        day0 = (i - 1) * config.days_per_iteration
        day1 = i * config.days_per_iteration
        window_start_frames = edge.total_frames
        if drift_start is not None and pre_drift_model is None:
            if day0 * config.world.day_seconds <= drift_start < day1 * config.world.day_seconds:
                pre_drift_model = cloud.registry.active
        for frame in sim.frames(day0, day1):
            edge.ingest_frame(frame)
        batch = edge.harvest_upload()
        payload = serialize_upload_batch(batch)
        ledger.roll(day0 * config.world.day_seconds)
        frame_len = len(encode(Message(type=MessageType.FRAME_BATCH, seq=1, payload=payload)))
        if frame_len > ledger.remaining():
            raise RuntimeError("upload batch exceeds the bandwidth window budget")
        ledger.charge(frame_len)
        edge_session.queue(MessageType.FRAME_BATCH, payload)
        pump_until(
            [edge_session, cloud_session],
            lambda: bool(cloud_session._inbox) and edge_session.idle,
            clock=clock,
        )
        incoming = cloud_session.inbox()[0]
        received = deserialize_upload_batch(incoming.payload)
        cloud.ingest_batch(received, iteration=i)
        params, version = cloud.fine_tune()
        cloud.publish_model(version.version_id)
        if pre_drift_model is not None and post_drift_model is None and version.version_id != pre_drift_model:
            post_drift_model = version.version_id
        update_payload = cloud.registry.model_update_payload(version.version_id)
        cloud_session.queue(MessageType.MODEL_UPDATE, update_payload)
        pump_until(
            [edge_session, cloud_session],
            lambda: bool(edge_session._inbox) and cloud_session.idle,
            clock=clock,
        )
        update = edge_session.inbox()[0]
        meta, new_params = apply_model_update(update.payload)
        edge.set_model(ToyDetector(meta.name, new_params))
        active_params = new_params

        row = evaluate_on_holdout(new_params, holdout, config.target_class, meta.name,
                                  with_roc=True)
        row.update({
            "iteration": i,
            "uploaded": len(batch.items),
            "window_frames": edge.total_frames - window_start_frames,
            "validation": version.metrics,
            "version_id": version.version_id,
        })
        report.iterations.append(row)
        timings["iterations_s"].append(time.perf_counter() - t_iter)

    edge.flush_events()
    spans = [e.span() for e in edge.events]
    totals, per_day, labels = classify_events(
        spans, sim.schedule.target_spans(), day_seconds=config.world.day_seconds
    )
    for event, label in zip(edge.events, labels):
        event.classification = label
    report.events = {"totals": totals, "per_day": per_day}
    report.total_frames = edge.total_frames
    report.total_uploaded = edge.total_uploaded

    if drift_start is not None and pre_drift_model is not None:
        params_by_id = {
            vid: cloud.registry.params(vid) for vid in cloud.registry.versions
        }
        report.drift = evaluate_drift(config, params_by_id, pre_drift_model, post_drift_model)

    if config.ablation.enabled:
        report.ablation = run_label_ablation(config)

    timings["total_s"] = time.perf_counter() - t0
    if state_dir:
        cloud.save()
    return report, timings


def evaluate_drift(
    config: ScenarioConfig,
    params_by_id: Dict[int, ToyDetectorParams],
    pre_model: int,
    post_model: Optional[int],
) -> Dict:
    """FPR of the model deployed at drift onset on pre- and post-drift
    negatives, and of the next fine-tuned model on the post-drift set."""
    pre_frames = render_background_frames(
        config, "rgb", 240, tag="negpre", drifted=False,
        distractor_classes=("heron", "vehicle", "vegetation", "shadow"),
    )
    post_frames = render_background_frames(
        config, "rgb", 240, tag="negpost", drifted=True,
        distractor_classes=("heron", "vehicle", "vegetation", "shadow"),
    )
    pre_params = params_by_id[pre_model]
    out = {
        "pre_drift_model": f"v{pre_model}",
        "fpr_pre_model_pre_data": evaluate_fpr_on_frames(pre_params, pre_frames),
        "fpr_pre_model_post_data": evaluate_fpr_on_frames(pre_params, post_frames),
    }
    if post_model is not None and post_model in params_by_id:
        out["post_drift_model"] = f"v{post_model}"
        out["fpr_post_model_post_data"] = evaluate_fpr_on_frames(
            params_by_id[post_model], post_frames
        )
    return out


# --- label-augmentation ablation --------------------------------------------------


# --- two-process mode (same loop split over a TCP stream) -------------------------


def run_cloud_process(config: ScenarioConfig, host: str, port: int,
                      state_dir: Optional[Path] = None) -> None:
    """Cloud half of the loop: trains stage 1, then serves one fine-tune
    round per received frame batch. Listens on host:port."""
    from .transport import TcpChannel

    channel = TcpChannel.listen(host, port)
    session = Session(channel, "cloud", ack_timeout=0.2)
    cloud = build_cloud(config, state_dir=state_dir)
    v1 = run_stage1(config, cloud)
    session.send(MessageType.MODEL_UPDATE, cloud.registry.model_update_payload(v1.version_id))
    for i in range(1, config.iterations + 1):
        incoming = session.receive(timeout=300.0)
        if incoming.type != MessageType.FRAME_BATCH:
            raise RuntimeError(f"expected FrameBatch, got {incoming.type.name}")
        batch = deserialize_upload_batch(incoming.payload)
        cloud.ingest_batch(batch, iteration=i)
        _, version = cloud.fine_tune()
        cloud.publish_model(version.version_id)
        session.send(MessageType.MODEL_UPDATE, cloud.registry.model_update_payload(version.version_id))
    if state_dir:
        cloud.save()
    channel.close()


def run_edge_process(config: ScenarioConfig, host: str, port: int) -> Tuple[RunReport, Dict]:
    """Edge half: simulates the world, runs the edge node, uploads batches,
    applies model updates, and assembles the run report (it holds every
    published parameter blob, so held-out evaluation happens here)."""
    from .transport import TcpChannel

    timings: Dict = {}
    t0 = time.perf_counter()
    channel = TcpChannel.connect(host, port)
    session = Session(channel, "edge", ack_timeout=0.2)

    first = session.receive(timeout=600.0)
    meta, params = apply_model_update(first.payload)
    params_by_id: Dict[int, ToyDetectorParams] = {meta.version_id: params}

    holdout = build_holdout(config)
    report = RunReport(
        config_digest=config_digest(config),
        seed=config.seed,
        target=config.target_class,
    )
    row = evaluate_on_holdout(params, holdout, config.target_class, meta.name, with_roc=True)
    row.update({"iteration": 0, "uploaded": 0, "window_frames": 0,
                "validation": meta.metrics, "version_id": meta.version_id})
    report.iterations.append(row)

    k = config.iterations
    sim = WorldSim(config, total_days=k * config.days_per_iteration)
    edge = EdgeNode(ToyDetector(meta.name, params), config=config.edge, seed=config.seed)
    drift_start = sim.schedule.drift_start_s
    pre_drift_model: Optional[int] = None
    post_drift_model: Optional[int] = None
    active_version = meta.version_id

    for i in range(1, k + 1):
        day0 = (i - 1) * config.days_per_iteration
        day1 = i * config.days_per_iteration
        window_start_frames = edge.total_frames
        if drift_start is not None and pre_drift_model is None:
            if day0 * config.world.day_seconds <= drift_start < day1 * config.world.day_seconds:
                pre_drift_model = active_version
        for frame in sim.frames(day0, day1):
            edge.ingest_frame(frame)
        batch = edge.harvest_upload()
        session.send(MessageType.FRAME_BATCH, serialize_upload_batch(batch), timeout=300.0)
        update = session.receive(timeout=600.0)
        meta, params = apply_model_update(update.payload)
        params_by_id[meta.version_id] = params
        edge.set_model(ToyDetector(meta.name, params))
        active_version = meta.version_id
        if pre_drift_model is not None and post_drift_model is None and meta.version_id != pre_drift_model:
            post_drift_model = meta.version_id
        row = evaluate_on_holdout(params, holdout, config.target_class, meta.name, with_roc=True)
        row.update({"iteration": i, "uploaded": len(batch.items),
                    "window_frames": edge.total_frames - window_start_frames,
                    "validation": meta.metrics, "version_id": meta.version_id})
        report.iterations.append(row)

    edge.flush_events()
    spans = [e.span() for e in edge.events]
    totals, per_day, labels = classify_events(
        spans, sim.schedule.target_spans(), day_seconds=config.world.day_seconds
    )
    for event, label in zip(edge.events, labels):
        event.classification = label
    report.events = {"totals": totals, "per_day": per_day}
    report.total_frames = edge.total_frames
    report.total_uploaded = edge.total_uploaded
    if drift_start is not None and pre_drift_model is not None:
        report.drift = evaluate_drift(config, params_by_id, pre_drift_model, post_drift_model)
    if config.ablation.enabled:
        report.ablation = run_label_ablation(config)
    timings["total_s"] = time.perf_counter() - t0
    channel.close()
    return report, timings


def ablation_backend(config: ScenarioConfig) -> SimulatedOracleBackend:
    """Documented confusion configuration: the target label is weak on true
    instances while one child label is strong; the similar distractor
    stays below every swept threshold."""
    spec = config.ablation
    target = config.target_class
    affinity = {
        (target, target): spec.target_affinity,
        (target, spec.child_label): spec.child_affinity,
        ("heron", target): 0.18,
        ("heron", spec.child_label): 0.25,
        ("vehicle", target): 0.05,
        ("vegetation", target): 0.08,
        ("shadow", target): 0.05,
    }
    return SimulatedOracleBackend(
        affinity=affinity,
        noise_amp=0.0,
        jitter_px=1.0,
        seed=config.seed,
        proposals_per_object=config.oracle.proposals_per_object,
    )


def run_label_ablation(config: ScenarioConfig) -> List[Dict]:
    """Pseudo-label quality (AP of the emitted boxes against ground truth)
    with and without label augmentation, swept over score thresholds."""
    spec = config.ablation
    backend = ablation_backend(config)
    hierarchy = builtin_hierarchy()
    positives = []
    near_lo, near_hi = config.world.range_near_m
    sim_negatives = render_background_frames(
        config, "rgb", spec.negative_frames, tag="ablneg",
        distractor_classes=("heron", "vehicle"),
    )
    sim = WorldSim(config)
    for kid in range(spec.positive_frames):
        rng = np.random.default_rng(stable_seed(config.seed, "ablpos", kid))
        canvas = sim._background("rgb", False, rng)
        h, w = canvas.shape
        range_m = float(rng.uniform(near_lo, near_hi))
        cx = float(rng.uniform(14, w - 14))
        cy = float(rng.uniform(14, h - 14))
        box = _stamp_target(canvas, cx, cy, _apparent_height(config.world, range_m, h),
                            "field", "rgb", rng)
        if box is None:
            continue
        positives.append(
            FrameRecord(
                frame_id=f"ablpos-{kid:04d}",
                camera_id="abl",
                modality="rgb",
                timestamp=float(kid),
                image=_to_image(canvas, "rgb"),
                ground_truth=(
                    GroundTruthObject(box=box, label=config.target_class, range_m=None),
                ),
            )
        )
    frames = positives + list(sim_negatives)
    gt = {
        f.frame_id: [g.box for g in f.ground_truth if g.label == config.target_class]
        for f in positives
    }
    rows = []
    for threshold in spec.thresholds:
        row = {"threshold": threshold}
        for name, depth in (("map_with", config.cloud.expansion_depth), ("map_without", 0)):
            dets: List[Tuple[str, ScoredBox]] = []
            for f in frames:
                ps = label_augmented_nms(
                    oracle_handle(f),
                    config.target_class,
                    hierarchy,
                    backend,
                    score_threshold=threshold,
                    iou_threshold=config.cloud.nms_iou,
                    depth=depth,
                    use_descriptors=False,
                )
                for sb in ps.boxes:
                    dets.append((f.frame_id, sb))
            row[name] = average_precision(dets, gt)
        rows.append(row)
    return rows
