"""Field-side node: detector inference, continuous and event-triggered
logging, Bayesian per-camera presence beliefs fused across cameras, a
hysteresis event gate with pre/post frame buffers, and budget-limited
upload selection.

Threading: per-camera ingestion may run concurrently (beliefs and ring
buffers are camera-local, a lock guards shared structures); fusion and
the event gate are a single serialized consumer of belief snapshots.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .boxes import BBox, ScoredBox, scored_box_from_json, scored_box_to_json
from .detector import ModalityMismatchError, modality_of
from .images import RasterImage, image_from_pnm_bytes, image_extension, pnm_bytes, write_pnm
from .labelaug import stable_seed
from .metrics import RANGE_FAR, RANGE_NEAR

RANGE_BOUNDARY_M = 100.0


@dataclass(frozen=True)
class GroundTruthObject:
    box: BBox
    label: str
    range_m: Optional[float] = None


@dataclass(frozen=True)
class FrameRecord:
    """One camera frame; ground truth is attached by the simulator only."""

    frame_id: str
    camera_id: str
    modality: str
    timestamp: float
    image: RasterImage
    ground_truth: Tuple[GroundTruthObject, ...] = ()

    def range_group(self, target_class: str) -> Optional[str]:
        ranges = [
            g.range_m
            for g in self.ground_truth
            if g.label == target_class and g.range_m is not None
        ]
        if not ranges:
            return None
        return RANGE_NEAR if min(ranges) < RANGE_BOUNDARY_M else RANGE_FAR


class DetectorModel(Protocol):
    """Deployable detector contract; inference must be deterministic per
    (model id, image). Training happens cloud-side."""

    model_id: str

    @property
    def modalities(self) -> frozenset:
        ...

    def infer(self, image: RasterImage) -> List[ScoredBox]:
        ...


@dataclass(frozen=True)
class PresenceBelief:
    camera_id: str
    posterior: float
    updated_at: float

    def __post_init__(self):
        if not (0.0 <= self.posterior <= 1.0):
            raise ValueError(f"posterior must be in [0, 1], got {self.posterior}")


@dataclass(frozen=True)
class EdgeConfig:
    stationary_prior: float = 0.001
    lr_det: float = 20.0
    lr_nodet: float = 0.5
    relax_rate: float = 0.05  # 1/s relaxation toward the stationary prior
    detection_gate: float = 0.5  # score needed for a detection to count as evidence
    t_on: float = 0.8
    t_off: float = 0.3
    hold_s: float = 3.0
    pre_s: float = 12.0
    post_s: float = 12.0
    log_stride: int = 10
    upload_fraction: float = 0.015


def bayes_update(
    belief: PresenceBelief,
    detections: Sequence[ScoredBox],
    dt: float,
    config: EdgeConfig,
) -> PresenceBelief:
    """Two-state recursive Bayes step for one camera.

    The prior relaxes toward the stationary prior with rate
    ``relax_rate`` over ``dt`` seconds, then the odds are multiplied by
    ``lr_det`` if any detection clears the evidence gate, else by
    ``lr_nodet``.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    p0 = config.stationary_prior
    prior = p0 + (belief.posterior - p0) * math.exp(-config.relax_rate * dt)
    lr = config.lr_det if any(d.score >= config.detection_gate for d in detections) else config.lr_nodet
    if prior >= 1.0:
        posterior = 1.0
    else:
        odds = prior / (1.0 - prior) * lr
        posterior = odds / (1.0 + odds)
    return PresenceBelief(
        camera_id=belief.camera_id,
        posterior=min(max(posterior, 0.0), 1.0),
        updated_at=belief.updated_at + dt,
    )


def fuse_cameras(beliefs: Sequence[PresenceBelief]) -> float:
    """Noisy-OR fusion: 1 - prod(1 - p_i)."""
    if not beliefs:
        raise ValueError("fusion needs at least one belief")
    miss = 1.0
    for b in beliefs:
        miss *= 1.0 - b.posterior
    return 1.0 - miss


@dataclass
class DetectionEvent:
    """A triggered episode; ``end_time`` is the instant the fused belief
    last left the active band, ``close_time`` is when the gate released
    (end + hold). Classification is assigned later by evaluation."""

    event_id: str
    trigger_time: float
    end_time: float
    close_time: float
    cameras: Tuple[str, ...]
    frame_ids: Tuple[str, ...]
    peak_fused: float
    classification: Optional[str] = None

    def span(self) -> Tuple[float, float]:
        return (self.trigger_time, self.end_time)


class EventGate:
    """IDLE/ACTIVE hysteresis over the fused presence probability.

    Opens at fused >= t_on; closes after fused stays <= t_off for
    ``hold_s`` continuous seconds. t_off < t_on is enforced.
    """

    def __init__(self, config: EdgeConfig):
        if not (config.t_off < config.t_on):
            raise ValueError("hysteresis requires t_off < t_on")
        self.config = config
        self.state = "IDLE"
        self.below_since: Optional[float] = None

    def step(self, fused: float, now: float) -> Optional[Tuple[str, float, float]]:
        """Returns ("open", now, now), ("close", end_time, close_time), or None."""
        if self.state == "IDLE":
            if fused >= self.config.t_on:
                self.state = "ACTIVE"
                self.below_since = None
                return ("open", now, now)
            return None
        if fused <= self.config.t_off:
            if self.below_since is None:
                self.below_since = now
            if now - self.below_since >= self.config.hold_s:
                end = self.below_since
                self.state = "IDLE"
                self.below_since = None
                return ("close", end, now)
        else:
            self.below_since = None
        return None


@dataclass
class UploadItem:
    frame: FrameRecord
    detections: Tuple[ScoredBox, ...]


@dataclass
class UploadBatch:
    seq: int
    items: Tuple[UploadItem, ...]
    byte_size: int


def select_upload(
    window: Sequence[Tuple[FrameRecord, Sequence[ScoredBox]]],
    budget_fraction: float,
    seed: int = 0,
    batch_seq: int = 0,
    cap: Optional[int] = None,
) -> UploadBatch:
    """Ranked upload selection under a hard frame budget.

    Frames carrying detections come first (highest detection score
    first, input order on ties), then a seeded uniform random residue of
    detection-free frames. At most ceil(budget_fraction * |window|)
    frames are selected, further limited by ``cap`` when given.
    """
    if not (0.0 < budget_fraction <= 1.0):
        raise ValueError("budget_fraction must be in (0, 1]")
    budget = int(math.ceil(budget_fraction * len(window)))
    if cap is not None:
        budget = min(budget, cap)
    with_det = [
        (i, frame, tuple(dets))
        for i, (frame, dets) in enumerate(window)
        if dets
    ]
    with_det.sort(key=lambda item: (-max(d.score for d in item[2]), item[0]))
    without = [(i, frame) for i, (frame, dets) in enumerate(window) if not dets]
    rng = np.random.default_rng(stable_seed(seed, "upload", batch_seq))
    order = rng.permutation(len(without))

    items: List[UploadItem] = []
    for i, frame, dets in with_det[:budget]:
        items.append(UploadItem(frame=frame, detections=dets))
    for j in order:
        if len(items) >= budget:
            break
        _, frame = without[int(j)]
        items.append(UploadItem(frame=frame, detections=()))
    byte_size = sum(len(pnm_bytes(it.frame.image)) + 128 for it in items)
    return UploadBatch(seq=batch_seq, items=tuple(items), byte_size=byte_size)


class EdgeNode:
    """Runs the deployed detector over an interleaved frame stream.

    Responsibilities: continuous logging at a stride, per-camera belief
    updates, fused event gating with pre/post buffering, window
    accumulation for upload selection, and an all-runs upload ledger
    that keeps the total at or below the budget fraction.
    """

    def __init__(
        self,
        model: DetectorModel,
        config: EdgeConfig = EdgeConfig(),
        seed: int = 0,
        log_dir: Optional[Path] = None,
    ):
        self.model = model
        self.config = config
        self.seed = seed
        self.log_dir = Path(log_dir) if log_dir else None
        self.beliefs: Dict[str, PresenceBelief] = {}
        self.gate = EventGate(config)
        self.events: List[DetectionEvent] = []
        self.continuous_log: List[str] = []
        self._frame_counts: Dict[str, int] = {}
        self._last_ts: Dict[str, float] = {}
        self._frames: Dict[str, FrameRecord] = {}
        self._open: Optional[dict] = None
        self._pending: List[dict] = []
        self._recent_detections: List[Tuple[float, str]] = []
        self._window: List[Tuple[FrameRecord, Tuple[ScoredBox, ...]]] = []
        self._event_counter = 0
        self._batch_counter = 0
        self.total_frames = 0
        self.total_uploaded = 0
        self._lock = threading.Lock()
        if self.log_dir:
            (self.log_dir / "continuous").mkdir(parents=True, exist_ok=True)
            (self.log_dir / "events").mkdir(parents=True, exist_ok=True)

    def set_model(self, model: DetectorModel) -> None:
        self.model = model

    # -- ingestion --

    def ingest_frame(self, frame: FrameRecord) -> List[ScoredBox]:
        if frame.modality not in self.model.modalities:
            raise ModalityMismatchError(
                f"model {self.model.model_id!r} does not support modality {frame.modality!r}"
            )
        last = self._last_ts.get(frame.camera_id)
        if last is not None and frame.timestamp <= last:
            raise ValueError(
                f"timestamps must be strictly increasing per camera "
                f"({frame.camera_id}: {frame.timestamp} after {last})"
            )
        detections = self.model.infer(frame.image)
        with self._lock:
            self._last_ts[frame.camera_id] = frame.timestamp
            count = self._frame_counts.get(frame.camera_id, 0)
            self._frame_counts[frame.camera_id] = count + 1
            self.total_frames += 1
            if count % self.config.log_stride == 0:
                self._log_continuous(frame, detections)
            self._frames[frame.frame_id] = frame
            self._window.append((frame, tuple(detections)))
            if detections:
                self._recent_detections.append((frame.timestamp, frame.camera_id))
            self._update_beliefs(frame, detections)
            self._step_gate(frame)
            if self._open is not None and detections:
                self._open["cameras"].add(frame.camera_id)
            self._collect_event_frames(frame)
            self._gc_frames(frame.timestamp)
        return detections

    def _log_continuous(self, frame: FrameRecord, detections: Sequence[ScoredBox]) -> None:
        self.continuous_log.append(frame.frame_id)
        if not self.log_dir:
            return
        root = self.log_dir / "continuous"
        write_pnm(frame.image, root / f"{frame.frame_id}{image_extension(frame.image.channels)}")
        line = json.dumps(
            {"frame": frame.frame_id, "boxes": [json.loads(scored_box_to_json(d)) for d in detections]},
            sort_keys=True,
            separators=(",", ":"),
        )
        with open(root / "detections.jsonl", "a") as fh:
            fh.write(line + "\n")

    def _update_beliefs(self, frame: FrameRecord, detections: Sequence[ScoredBox]) -> None:
        belief = self.beliefs.get(frame.camera_id)
        if belief is None:
            belief = PresenceBelief(
                camera_id=frame.camera_id,
                posterior=self.config.stationary_prior,
                updated_at=frame.timestamp,
            )
        dt = max(0.0, frame.timestamp - belief.updated_at)
        self.beliefs[frame.camera_id] = bayes_update(belief, detections, dt, self.config)

    def _step_gate(self, frame: FrameRecord) -> None:
        fused = fuse_cameras(list(self.beliefs.values()))
        transition = self.gate.step(fused, frame.timestamp)
        if self._open is not None:
            self._open["peak"] = max(self._open["peak"], fused)
        if transition is None:
            return
        kind, t_a, t_b = transition
        if kind == "open":
            self._event_counter += 1
            pre_cut = t_a - self.config.pre_s
            frame_ids = [
                fid
                for fid, fr in self._frames.items()
                if pre_cut <= fr.timestamp <= t_a
            ]
            pre_cameras = {
                cam for ts, cam in self._recent_detections if pre_cut <= ts <= t_a
            }
            self._open = {
                "event_id": f"evt-{self._event_counter:05d}",
                "trigger": t_a,
                "peak": fused,
                "frames": set(frame_ids),
                "cameras": pre_cameras,
            }
        else:
            assert self._open is not None
            self._open["end"] = t_a
            self._open["close"] = t_b
            self._pending.append(self._open)
            self._open = None

    def _collect_event_frames(self, frame: FrameRecord) -> None:
        if self._open is not None:
            self._open["frames"].add(frame.frame_id)
        for pending in self._pending:
            if frame.timestamp <= pending["end"] + self.config.post_s:
                pending["frames"].add(frame.frame_id)
        finished = [
            p for p in self._pending if frame.timestamp > p["end"] + self.config.post_s
        ]
        done_ids = {p["event_id"] for p in finished}
        self._pending = [p for p in self._pending if p["event_id"] not in done_ids]
        for p in finished:
            self._finalize_event(p)

    def _finalize_event(self, record: dict) -> None:
        frames = sorted(
            (fid for fid in record["frames"]),
            key=lambda fid: (self._frames[fid].timestamp if fid in self._frames else 0.0, fid),
        )
        event = DetectionEvent(
            event_id=record["event_id"],
            trigger_time=record["trigger"],
            end_time=record["end"],
            close_time=record["close"],
            cameras=tuple(sorted(record["cameras"])),
            frame_ids=tuple(frames),
            peak_fused=record["peak"],
        )
        self.events.append(event)
        if self.log_dir:
            self._write_event(event)

    def _write_event(self, event: DetectionEvent) -> None:
        root = self.log_dir / "events" / event.event_id
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "event_id": event.event_id,
            "trigger_time": event.trigger_time,
            "end_time": event.end_time,
            "close_time": event.close_time,
            "cameras": list(event.cameras),
            "frame_ids": list(event.frame_ids),
            "peak_fused": event.peak_fused,
        }
        (root / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
        )
        for fid in event.frame_ids:
            frame = self._frames.get(fid)
            if frame is not None:
                write_pnm(frame.image, root / f"{fid}{image_extension(frame.image.channels)}")

    def _gc_frames(self, now: float) -> None:
        horizon = max(self.config.pre_s, self.config.post_s) + self.config.hold_s + 5.0
        keep = {fid for p in self._pending for fid in p["frames"]}
        if self._open is not None:
            keep |= self._open["frames"]
        stale = [
            fid
            for fid, fr in self._frames.items()
            if fr.timestamp < now - horizon and fid not in keep
        ]
        for fid in stale:
            del self._frames[fid]
        self._recent_detections = [
            (ts, cam) for ts, cam in self._recent_detections if ts >= now - horizon
        ]

    def flush_events(self) -> None:
        """Finalize events still waiting for their post window (end of run)."""
        with self._lock:
            if self._open is not None:
                self._open["end"] = self._open.get("end", self._last_any_ts())
                self._open["close"] = self._open["end"]
                self._pending.append(self._open)
                self._open = None
            for p in self._pending:
                self._finalize_event(p)
            self._pending = []

    def _last_any_ts(self) -> float:
        return max(self._last_ts.values()) if self._last_ts else 0.0

    # -- upload --

    def harvest_upload(self) -> UploadBatch:
        """Select uploads from the accumulated window, respecting both the
        per-window ceiling and the cumulative all-run budget, then reset
        the window."""
        with self._lock:
            allowance = int(math.floor(self.config.upload_fraction * self.total_frames))
            cap = max(0, allowance - self.total_uploaded)
            batch = select_upload(
                self._window,
                self.config.upload_fraction,
                seed=self.seed,
                batch_seq=self._batch_counter,
                cap=cap,
            )
            self._batch_counter += 1
            self.total_uploaded += len(batch.items)
            self._window = []
            return batch


# --- upload batch wire serialization ----------------------------------------


def frame_meta(frame: FrameRecord) -> dict:
    return {
        "frame_id": frame.frame_id,
        "camera": frame.camera_id,
        "modality": frame.modality,
        "timestamp": frame.timestamp,
        "ground_truth": [
            {"box": g.box.as_list(), "label": g.label, "range_m": g.range_m}
            for g in frame.ground_truth
        ],
    }


def frame_from_meta(meta: dict, image: RasterImage) -> FrameRecord:
    return FrameRecord(
        frame_id=meta["frame_id"],
        camera_id=meta["camera"],
        modality=meta["modality"],
        timestamp=meta["timestamp"],
        image=image,
        ground_truth=tuple(
            GroundTruthObject(box=BBox(*g["box"]), label=g["label"], range_m=g.get("range_m"))
            for g in meta.get("ground_truth", [])
        ),
    )


def write_frame_dir(frames: Sequence[FrameRecord], out_dir: Path) -> None:
    """One PNM image plus one JSON sidecar per frame."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        write_pnm(frame.image, out_dir / f"{frame.frame_id}{image_extension(frame.image.channels)}")
        (out_dir / f"{frame.frame_id}.json").write_text(
            json.dumps(frame_meta(frame), sort_keys=True, separators=(",", ":")) + "\n"
        )


def read_frame_dir(in_dir: Path) -> List[FrameRecord]:
    from .images import read_pnm

    frames = []
    for meta_path in sorted(Path(in_dir).glob("*.json")):
        meta = json.loads(meta_path.read_text())
        image = None
        for ext in (".pgm", ".ppm"):
            candidate = meta_path.with_suffix(ext)
            if candidate.exists():
                image = read_pnm(candidate)
                break
        if image is None:
            raise FileNotFoundError(f"no PNM image next to {meta_path}")
        frames.append(frame_from_meta(meta, image))
    return frames


def serialize_upload_batch(batch: UploadBatch) -> bytes:
    """Self-contained payload: u32 seq, u32 item count, then per item a
    length-prefixed meta JSON (frame meta + detections) and PNM bytes."""
    parts = [struct.pack(">II", batch.seq, len(batch.items))]
    for item in batch.items:
        meta = frame_meta(item.frame)
        meta["detections"] = [json.loads(scored_box_to_json(d)) for d in item.detections]
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        img = pnm_bytes(item.frame.image)
        parts.append(struct.pack(">II", len(blob), len(img)))
        parts.append(blob)
        parts.append(img)
    return b"".join(parts)


def deserialize_upload_batch(payload: bytes) -> UploadBatch:
    seq, count = struct.unpack(">II", payload[:8])
    pos = 8
    items: List[UploadItem] = []
    for _ in range(count):
        blob_len, img_len = struct.unpack(">II", payload[pos : pos + 8])
        pos += 8
        meta = json.loads(payload[pos : pos + blob_len].decode("utf-8"))
        pos += blob_len
        image = image_from_pnm_bytes(payload[pos : pos + img_len])
        pos += img_len
        frame = frame_from_meta(meta, image)
        detections = tuple(
            scored_box_from_json(json.dumps(d)) for d in meta.get("detections", [])
        )
        items.append(UploadItem(frame=frame, detections=detections))
    return UploadBatch(seq=seq, items=tuple(items), byte_size=len(payload))
