"""Trainable toy detector: blob proposals scored by template correlation.

The detector is deliberately small: region proposals come from intensity
deviation against a frozen background-contrast estimate, and each proposal
is scored per class as the average of a normalized cross-correlation
against a mean template (mapped to [0, 1]) and an intensity-histogram
intersection, best over a small scale pyramid. It trains in milliseconds,
is fully deterministic, and genuinely improves with more and better
labels, which is the property the surrounding self-training loop needs.

Parameters split into a frozen part (per-modality feature statistics used
by the proposal stage) and a tunable part (per-class templates, histograms
and thresholds). Fine-tuning with a frozen fraction >= 0.5 must leave the
frozen part bit-identical; that contract lives in
:func:`rads.cloud.fine_tune`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .boxes import BBox, ImageDims, ScoredBox, clip_box, nms
from .images import RasterImage, resize_nearest

MODALITY_RGB = "rgb"
MODALITY_THERMAL = "thermal"

BLOB_MAGIC = b"RADSTOYD"
BLOB_FORMAT_VERSION = 1


class ModalityMismatchError(ValueError):
    """The model has no parameters for the frame's modality."""


def modality_of(image: RasterImage) -> str:
    return MODALITY_THERMAL if image.channels == 1 else MODALITY_RGB


@dataclass(frozen=True)
class FeatureStats:
    """Frozen per-modality background statistics driving the proposal stage."""

    bg_level: float
    bg_scale: float


@dataclass
class ClassModel:
    """Tunable per-class statistics at the canonical patch scale."""

    template: np.ndarray  # (K, K) float64 mean intensity patch
    hist: np.ndarray  # (bins,) normalized intensity histogram
    threshold: float

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        s = float(self.hist.sum())
        if not np.isclose(s, 1.0, atol=1e-9):
            raise ValueError(f"histogram must sum to 1, sums to {s}")


@dataclass
class ToyDetectorParams:
    canonical_size: int = 16
    hist_bins: int = 32
    pyramid_scales: Tuple[float, ...] = (0.75, 1.0, 1.3)
    proposal_k: float = 3.5
    max_proposals: int = 12
    box_margin: float = 0.2
    feature_stats: Dict[str, FeatureStats] = field(default_factory=dict)
    class_models: Dict[str, Dict[str, ClassModel]] = field(default_factory=dict)

    def modalities(self) -> List[str]:
        return sorted(self.feature_stats)


def intensity_histogram(gray: np.ndarray, bins: int) -> np.ndarray:
    h, _ = np.histogram(gray, bins=bins, range=(0.0, 256.0))
    total = h.sum()
    if total == 0:
        return np.full(bins, 1.0 / bins)
    return h / total


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation in [-1, 1]; 0 when either side is flat."""
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt((da * da).sum()))
    nb = float(np.sqrt((db * db).sum()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((da * db).sum() / (na * nb))


def canonical_crop(gray: np.ndarray, box: BBox, size: int) -> np.ndarray:
    x0 = max(0, int(np.floor(box.x_min)))
    y0 = max(0, int(np.floor(box.y_min)))
    x1 = min(gray.shape[1], max(x0 + 1, int(np.ceil(box.x_max))))
    y1 = min(gray.shape[0], max(y0 + 1, int(np.ceil(box.y_max))))
    return resize_nearest(gray[y0:y1, x0:x1], size, size)


def propose_regions(
    image: RasterImage,
    stats: FeatureStats,
    proposal_k: float,
    max_proposals: int,
    box_margin: float,
) -> List[BBox]:
    """Connected components of intensity deviation against the frozen
    background scale, padded by a margin; largest components first."""
    gray = image.gray()
    deviation = np.abs(gray - np.median(gray))
    binary = deviation > proposal_k * max(stats.bg_scale, 1e-6)
    labels, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return []
    sizes = ndimage.sum_labels(binary, labels, index=np.arange(1, count + 1))
    slices = ndimage.find_objects(labels)
    dims = image.dims
    candidates: List[Tuple[float, int, int, BBox]] = []
    for idx, sl in enumerate(slices):
        if sl is None or sizes[idx] < 4:
            continue
        ys, xs = sl
        h = ys.stop - ys.start
        w = xs.stop - xs.start
        if h < 2 or w < 2:
            continue
        pad_y = box_margin * h
        pad_x = box_margin * w
        box = clip_box(
            BBox(xs.start - pad_x, ys.start - pad_y, xs.stop + pad_x, ys.stop + pad_y),
            dims,
        )
        if box is not None:
            candidates.append((-float(sizes[idx]), ys.start, xs.start, box))
    candidates.sort(key=lambda c: c[:3])
    return [c[3] for c in candidates[:max_proposals]]


def score_region(
    gray: np.ndarray,
    box: BBox,
    model: ClassModel,
    params: ToyDetectorParams,
    dims: ImageDims,
) -> Tuple[float, BBox]:
    """Best (score, box) over the scale pyramid for one proposal."""
    cx = (box.x_min + box.x_max) / 2.0
    cy = (box.y_min + box.y_max) / 2.0
    best_score, best_box = -1.0, box
    for s in params.pyramid_scales:
        half_w = box.width * s / 2.0
        half_h = box.height * s / 2.0
        scaled = clip_box(BBox(cx - half_w, cy - half_h, cx + half_w, cy + half_h), dims)
        if scaled is None:
            continue
        crop = canonical_crop(gray, scaled, params.canonical_size)
        corr = (ncc(crop, model.template) + 1.0) / 2.0
        inter = float(np.minimum(intensity_histogram(crop, params.hist_bins), model.hist).sum())
        score = min(max((corr + inter) / 2.0, 0.0), 1.0)
        if score > best_score:
            best_score, best_box = score, scaled
    return best_score, best_box


class ToyDetector:
    """DetectorModel implementation backed by :class:`ToyDetectorParams`.

    Inference is deterministic per (model id, image). Instances are
    immutable after construction and safe to share across threads.
    """

    def __init__(self, model_id: str, params: ToyDetectorParams):
        self.model_id = model_id
        self.params = params

    @property
    def modalities(self) -> frozenset:
        return frozenset(self.params.feature_stats)

    def raw_scores(self, image: RasterImage) -> List[ScoredBox]:
        """All scored proposals before thresholding (NMS still applied);
        used for threshold calibration and ROC sweeps."""
        modality = modality_of(image)
        if modality not in self.params.feature_stats:
            raise ModalityMismatchError(f"model has no {modality!r} parameters")
        models = self.params.class_models.get(modality, {})
        if not models:
            return []
        gray = image.gray()
        stats = self.params.feature_stats[modality]
        proposals = propose_regions(
            image, stats, self.params.proposal_k, self.params.max_proposals, self.params.box_margin
        )
        scored: List[ScoredBox] = []
        for box in proposals:
            for cls in sorted(models):
                score, best_box = score_region(gray, box, models[cls], self.params, image.dims)
                if score > 0.0:
                    scored.append(ScoredBox(box=best_box, label=cls, score=score))
        return nms(scored, 0.5)

    def infer(self, image: RasterImage) -> List[ScoredBox]:
        modality = modality_of(image)
        models = self.params.class_models.get(modality, {})
        return [
            sb
            for sb in self.raw_scores(image)
            if sb.score >= models[sb.label].threshold
        ]


# --- parameter estimation helpers (used by the cloud's fine-tune path) ------


def estimate_feature_stats(images: Sequence[RasterImage]) -> FeatureStats:
    """Median frame level and median absolute-deviation contrast scale."""
    levels, scales = [], []
    for img in images:
        gray = img.gray()
        med = float(np.median(gray))
        levels.append(med)
        scales.append(float(np.median(np.abs(gray - med))) * 1.4826)
    if not levels:
        raise ValueError("need at least one image to estimate feature statistics")
    return FeatureStats(bg_level=float(np.median(levels)), bg_scale=float(np.median(scales)))


def estimate_class_model(
    crops: Sequence[np.ndarray],
    bins: int,
    threshold: float,
) -> ClassModel:
    """Mean template and mean normalized histogram over training crops."""
    if not crops:
        raise ValueError("need at least one crop")
    stack = np.stack([c.astype(np.float64) for c in crops])
    template = stack.mean(axis=0)
    hists = np.stack([intensity_histogram(c, bins) for c in crops])
    hist = hists.mean(axis=0)
    hist = hist / hist.sum()
    return ClassModel(template=template, hist=hist, threshold=threshold)


# --- versioned binary parameter blob ----------------------------------------


def _canonical_entries(params: ToyDetectorParams) -> List[Tuple[str, str]]:
    return [
        (m, c)
        for m in sorted(params.class_models)
        for c in sorted(params.class_models[m])
    ]


def frozen_bytes(params: ToyDetectorParams) -> bytes:
    """The frozen feature-statistics segment, little-endian float64."""
    values: List[float] = []
    for m in params.modalities():
        st = params.feature_stats[m]
        values.extend([st.bg_level, st.bg_scale])
    return np.asarray(values, dtype="<f8").tobytes()


def serialize_params(params: ToyDetectorParams) -> bytes:
    """8-byte magic, u16 format version, length-prefixed JSON layout header,
    then the little-endian IEEE-754 parameter array."""
    header = {
        "canonical_size": params.canonical_size,
        "hist_bins": params.hist_bins,
        "n_pyramid": len(params.pyramid_scales),
        "max_proposals": params.max_proposals,
        "modalities": params.modalities(),
        "classes": {m: sorted(params.class_models.get(m, {})) for m in params.modalities()},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    values: List[float] = [params.proposal_k, params.box_margin, *params.pyramid_scales]
    for m in params.modalities():
        st = params.feature_stats[m]
        values.extend([st.bg_level, st.bg_scale])
    for m, c in _canonical_entries(params):
        model = params.class_models[m][c]
        values.extend(model.template.ravel().tolist())
        values.extend(model.hist.tolist())
        values.append(model.threshold)
    array = np.asarray(values, dtype="<f8").tobytes()
    return (
        BLOB_MAGIC
        + struct.pack("<H", BLOB_FORMAT_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + array
    )


def deserialize_params(blob: bytes) -> ToyDetectorParams:
    if blob[:8] != BLOB_MAGIC:
        raise ValueError("bad parameter blob magic")
    (version,) = struct.unpack("<H", blob[8:10])
    if version != BLOB_FORMAT_VERSION:
        raise ValueError(f"unsupported parameter blob version {version}")
    (header_len,) = struct.unpack("<I", blob[10:14])
    header = json.loads(blob[14 : 14 + header_len].decode("utf-8"))
    array = np.frombuffer(blob, dtype="<f8", offset=14 + header_len)
    k = header["canonical_size"]
    bins = header["hist_bins"]
    pos = 0

    def take(n: int) -> np.ndarray:
        nonlocal pos
        out = array[pos : pos + n]
        pos += n
        return out

    proposal_k, box_margin = take(2)
    pyramid = tuple(take(header["n_pyramid"]).tolist())
    feature_stats = {}
    for m in header["modalities"]:
        level, scale = take(2)
        feature_stats[m] = FeatureStats(bg_level=float(level), bg_scale=float(scale))
    class_models: Dict[str, Dict[str, ClassModel]] = {}
    for m in header["modalities"]:
        for c in header["classes"][m]:
            template = take(k * k).reshape(k, k).copy()
            hist = take(bins).copy()
            threshold = float(take(1)[0])
            class_models.setdefault(m, {})[c] = ClassModel(
                template=template, hist=hist, threshold=threshold
            )
    return ToyDetectorParams(
        canonical_size=k,
        hist_bins=bins,
        pyramid_scales=pyramid,
        proposal_k=float(proposal_k),
        max_proposals=header["max_proposals"],
        box_margin=float(box_margin),
        feature_stats=feature_stats,
        class_models=class_models,
    )
