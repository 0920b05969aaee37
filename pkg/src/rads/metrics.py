"""Detection metrics: per-frame TPR, case-averaged mTPR, frame-level FPR,
all-point-interpolated AP/mAP at IoU 0.5, ROC points with operating-point
selection, and event-level precision/recall with per-day aggregation.

All operations are pure; dataset-level metrics reduce in deterministic
order so results are reproducible regardless of parallel evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox, ScoredBox, iou

RANGE_NEAR = "0-100m"
RANGE_FAR = "100-200m"

IOU_MATCH = 0.5


@dataclass(frozen=True)
class SightingCase:
    """One contiguous appearance of the target, spanning many frames."""

    case_id: str
    frame_ids: Tuple[str, ...]
    range_group: str
    modality: str

    def __post_init__(self):
        if not self.frame_ids:
            raise ValueError("sighting case must contain at least one frame")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float

    def __post_init__(self):
        if not (0.0 <= self.tpr <= 1.0 and 0.0 <= self.fpr <= 1.0):
            raise ValueError("TPR/FPR must lie in [0, 1]")


def match_detections(
    detections: Sequence[ScoredBox],
    gt_boxes: Sequence[BBox],
    iou_threshold: float = IOU_MATCH,
) -> List[Optional[int]]:
    """Greedy match by descending score; each GT matched at most once.

    Returns, per detection (in input order), the matched GT index or None.
    A detection matches the highest-IoU unmatched GT with IoU >= threshold.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    assigned: List[Optional[int]] = [None] * len(detections)
    taken = [False] * len(gt_boxes)
    for i in order:
        best_j, best_v = None, -1.0
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(detections[i].box, gt)
            if v >= iou_threshold and v > best_v:
                best_j, best_v = j, v
        if best_j is not None:
            taken[best_j] = True
            assigned[i] = best_j
    return assigned


def frame_tpr(
    detections: Sequence[ScoredBox],
    gt_boxes: Sequence[BBox],
    iou_threshold: float = IOU_MATCH,
) -> float:
    """Fraction of ground-truth objects matched in one frame."""
    if not gt_boxes:
        raise ValueError("frame TPR is only defined on frames with ground truth")
    assigned = match_detections(detections, gt_boxes, iou_threshold)
    matched = sum(1 for a in assigned if a is not None)
    return matched / len(gt_boxes)


def mtpr(
    cases: Sequence[SightingCase],
    frame_results: Mapping[str, float],
    range_group: Optional[str] = None,
) -> float:
    """Mean TPR over sighting cases: per-case mean of frame TPRs, then an
    unweighted mean over cases (so frame-count imbalance across cases
    does not skew the result). ``range_group`` filters the cases."""
    selected = [c for c in cases if range_group is None or c.range_group == range_group]
    if not selected:
        raise ValueError(f"no sighting cases in range group {range_group!r}")
    case_means = []
    for case in selected:
        values = [frame_results[f] for f in case.frame_ids]
        case_means.append(sum(values) / len(values))
    return sum(case_means) / len(case_means)


def fpr(
    negative_frame_ids: Sequence[str],
    detections_per_frame: Mapping[str, Sequence[ScoredBox]],
) -> float:
    """Frame-level false-positive rate: fraction of target-free frames on
    which at least one detection fires."""
    if not negative_frame_ids:
        raise ValueError("FPR needs at least one negative frame")
    flagged = sum(1 for f in negative_frame_ids if detections_per_frame.get(f))
    return flagged / len(negative_frame_ids)


def average_precision(
    detections: Sequence[Tuple[str, ScoredBox]],
    gt: Mapping[str, Sequence[BBox]],
    iou_threshold: float = IOU_MATCH,
) -> float:
    """All-point interpolated area under the precision-recall curve.

    ``detections`` are (frame id, scored box) over the whole dataset; ``gt``
    maps frame id to ground-truth boxes. Matching is greedy by score per
    frame, each GT used once.
    """
    total_gt = sum(len(b) for b in gt.values())
    if total_gt == 0:
        raise ValueError("average precision needs at least one ground-truth object")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1].score, detections[i][0], i))
    taken: Dict[str, List[bool]] = {f: [False] * len(b) for f, b in gt.items()}
    tp_flags = np.zeros(len(order))
    for rank, i in enumerate(order):
        frame_id, det = detections[i]
        boxes = gt.get(frame_id, ())
        best_j, best_v = None, -1.0
        for j, g in enumerate(boxes):
            if frame_id in taken and taken[frame_id][j]:
                continue
            v = iou(det.box, g)
            if v >= iou_threshold and v > best_v:
                best_j, best_v = j, v
        if best_j is not None:
            taken[frame_id][best_j] = True
            tp_flags[rank] = 1.0
    if len(order) == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    precision = tp_cum / (np.arange(len(order)) + 1)
    recall = tp_cum / total_gt
    # interpolate: precision at recall r is the max precision at any recall >= r
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(order)):
        if recall[k] > prev_recall:
            ap += (recall[k] - prev_recall) * interp[k]
            prev_recall = recall[k]
    return float(ap)


def map_at_50(
    per_class: Mapping[str, Tuple[Sequence[Tuple[str, ScoredBox]], Mapping[str, Sequence[BBox]]]],
) -> float:
    """Mean AP over classes; each entry is (detections, ground truth)."""
    if not per_class:
        raise ValueError("mAP needs at least one class")
    values = [average_precision(dets, gt) for dets, gt in per_class.values()]
    return sum(values) / len(values)


def roc_points(
    positive_frames: Sequence[Tuple[Sequence[ScoredBox], Sequence[BBox]]],
    negative_frames: Sequence[Sequence[ScoredBox]],
    thresholds: Sequence[float],
    iou_threshold: float = IOU_MATCH,
) -> List[RocPoint]:
    """One ROC point per threshold: TPR as the mean frame TPR over positive
    frames with detections filtered at the threshold, FPR frame-level over
    the negative frames."""
    if not thresholds:
        raise ValueError("threshold grid must be non-empty")
    points = []
    for t in thresholds:
        tprs = []
        for dets, gts in positive_frames:
            kept = [d for d in dets if d.score >= t]
            tprs.append(frame_tpr(kept, gts, iou_threshold))
        tpr_v = sum(tprs) / len(tprs) if tprs else 0.0
        flagged = sum(1 for dets in negative_frames if any(d.score >= t for d in dets))
        fpr_v = flagged / len(negative_frames) if negative_frames else 0.0
        points.append(RocPoint(threshold=float(t), tpr=tpr_v, fpr=fpr_v))
    return points


def select_operating_point(points: Sequence[RocPoint], fpr_cutoff: float) -> RocPoint:
    """Maximum-TPR point subject to FPR <= cutoff; ties prefer lower FPR,
    then the higher threshold for determinism."""
    feasible = [p for p in points if p.fpr <= fpr_cutoff]
    if not feasible:
        raise ValueError(f"cutoff infeasible: no ROC point has FPR <= {fpr_cutoff}")
    return max(feasible, key=lambda p: (p.tpr, -p.fpr, p.threshold))


def event_precision_recall(tp: int, fn: int, fp: int) -> Tuple[float, float]:
    """Event-level precision and recall from TP/FN/FP counts."""
    if tp + fn < 1 or tp + fp < 1:
        raise ValueError("degenerate event counts: need tp+fn >= 1 and tp+fp >= 1")
    return tp / (tp + fp), tp / (tp + fn)


def merge_spans(spans: Iterable[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Merge overlapping (start, end) intervals; output sorted by start."""
    ordered = sorted(spans)
    merged: List[Tuple[float, float]] = []
    for s, e in ordered:
        if e < s:
            raise ValueError(f"interval end before start: ({s}, {e})")
        if merged and s <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], e))
        else:
            merged.append((s, e))
    return merged


def _overlaps(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def classify_events(
    event_spans: Sequence[Tuple[float, float]],
    sighting_spans: Sequence[Tuple[float, float]],
    day_seconds: float = 86400.0,
) -> Tuple[Dict[str, int], List[Dict[str, int]], List[str]]:
    """Classify triggered events against ground-truth sightings.

    Overlapping sightings are merged first. A merged sighting with at
    least one overlapping event counts as a TP; events overlapping no
    sighting are FPs; sightings with no event are FNs — so TP + FN equals
    the number of merged sightings. Returns (totals, per-day series,
    per-event labels), with TPs/FNs attributed to the sighting's start
    day and FPs to the event's start day.
    """
    merged = merge_spans(sighting_spans)
    per_event: List[str] = []
    day_counts: Dict[int, Dict[str, int]] = {}

    def bump(day: int, key: str) -> None:
        day_counts.setdefault(day, {"tp": 0, "fp": 0, "fn": 0})[key] += 1

    matched = [False] * len(merged)
    for span in event_spans:
        hits = [i for i, s in enumerate(merged) if _overlaps(span, s)]
        if hits:
            per_event.append("TP")
            for i in hits:
                matched[i] = True
        else:
            per_event.append("FP")
            bump(int(span[0] // day_seconds), "fp")
    tp = 0
    fn = 0
    for i, s in enumerate(merged):
        day = int(s[0] // day_seconds)
        if matched[i]:
            tp += 1
            bump(day, "tp")
        else:
            fn += 1
            bump(day, "fn")
    fp = per_event.count("FP")
    totals = {"tp": tp, "fp": fp, "fn": fn}
    series = [
        {"day": day, **counts} for day, counts in sorted(day_counts.items())
    ]
    return totals, series, per_event
