"""Detection geometry primitives: boxes, IoU, greedy NMS, scored candidates.

All operations are pure and stateless; they are safe to call concurrently
from any number of threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image pixel coordinates, origin top-left.

    Invariants: x_min < x_max, y_min < y_max (strictly positive area),
    all coordinates finite.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for v in (self.x_min, self.y_min, self.x_max, self.y_max):
            if not math.isfinite(v):
                raise ValueError(f"box coordinate not finite: {v!r}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"box must have positive area: "
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class ScoredBox:
    """A box with a class label and a confidence score in [0, 1].

    The unit of detection and of pseudo-labelling throughout the pipeline.
    """

    box: BBox
    label: str
    score: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("label must be non-empty")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ImageDims:
    """Image width/height in whole pixels."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"dims must be >= 1, got {self.width}x{self.height}")


def area(b: BBox) -> float:
    """Box area in square pixels (always > 0 by the BBox invariant)."""
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1].

    Symmetric; exactly 0 for disjoint or merely touching boxes (the
    intersection is treated as open, so threshold comparisons do not
    flap on shared edges).
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = area(a) + area(b) - inter
    return inter / union


def nms(candidates: Iterable[ScoredBox], iou_threshold: float) -> List[ScoredBox]:
    """Greedy non-maximum suppression over scored boxes.

    Candidates are visited by descending score; a candidate is kept iff
    its IoU with every already-kept box is strictly below
    ``iou_threshold``. Suppression is deliberately class-agnostic: label
    augmentation produces overlapping candidates for the same physical
    object under different class names, and those must collapse to one.

    Ties in score are broken toward larger area, then input order, so
    output is deterministic. Empty input yields an empty list.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    pool = list(candidates)
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].score, -area(pool[i].box), i))
    kept: List[ScoredBox] = []
    for i in order:
        cand = pool[i]
        if all(iou(cand.box, k.box) < iou_threshold for k in kept):
            kept.append(cand)
    return kept


def clip_box(b: BBox, dims: ImageDims) -> Optional[BBox]:
    """Intersect a box with the image rectangle [0, width] x [0, height].

    Returns the clipped box, or None when the intersection has zero
    area (box entirely outside the image).
    """
    x0 = max(b.x_min, 0.0)
    y0 = max(b.y_min, 0.0)
    x1 = min(b.x_max, float(dims.width))
    y1 = min(b.y_max, float(dims.height))
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


def scored_box_to_json(sb: ScoredBox) -> str:
    """One-line JSON form used everywhere boxes cross a file boundary."""
    return json.dumps(
        {"box": sb.box.as_list(), "label": sb.label, "score": sb.score},
        sort_keys=True,
        separators=(",", ":"),
    )


def scored_box_from_json(line: str) -> ScoredBox:
    obj = json.loads(line)
    x0, y0, x1, y1 = obj["box"]
    return ScoredBox(box=BBox(x0, y0, x1, y1), label=obj["label"], score=obj["score"])
