"""Self-training rare-animal detection: label-augmented pseudo-labelling,
synthetic compositing, an edge/cloud orchestration loop, evaluation
metrics, and a desk-scale simulator that drives the whole pipeline."""

from .boxes import BBox, ImageDims, ScoredBox, area, clip_box, iou, nms
from .images import RasterImage, read_pnm, write_pnm
from .labelaug import (
    AugmentedLabelSet,
    LabelHierarchy,
    PseudoLabelSet,
    SimulatedOracleBackend,
    augmented_logit,
    builtin_hierarchy,
    cosine_logit,
    expand_labels,
    label_augmented_nms,
    predict_augmented,
)
from .scenario import ScenarioConfig

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ImageDims",
    "ScoredBox",
    "area",
    "iou",
    "nms",
    "clip_box",
    "RasterImage",
    "read_pnm",
    "write_pnm",
    "LabelHierarchy",
    "AugmentedLabelSet",
    "PseudoLabelSet",
    "SimulatedOracleBackend",
    "expand_labels",
    "cosine_logit",
    "augmented_logit",
    "predict_augmented",
    "label_augmented_nms",
    "builtin_hierarchy",
    "ScenarioConfig",
    "__version__",
]
