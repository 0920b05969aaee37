"""Label-augmented pseudo-labelling over a pluggable scoring backend.

A target class label is expanded through a lexical hierarchy into related
labels (parents, children, synonyms, optional visual-descriptor variants).
Region candidates from a scoring backend are then scored against the whole
expanded set, taking the maximum cosine logit per region, and overlapping
survivors are collapsed with class-agnostic NMS. Kept boxes are relabelled
to the target class: the pseudo-labels train a detector of the target,
not of its hypernyms.

``expand_labels``, ``cosine_logit`` and ``augmented_logit`` are pure.
Backends must be safely shareable across threads for read-only scoring;
the simulated oracle backend seeds its RNG per invocation from
(image id, seed), so parallel labelling is order-independent.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .boxes import BBox, ImageDims, ScoredBox, clip_box, nms, scored_box_from_json, scored_box_to_json


class UnknownLabelError(KeyError):
    """Raised when a class label is not present in the hierarchy."""


@dataclass
class HierarchyNode:
    name: str
    parents: List[str] = field(default_factory=list)
    children: List[str] = field(default_factory=list)
    synonyms: List[str] = field(default_factory=list)
    descriptors: List[str] = field(default_factory=list)


class LabelHierarchy:
    """Lexical graph of class labels with parent/child/synonym expansions.

    Parent/child relations are symmetrized on load, so an edge only needs
    to be declared once in the source file. Validation rejects self-loops,
    edges to unknown nodes, and cycles along the parent direction.
    """

    def __init__(self, nodes: Iterable[HierarchyNode]):
        self.nodes: Dict[str, HierarchyNode] = {}
        for node in nodes:
            if node.name in self.nodes:
                raise ValueError(f"duplicate hierarchy node {node.name!r}")
            self.nodes[node.name] = node
        self._symmetrize()
        self._validate()

    def _symmetrize(self) -> None:
        for node in self.nodes.values():
            for p in node.parents:
                if p not in self.nodes:
                    raise ValueError(f"node {node.name!r} has unknown parent {p!r}")
                parent = self.nodes[p]
                if node.name not in parent.children:
                    parent.children.append(node.name)
            for c in node.children:
                if c not in self.nodes:
                    raise ValueError(f"node {node.name!r} has unknown child {c!r}")
                child = self.nodes[c]
                if node.name not in child.parents:
                    child.parents.append(node.name)

    def _validate(self) -> None:
        for node in self.nodes.values():
            if node.name in node.parents or node.name in node.children:
                raise ValueError(f"self-loop on node {node.name!r}")
        # acyclicity along the parent direction
        state: Dict[str, int] = {}  # 0 visiting, 1 done

        def visit(name: str, trail: Tuple[str, ...]) -> None:
            if state.get(name) == 1:
                return
            if state.get(name) == 0:
                raise ValueError(f"cycle in parent relation through {name!r}: {trail}")
            state[name] = 0
            for p in self.nodes[name].parents:
                visit(p, trail + (p,))
            state[name] = 1

        for name in self.nodes:
            visit(name, (name,))

    def __contains__(self, name: str) -> bool:
        return name in self.nodes

    def neighbours(self, name: str) -> List[str]:
        node = self.nodes[name]
        return list(node.parents) + list(node.children)

    @classmethod
    def from_dict(cls, obj: dict) -> "LabelHierarchy":
        return cls(
            HierarchyNode(
                name=n["name"],
                parents=list(n.get("parents", [])),
                children=list(n.get("children", [])),
                synonyms=list(n.get("synonyms", [])),
                descriptors=list(n.get("descriptors", [])),
            )
            for n in obj["nodes"]
        )

    @classmethod
    def from_json_file(cls, path: Union[str, Path]) -> "LabelHierarchy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def builtin_hierarchy() -> LabelHierarchy:
    """The hierarchy bundled with the package (rare birds plus a few common classes)."""
    text = resources.files("rads").joinpath("data/hierarchy.json").read_text()
    return LabelHierarchy.from_dict(json.loads(text))


@dataclass(frozen=True)
class AugmentedLabelSet:
    """Ordered label expansion for one target class; target first, no duplicates."""

    target: str
    expansion: Tuple[str, ...]

    def __post_init__(self):
        if not self.expansion or self.expansion[0] != self.target:
            raise ValueError("target must be the first element of the expansion")
        if len(set(self.expansion)) != len(self.expansion):
            raise ValueError("expansion contains duplicate labels")


def expand_labels(
    hierarchy: LabelHierarchy,
    target: str,
    depth: int = 1,
    use_descriptors: bool = False,
) -> AugmentedLabelSet:
    """Expand a target class into related labels up to ``depth`` hops.

    Breadth-first over parent and child edges; each reached node
    contributes its name followed by its synonyms. With
    ``use_descriptors`` the target's visual descriptors are prefixed to
    every term ("black" + "ratite" -> "black ratite") and the variants
    are appended after the plain terms, term-major. Depth 0 yields the
    bare target. Order is deterministic; duplicates keep their first
    position.
    """
    if target not in hierarchy:
        raise UnknownLabelError(f"label not in hierarchy: {target!r}")
    if depth < 0:
        raise ValueError("depth must be >= 0")

    terms: List[str] = [target]
    seen = {target}
    frontier = [target]
    visited = {target}
    for _ in range(depth):
        nxt: List[str] = []
        for name in frontier:
            for other in hierarchy.neighbours(name):
                if other in visited:
                    continue
                visited.add(other)
                nxt.append(other)
                for term in [other] + hierarchy.nodes[other].synonyms:
                    if term not in seen:
                        seen.add(term)
                        terms.append(term)
        frontier = nxt

    if use_descriptors:
        for term in list(terms):
            for desc in hierarchy.nodes[target].descriptors:
                variant = f"{desc} {term}"
                if variant not in seen:
                    seen.add(variant)
                    terms.append(variant)
    return AugmentedLabelSet(target=target, expansion=tuple(terms))


def cosine_logit(z_m: np.ndarray, z_c: np.ndarray) -> float:
    """Cosine similarity between a region embedding and a label embedding."""
    a = np.asarray(z_m, dtype=np.float64)
    b = np.asarray(z_c, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


class ScoringBackend(Protocol):
    """Region-proposal plus label-embedding provider.

    Implementations must be deterministic for a fixed seed/configuration
    and keep the embedding dimension constant per instance.
    """

    backend_id: str

    def propose(self, image) -> List[Tuple[BBox, np.ndarray]]:
        """Region candidates for an image: (box, region embedding) pairs."""
        ...

    def embed_label(self, label: str) -> np.ndarray:
        ...


def augmented_logit(
    region_embedding: np.ndarray,
    labels: AugmentedLabelSet,
    backend: ScoringBackend,
) -> Tuple[float, str]:
    """Maximum cosine logit of a region over an expanded label set.

    Returns (score, maximizing label); ties resolve to the earlier label
    in expansion order, hence toward the target.
    """
    best_score: Optional[float] = None
    best_label = labels.target
    for lab in labels.expansion:
        s = cosine_logit(region_embedding, backend.embed_label(lab))
        if best_score is None or s > best_score:
            best_score = s
            best_label = lab
    assert best_score is not None
    return best_score, best_label


def predict_augmented(
    region_embedding: np.ndarray,
    class_set: Sequence[AugmentedLabelSet],
    backend: ScoringBackend,
) -> str:
    """Argmax classification over augmented label sets.

    The winner is the TARGET class of the best-scoring set, not the
    expansion term that achieved the maximum. Equal scores resolve to
    the earlier set in ``class_set`` order.
    """
    if not class_set:
        raise ValueError("class_set must be non-empty")
    best_target = class_set[0].target
    best = -np.inf
    for labels in class_set:
        score, _ = augmented_logit(region_embedding, labels, backend)
        if score > best:
            best = score
            best_target = labels.target
    return best_target


@dataclass(frozen=True)
class OracleImage:
    """Ground-truth handle consumed by the simulated oracle backend (sim only)."""

    image_id: str
    dims: ImageDims
    objects: Tuple[Tuple[BBox, str], ...]  # (true box, true class)


def stable_seed(*parts) -> int:
    """Platform-stable 64-bit seed derived from string/int parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class SimulatedOracleBackend:
    """Deterministic stand-in for a vision-language scorer, driven by ground truth.

    Configuration is a per-(true class, queried label) affinity table in
    [0, 1]. Embeddings are constructed so that the cosine logit of a
    clean region of true class ``t`` against label ``l`` is exactly
    ``affinity[(t, l)]``: each label embeds as its affinity column over
    the true classes plus a label-private axis that tops the vector up
    to unit norm, and a clean region embeds as the basis vector of its
    true class. This requires each label's column energy
    sum_t affinity(t, l)^2 <= 1, which is validated at construction.

    Noise perturbs the region embedding with a random non-negative
    mixture of the other class axes (amplitude ``noise_amp``), so logits
    stay within [0, 1] by construction. Proposal boxes are the true
    boxes jittered by up to ``jitter_px`` per corner, ``proposals_per_object``
    times, clipped to the image. The RNG is seeded from (seed, image id).
    """

    def __init__(
        self,
        affinity: Dict[Tuple[str, str], float],
        noise_amp: float = 0.0,
        jitter_px: float = 0.0,
        seed: int = 0,
        proposals_per_object: int = 2,
    ):
        if noise_amp < 0:
            raise ValueError("noise amplitude must be >= 0")
        for key, value in affinity.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"affinity out of [0, 1] for {key}: {value}")
        self.affinity = dict(affinity)
        self.noise_amp = float(noise_amp)
        self.jitter_px = float(jitter_px)
        self.seed = int(seed)
        self.proposals_per_object = int(proposals_per_object)
        self.backend_id = f"sim-oracle:{seed}"

        self._classes = sorted({t for t, _ in affinity})
        self._labels = sorted({l for _, l in affinity})
        self._class_index = {c: i for i, c in enumerate(self._classes)}
        self._label_index = {l: i for i, l in enumerate(self._labels)}
        # axes: |classes| class axes, per-label private axes, one shared
        # axis for labels outside the table, one slack axis for regions
        self._dim = len(self._classes) + len(self._labels) + 2
        for lab in self._labels:
            energy = sum(self.affinity.get((c, lab), 0.0) ** 2 for c in self._classes)
            if energy > 1.0 + 1e-12:
                raise ValueError(
                    f"affinity column for label {lab!r} has energy {energy:.3f} > 1; "
                    "lower the per-class affinities for this label"
                )

    @property
    def embedding_dim(self) -> int:
        return self._dim

    def embed_label(self, label: str) -> np.ndarray:
        z = np.zeros(self._dim)
        if label in self._label_index:
            for c in self._classes:
                z[self._class_index[c]] = self.affinity.get((c, label), 0.0)
            residual = 1.0 - float(np.dot(z, z))
            z[len(self._classes) + self._label_index[label]] = np.sqrt(max(residual, 0.0))
        else:
            z[self._dim - 2] = 1.0  # shared axis: scores 0 against every region
        return z

    def _region_embedding(self, true_class: str, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self._dim)
        if true_class in self._class_index:
            z[self._class_index[true_class]] = 1.0
        if self.noise_amp > 0.0:
            for c in self._classes:
                if c != true_class:
                    z[self._class_index[c]] += rng.uniform(0.0, self.noise_amp)
        if float(np.dot(z, z)) == 0.0:
            z[self._dim - 1] = 1.0  # unknown true class: orthogonal to all labels
        return z / np.linalg.norm(z)

    def propose(self, image: OracleImage) -> List[Tuple[BBox, np.ndarray]]:
        rng = np.random.default_rng(stable_seed(self.seed, image.image_id))
        proposals: List[Tuple[BBox, np.ndarray]] = []
        for true_box, true_class in image.objects:
            for _ in range(self.proposals_per_object):
                box = true_box
                if self.jitter_px > 0.0:
                    dx0, dy0, dx1, dy1 = rng.uniform(-self.jitter_px, self.jitter_px, size=4)
                    try:
                        box = BBox(
                            true_box.x_min + dx0,
                            true_box.y_min + dy0,
                            true_box.x_max + dx1,
                            true_box.y_max + dy1,
                        )
                    except ValueError:
                        box = true_box
                clipped = clip_box(box, image.dims)
                if clipped is None:
                    continue
                proposals.append((clipped, self._region_embedding(true_class, rng)))
        return proposals


@dataclass(frozen=True)
class PseudoLabelSet:
    """Pseudo-labels for one image: kept boxes all carry the target class."""

    image_id: str
    boxes: Tuple[ScoredBox, ...]
    backend_id: str
    threshold: float
    nms_iou: float

    def is_empty(self) -> bool:
        return not self.boxes


def label_augmented_nms(
    image,
    target: str,
    hierarchy: LabelHierarchy,
    backend: ScoringBackend,
    score_threshold: float = 0.5,
    iou_threshold: float = 0.5,
    depth: int = 1,
    use_descriptors: bool = False,
) -> PseudoLabelSet:
    """Pseudo-label one image with label-augmented scoring plus NMS.

    Workflow: expand the target label; ask the backend for region
    candidates; score each region with the max logit over the expanded
    set; drop regions below ``score_threshold``; collapse overlapping
    survivors with class-agnostic NMS at ``iou_threshold``; relabel
    every kept box to the target class. Empty proposals are a valid
    empty result, not an error.
    """
    for name, value in (("score_threshold", score_threshold), ("iou_threshold", iou_threshold)):
        if not (0.0 < value <= 1.0):
            raise ValueError(f"{name} must be in (0, 1], got {value}")
    labels = expand_labels(hierarchy, target, depth=depth, use_descriptors=use_descriptors)
    survivors: List[ScoredBox] = []
    for box, embedding in backend.propose(image):
        score, best_label = augmented_logit(embedding, labels, backend)
        score = min(max(score, 0.0), 1.0)
        if score >= score_threshold:
            survivors.append(ScoredBox(box=box, label=best_label, score=score))
    kept = nms(survivors, iou_threshold)
    relabelled = tuple(ScoredBox(box=sb.box, label=target, score=sb.score) for sb in kept)
    return PseudoLabelSet(
        image_id=getattr(image, "image_id", str(image)),
        boxes=relabelled,
        backend_id=backend.backend_id,
        threshold=score_threshold,
        nms_iou=iou_threshold,
    )


def write_pseudo_labels(sets: Iterable[PseudoLabelSet], path: Union[str, Path]) -> None:
    """JSON Lines: per image a header line then one line per kept box."""
    lines: List[str] = []
    for ps in sets:
        lines.append(
            json.dumps(
                {"image": ps.image_id, "threshold": ps.threshold, "backend": ps.backend_id},
                sort_keys=True,
                separators=(",", ":"),
            )
        )
        for sb in ps.boxes:
            lines.append(scored_box_to_json(sb))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_pseudo_labels(path: Union[str, Path]) -> List[PseudoLabelSet]:
    sets: List[PseudoLabelSet] = []
    image_id = None
    boxes: List[ScoredBox] = []
    header: dict = {}

    def flush():
        if image_id is not None:
            sets.append(
                PseudoLabelSet(
                    image_id=image_id,
                    boxes=tuple(boxes),
                    backend_id=header.get("backend", ""),
                    threshold=header.get("threshold", 0.0),
                    nms_iou=header.get("nms_iou", 0.5),
                )
            )

    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "image" in obj:
            flush()
            image_id = obj["image"]
            header = obj
            boxes = []
        else:
            boxes.append(scored_box_from_json(line))
    flush()
    return sets
