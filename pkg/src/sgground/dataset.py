"""Image records, dataset files, query matching, and splits.

An image is a list of scored candidate boxes plus optional ground truth
(labeled instances and instance-pair relations).  Datasets are stored as
JSON Lines with a header line carrying the vocabularies and synonym map.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenegraph import SceneGraph, SynonymMap, normalize_labels

SCORE_SUM_TOL = 1e-6


class DatasetError(ValueError):
    """Schema violation or broken record invariant."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner (x, y), width w, height h, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise DatasetError(f"non-finite box coordinates: {self}")
        if self.w <= 0 or self.h <= 0:
            raise DatasetError(f"box must have positive extent: {self}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class CandidateBox:
    """A candidate detection: box plus per-category and per-attribute scores.

    object_scores is a distribution over the object vocabulary (sums to 1);
    attribute_scores are independent probabilities per attribute.
    """

    box: BoundingBox
    object_scores: np.ndarray
    attribute_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "object_scores", np.asarray(self.object_scores, dtype=np.float64)
        )
        object.__setattr__(
            self,
            "attribute_scores",
            np.asarray(self.attribute_scores, dtype=np.float64),
        )
        os, ats = self.object_scores, self.attribute_scores
        if os.ndim != 1 or ats.ndim != 1:
            raise DatasetError("score vectors must be one-dimensional")
        if np.any(os < 0) or np.any(os > 1) or not np.all(np.isfinite(os)):
            raise DatasetError("object_scores entries must lie in [0, 1]")
        if abs(float(os.sum()) - 1.0) > SCORE_SUM_TOL:
            raise DatasetError(
                f"object_scores must sum to 1, got {float(os.sum()):.8f}"
            )
        if np.any(ats < 0) or np.any(ats > 1) or not np.all(np.isfinite(ats)):
            raise DatasetError("attribute_scores entries must lie in [0, 1]")


@dataclass(frozen=True)
class GroundTruthInstance:
    """A labeled object: box, category, and the attributes it carries."""

    box: BoundingBox
    category: str
    attributes: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    candidates: tuple[CandidateBox, ...]
    truth_instances: tuple[GroundTruthInstance, ...] | None = None
    truth_relations: tuple[tuple[int, str, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.truth_instances is not None:
            object.__setattr__(
                self, "truth_instances", tuple(self.truth_instances)
            )
        if self.truth_relations is not None:
            object.__setattr__(
                self, "truth_relations", tuple(tuple(r) for r in self.truth_relations)
            )
            n = len(self.truth_instances or ())
            for si, pred, oi in self.truth_relations:
                if not (0 <= si < n and 0 <= oi < n):
                    raise DatasetError(
                        f"image {self.image_id}: truth relation ({si}, {pred!r}, {oi}) "
                        f"indexes outside {n} truth instances"
                    )

    @property
    def has_truth(self) -> bool:
        return self.truth_instances is not None


@dataclass(frozen=True)
class Vocabulary:
    """Ordered, duplicate-free label lists shared by a whole dataset."""

    objects: tuple[str, ...]
    attributes: tuple[str, ...]
    predicates: tuple[str, ...]

    def __post_init__(self):
        for name in ("objects", "attributes", "predicates"):
            labels = getattr(self, name)
            object.__setattr__(self, name, tuple(labels))
            if len(set(labels)) != len(labels):
                raise DatasetError(f"vocabulary {name} contains duplicates")

    def object_index(self, category: str) -> int:
        try:
            return self.objects.index(category)
        except ValueError:
            raise DatasetError(f"unknown object category {category!r}") from None

    def attribute_index(self, attribute: str) -> int:
        try:
            return self.attributes.index(attribute)
        except ValueError:
            raise DatasetError(f"unknown attribute {attribute!r}") from None


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    vocab: Vocabulary
    synonym_map: SynonymMap

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        n_obj = len(self.vocab.objects)
        n_attr = len(self.vocab.attributes)
        for img in self.images:
            for c in img.candidates:
                if len(c.object_scores) != n_obj:
                    raise DatasetError(
                        f"image {img.image_id}: object_scores has length "
                        f"{len(c.object_scores)}, vocabulary has {n_obj}"
                    )
                if len(c.attribute_scores) != n_attr:
                    raise DatasetError(
                        f"image {img.image_id}: attribute_scores has length "
                        f"{len(c.attribute_scores)}, vocabulary has {n_attr}"
                    )


# ---------------------------------------------------------------------------
# File format (JSON Lines; header line, then one image per line)
# ---------------------------------------------------------------------------


def _image_to_obj(img: ImageRecord) -> dict:
    obj: dict = {
        "image_id": img.image_id,
        "candidates": [
            {
                "box": c.box.as_list(),
                "object_scores": c.object_scores.tolist(),
                "attribute_scores": c.attribute_scores.tolist(),
            }
            for c in img.candidates
        ],
    }
    if img.truth_instances is not None:
        obj["truth_instances"] = [
            {
                "box": t.box.as_list(),
                "category": t.category,
                "attributes": sorted(t.attributes),
            }
            for t in img.truth_instances
        ]
        obj["truth_relations"] = [list(r) for r in (img.truth_relations or ())]
    return obj


def _image_from_obj(obj: dict) -> ImageRecord:
    image_id = str(obj.get("image_id", "<missing image_id>"))

    def need(d: dict, key: str, where: str):
        if key not in d:
            raise DatasetError(f"image {image_id}: missing field {key!r} in {where}")
        return d[key]

    candidates = []
    for c in need(obj, "candidates", "image record"):
        box = BoundingBox(*need(c, "box", "candidate"))
        candidates.append(
            CandidateBox(
                box=box,
                object_scores=np.asarray(need(c, "object_scores", "candidate")),
                attribute_scores=np.asarray(need(c, "attribute_scores", "candidate")),
            )
        )
    truth_instances = None
    truth_relations = None
    if obj.get("truth_instances") is not None:
        truth_instances = tuple(
            GroundTruthInstance(
                box=BoundingBox(*need(t, "box", "truth instance")),
                category=str(need(t, "category", "truth instance")),
                attributes=frozenset(t.get("attributes", [])),
            )
            for t in obj["truth_instances"]
        )
        truth_relations = tuple(
            (int(s), str(p), int(o)) for s, p, o in obj.get("truth_relations", [])
        )
    return ImageRecord(image_id, tuple(candidates), truth_instances, truth_relations)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset as JSON Lines (header line + one line per image)."""
    path = Path(path)
    header = {
        "schema_version": 1,
        "vocab_objects": list(dataset.vocab.objects),
        "vocab_attributes": list(dataset.vocab.attributes),
        "vocab_predicates": list(dataset.vocab.predicates),
        "synonyms": dict(sorted(dataset.synonym_map.entries.items())),
    }
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for img in dataset.images:
            f.write(
                json.dumps(_image_to_obj(img), sort_keys=True, separators=(",", ":"))
                + "\n"
            )


def load_dataset(path: str | Path) -> Dataset:
    """Load a JSON-Lines dataset file; raises DatasetError on schema violations."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: bad header line: {e.msg}") from e
    for key in ("vocab_objects", "vocab_attributes", "vocab_predicates"):
        if key not in header:
            raise DatasetError(f"{path}: header missing field {key!r}")
    vocab = Vocabulary(
        objects=tuple(header["vocab_objects"]),
        attributes=tuple(header["vocab_attributes"]),
        predicates=tuple(header["vocab_predicates"]),
    )
    images = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:{lineno}: bad image line: {e.msg}") from e
        images.append(_image_from_obj(obj))
    return Dataset(
        images=tuple(images),
        vocab=vocab,
        synonym_map=SynonymMap(header.get("synonyms", {})),
    )


# ---------------------------------------------------------------------------
# Query matching against ground truth
# ---------------------------------------------------------------------------


def _normalized_truth(
    img: ImageRecord, syn: SynonymMap
) -> tuple[tuple[GroundTruthInstance, ...], set[tuple[int, str, int]]]:
    instances = tuple(
        GroundTruthInstance(
            box=t.box,
            category=syn.canonical(t.category),
            attributes=frozenset(syn.canonical(a) for a in t.attributes),
        )
        for t in img.truth_instances or ()
    )
    relations = {
        (s, syn.canonical(p), o) for s, p, o in (img.truth_relations or ())
    }
    return instances, relations


def iter_assignments(
    img: ImageRecord, sg: SceneGraph, syn: SynonymMap
) -> tuple[list[dict[int, int]], list[dict[int, int]]]:
    """Enumerate injective query-node -> truth-instance assignments.

    Returns (category_matching, satisfying): assignments where every node
    lands on an instance of its category, and the subset of those that also
    satisfy every query attribute and relationship.  Labels on both sides
    are normalized through ``syn`` first.
    """
    if not img.has_truth:
        raise DatasetError(f"image {img.image_id} has no ground truth")
    sg = normalize_labels(sg, syn)
    instances, relations = _normalized_truth(img, syn)

    candidates_per_node = []
    for nid, cat in sg.objects:
        candidates_per_node.append(
            [i for i, inst in enumerate(instances) if inst.category == cat]
        )
    category_matching: list[dict[int, int]] = []
    satisfying: list[dict[int, int]] = []
    node_ids = [nid for nid, _ in sg.objects]
    for combo in itertools.product(*candidates_per_node):
        if len(set(combo)) != len(combo):
            continue
        assignment = dict(zip(node_ids, combo))
        category_matching.append(assignment)
        ok = all(
            a in instances[assignment[nid]].attributes for nid, a in sg.attributes
        ) and all(
            (assignment[s], p, assignment[o]) in relations
            for s, p, o in sg.relationships
        )
        if ok:
            satisfying.append(assignment)
    return category_matching, satisfying


def match_query(img: ImageRecord, sg: SceneGraph, syn: SynonymMap) -> bool:
    """True iff some injective assignment of query nodes to truth instances
    matches every category, attribute, and relationship."""
    _, satisfying = iter_assignments(img, sg, syn)
    return bool(satisfying)


def split_dataset(
    dataset: Dataset, train_fraction: float, seed: int
) -> tuple[Dataset, Dataset]:
    """Disjoint (train, test) partition with sizes (floor(n*f), n - floor(n*f)).

    Deterministic for a given seed; image order within each side follows the
    original dataset order.
    """
    n = len(dataset.images)
    if n < 2:
        raise DatasetError("need at least 2 images to split")
    k = math.floor(n * train_fraction)
    if k == 0 or k == n:
        raise DatasetError(
            f"train_fraction {train_fraction} leaves an empty side for n={n}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train_idx = sorted(int(i) for i in perm[:k])
    test_idx = sorted(int(i) for i in perm[k:])
    make = lambda idx: Dataset(
        images=tuple(dataset.images[i] for i in idx),
        vocab=dataset.vocab,
        synonym_map=dataset.synonym_map,
    )
    return make(train_idx), make(test_idx)
