"""Deterministic synthetic datasets with controllable planted structure.

Scenes are laid out as axis-aligned boxes on a fixed canvas.  Ground-truth
relations are derived from box geometry by a small predicate library, the
detector is simulated by jittering truth boxes and adding distractors, and
the query set is emitted alongside.  Four bias modes control how positives
are arranged:

  single_instance   one instance of each query category per positive
  any_instance      several subject instances, all satisfying the query
  disambiguating    several subject instances, exactly one satisfying
  mixed             per-query blend of single_instance and any_instance
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import (
    BoundingBox,
    CandidateBox,
    Dataset,
    GroundTruthInstance,
    ImageRecord,
    Vocabulary,
    intersection_area,
)
from .scenegraph import SceneGraph, SynonymMap

BIAS_MODES = ("single_instance", "any_instance", "disambiguating", "mixed")

OBJECT_WORDS = (
    "person", "dog", "hat", "chair", "table", "car", "tire", "road",
    "shirt", "glasses", "bench", "horse", "lamp", "cup", "book", "bird",
    "bike", "tree", "sign", "boat", "pillow", "couch", "helmet", "board",
    "kite", "fence", "bottle", "phone", "clock", "plant", "shoe", "bag",
    "window", "door", "ball", "crate",
)
ATTRIBUTE_WORDS = ("red", "blue", "green", "small", "large", "striped", "dark", "shiny")


class SynthesisError(ValueError):
    """Infeasible or inconsistent generator configuration."""


@dataclass(frozen=True)
class SynthConfig:
    canvas_width: int = 640
    canvas_height: int = 480
    n_queries: int = 8
    positives_per_query: int = 12
    hard_negatives_per_query: int = 0
    background_images: int = 40
    bias_mode: str = "single_instance"
    mixed_single_fraction: float = 0.8
    duplicate_min: int = 2
    duplicate_max: int = 3
    background_instances_min: int = 1
    background_instances_max: int = 3
    distractors_per_image: int = 4
    jitter_sigma_frac: float = 0.05
    score_boost: float = 2.0
    predicates: tuple[str, ...] = ("on", "left_of", "above", "wearing")
    n_background_categories: int = 4
    query_attribute_fraction: float = 0.5
    min_positives: int = 1
    max_place_attempts: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if self.bias_mode not in BIAS_MODES:
            raise SynthesisError(
                f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}"
            )
        for p in self.predicates:
            if p not in _PLACERS:
                raise SynthesisError(f"no geometric definition for predicate {p!r}")
        if self.canvas_width < 50 or self.canvas_height < 50:
            raise SynthesisError("canvas must be at least 50x50")
        if self.n_queries < 1 or self.positives_per_query < 1:
            raise SynthesisError("need at least one query and one positive per query")
        if self.positives_per_query < self.min_positives:
            raise SynthesisError(
                f"positives_per_query={self.positives_per_query} is below "
                f"min_positives={self.min_positives}"
            )
        if not (2 <= self.duplicate_min <= self.duplicate_max):
            raise SynthesisError("need 2 <= duplicate_min <= duplicate_max")
        if not (0.0 <= self.mixed_single_fraction <= 1.0):
            raise SynthesisError("mixed_single_fraction must be in [0, 1]")
        if not (0.0 <= self.query_attribute_fraction <= 1.0):
            raise SynthesisError("query_attribute_fraction must be in [0, 1]")
        if self.jitter_sigma_frac < 0 or self.score_boost < 0:
            raise SynthesisError("noise parameters must be nonnegative")
        if self.max_place_attempts < 1:
            raise SynthesisError("max_place_attempts must be >= 1")


def load_synth_config(path: str | Path) -> SynthConfig:
    """Read a SynthConfig from a TOML or JSON file; unknown keys are errors."""
    path = Path(path)
    if path.suffix == ".toml":
        import tomli

        doc = tomli.loads(path.read_text())
    else:
        doc = json.loads(path.read_text())
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(doc) - known
    if unknown:
        raise SynthesisError(f"unknown config keys: {sorted(unknown)}")
    if "predicates" in doc:
        doc["predicates"] = tuple(doc["predicates"])
    return SynthConfig(**doc)


def config_defaults_help() -> str:
    """One line per SynthConfig field with its default, for CLI help."""
    lines = [f"  {f.name} (default {getattr(SynthConfig(), f.name)!r})" for f in fields(SynthConfig)]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Geometric predicate library
# ---------------------------------------------------------------------------


def _h_overlap(s: BoundingBox, o: BoundingBox) -> float:
    return max(0.0, min(s.x + s.w, o.x + o.w) - max(s.x, o.x))


def predicate_holds(
    pred: str, s: BoundingBox, o: BoundingBox, canvas_w: float, canvas_h: float
) -> bool:
    """Evaluate the geometric definition of a predicate on (subject, object)."""
    if pred == "on":
        return (
            abs((s.y + s.h) - o.y) <= 0.1 * o.h
            and _h_overlap(s, o) >= 0.5 * s.w
        )
    if pred == "wearing":
        return intersection_area(s, o) >= 0.9 * o.area
    if pred == "left_of":
        return (o.cx - s.cx) >= 0.05 * canvas_w
    if pred == "above":
        return (o.cy - s.cy) >= 0.05 * canvas_h
    raise SynthesisError(f"no geometric definition for predicate {pred!r}")


def _predicate_clearly_absent(
    pred: str, s: BoundingBox, o: BoundingBox, canvas_w: float, canvas_h: float
) -> bool:
    """Strictly stronger negation used when planting non-satisfying boxes,
    keeping planted negatives away from the decision boundary."""
    if pred == "on":
        return (
            abs((s.y + s.h) - o.y) > 0.3 * o.h or _h_overlap(s, o) < 0.2 * s.w
        )
    if pred == "wearing":
        return intersection_area(s, o) < 0.5 * o.area
    if pred == "left_of":
        return (o.cx - s.cx) < -0.02 * canvas_w
    if pred == "above":
        return (o.cy - s.cy) < -0.02 * canvas_h
    raise SynthesisError(f"no geometric definition for predicate {pred!r}")


def derive_truth_relations(
    instances: list[GroundTruthInstance],
    predicates: tuple[str, ...],
    canvas_w: float,
    canvas_h: float,
) -> tuple[tuple[int, str, int], ...]:
    """Label every ordered instance pair with every predicate that holds."""
    out = []
    for i, a in enumerate(instances):
        for j, b in enumerate(instances):
            if i == j:
                continue
            for pred in predicates:
                if predicate_holds(pred, a.box, b.box, canvas_w, canvas_h):
                    out.append((i, pred, j))
    return tuple(out)


# ---------------------------------------------------------------------------
# Query composition (pure function of the config)
# ---------------------------------------------------------------------------


def _object_word(k: int) -> str:
    return OBJECT_WORDS[k] if k < len(OBJECT_WORDS) else f"thing{k:03d}"


def synth_queries(config: SynthConfig) -> list[SceneGraph]:
    """The emitted query set: two objects, one relationship, optional subject
    attribute.  Query categories are disjoint across queries so that
    positive-set membership is controlled entirely by this generator."""
    n_attr = round(config.query_attribute_fraction * config.n_queries)
    queries = []
    for i in range(config.n_queries):
        subject = _object_word(2 * i)
        obj = _object_word(2 * i + 1)
        pred = config.predicates[i % len(config.predicates)]
        attributes = ()
        if i < n_attr:
            attributes = ((0, ATTRIBUTE_WORDS[i % len(ATTRIBUTE_WORDS)]),)
        queries.append(
            SceneGraph(
                objects=((0, subject), (1, obj)),
                attributes=attributes,
                relationships=((0, pred, 1),),
            )
        )
    return queries


def synth_vocabulary(config: SynthConfig) -> Vocabulary:
    n = 2 * config.n_queries
    objects = [_object_word(k) for k in range(n)]
    objects += [_object_word(n + k) for k in range(config.n_background_categories)]
    return Vocabulary(
        objects=tuple(objects),
        attributes=ATTRIBUTE_WORDS,
        predicates=config.predicates,
    )


# ---------------------------------------------------------------------------
# Box placement
# ---------------------------------------------------------------------------


def _uniform_box(
    rng: np.random.Generator,
    w_range: tuple[float, float],
    h_range: tuple[float, float],
    cw: float,
    ch: float,
) -> BoundingBox:
    w = rng.uniform(*w_range) * cw
    h = rng.uniform(*h_range) * ch
    return BoundingBox(rng.uniform(0, cw - w), rng.uniform(0, ch - h), w, h)


def _place_on(rng, cw, ch):
    o_w = rng.uniform(0.25, 0.5) * cw
    o_h = rng.uniform(0.1, 0.25) * ch
    o = BoundingBox(
        rng.uniform(0, cw - o_w), rng.uniform(0.4 * ch, ch - o_h), o_w, o_h
    )
    s_w = rng.uniform(0.4, 0.95) * o_w
    s_h = rng.uniform(0.08, 0.3) * ch
    s_y = o.y - s_h + rng.uniform(-0.09, 0.09) * o_h
    if s_y < 0:
        return None
    s = BoundingBox(rng.uniform(o.x, o.x + o.w - s_w), s_y, s_w, s_h)
    return s, o


def _place_wearing(rng, cw, ch):
    s = _uniform_box(rng, (0.25, 0.5), (0.3, 0.6), cw, ch)
    o_w = rng.uniform(0.15, 0.4) * s.w
    o_h = rng.uniform(0.15, 0.4) * s.h
    o = BoundingBox(
        rng.uniform(s.x, s.x + s.w - o_w), rng.uniform(s.y, s.y + s.h - o_h), o_w, o_h
    )
    return s, o


def _place_left_of(rng, cw, ch):
    s_w = rng.uniform(0.08, 0.25) * cw
    s_h = rng.uniform(0.08, 0.3) * ch
    s = BoundingBox(rng.uniform(0, 0.45 * cw - s_w), rng.uniform(0, ch - s_h), s_w, s_h)
    o_w = rng.uniform(0.08, 0.25) * cw
    o_h = rng.uniform(0.08, 0.3) * ch
    o = BoundingBox(rng.uniform(0.55 * cw, cw - o_w), rng.uniform(0, ch - o_h), o_w, o_h)
    return s, o


def _place_above(rng, cw, ch):
    s_w = rng.uniform(0.08, 0.25) * cw
    s_h = rng.uniform(0.08, 0.25) * ch
    s = BoundingBox(rng.uniform(0, cw - s_w), rng.uniform(0, 0.4 * ch - s_h), s_w, s_h)
    o_w = rng.uniform(0.08, 0.25) * cw
    o_h = rng.uniform(0.08, 0.25) * ch
    o = BoundingBox(rng.uniform(0, cw - o_w), rng.uniform(0.6 * ch, ch - o_h), o_w, o_h)
    return s, o


_PLACERS = {
    "on": _place_on,
    "wearing": _place_wearing,
    "left_of": _place_left_of,
    "above": _place_above,
}


def _place_related_pair(
    pred: str, rng: np.random.Generator, config: SynthConfig
) -> tuple[BoundingBox, BoundingBox]:
    cw, ch = config.canvas_width, config.canvas_height
    for _ in range(config.max_place_attempts):
        placed = _PLACERS[pred](rng, cw, ch)
        if placed is None:
            continue
        s, o = placed
        if predicate_holds(pred, s, o, cw, ch):
            return s, o
    raise SynthesisError(
        f"could not place a satisfying {pred!r} pair in "
        f"{config.max_place_attempts} attempts"
    )


def _place_extra_satisfying(
    pred: str, o: BoundingBox, rng: np.random.Generator, config: SynthConfig
) -> BoundingBox:
    """Another subject box that also satisfies pred with the same object."""
    cw, ch = config.canvas_width, config.canvas_height
    for _ in range(config.max_place_attempts):
        placed = _PLACERS[pred](rng, cw, ch)
        if placed is None:
            continue
        s = placed[0]
        if pred == "on":
            s_y = o.y - s.h + rng.uniform(-0.09, 0.09) * o.h
            if s_y < 0 or s.w > o.w:
                continue
            s = BoundingBox(rng.uniform(o.x, o.x + o.w - s.w), s_y, s.w, s.h)
        elif pred == "wearing":
            # A second wearer must still contain the worn box.
            pad_w = rng.uniform(1.05, 1.6)
            pad_h = rng.uniform(1.05, 1.6)
            w, h = o.w * pad_w / 0.3, o.h * pad_h / 0.3
            x = rng.uniform(max(0.0, o.x + o.w - w), min(o.x, cw - w))
            y = rng.uniform(max(0.0, o.y + o.h - h), min(o.y, ch - h))
            if w <= 0 or h <= 0:
                continue
            try:
                s = BoundingBox(x, y, w, h)
            except ValueError:
                continue
        if predicate_holds(pred, s, o, cw, ch):
            return s
    raise SynthesisError(
        f"could not place an extra satisfying subject for {pred!r}"
    )


def _place_non_satisfying(
    pred: str, o: BoundingBox, rng: np.random.Generator, config: SynthConfig
) -> BoundingBox:
    """A subject box clearly not in pred with the object box."""
    cw, ch = config.canvas_width, config.canvas_height
    for _ in range(config.max_place_attempts):
        s = _uniform_box(rng, (0.08, 0.3), (0.08, 0.3), cw, ch)
        if _predicate_clearly_absent(pred, s, o, cw, ch):
            return s
    raise SynthesisError(
        f"could not place a non-satisfying subject for {pred!r}"
    )


# ---------------------------------------------------------------------------
# Scene assembly
# ---------------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.clip(1.0 / (1.0 + np.exp(-z)), 0.0, 1.0)


def _candidate_for_instance(
    inst: GroundTruthInstance,
    vocab: Vocabulary,
    rng: np.random.Generator,
    config: SynthConfig,
) -> CandidateBox:
    sigma = config.jitter_sigma_frac * max(inst.box.w, inst.box.h)
    dx, dy, dw, dh = rng.normal(0.0, sigma, size=4) if sigma > 0 else (0, 0, 0, 0)
    box = BoundingBox(
        inst.box.x + dx,
        inst.box.y + dy,
        max(inst.box.w + dw, 1.0),
        max(inst.box.h + dh, 1.0),
    )
    logits = rng.standard_normal(len(vocab.objects))
    logits[vocab.objects.index(inst.category)] += config.score_boost
    attr_logits = rng.standard_normal(len(vocab.attributes))
    for k, a in enumerate(vocab.attributes):
        attr_logits[k] += config.score_boost if a in inst.attributes else -config.score_boost
    return CandidateBox(box, _softmax(logits), _sigmoid(attr_logits))


def _distractor_candidate(
    vocab: Vocabulary, rng: np.random.Generator, config: SynthConfig
) -> CandidateBox:
    box = _uniform_box(
        rng, (0.05, 0.3), (0.05, 0.3), config.canvas_width, config.canvas_height
    )
    logits = rng.standard_normal(len(vocab.objects))
    attr_logits = rng.standard_normal(len(vocab.attributes)) - config.score_boost
    return CandidateBox(box, _softmax(logits), _sigmoid(attr_logits))


def _background_instances(
    vocab: Vocabulary, rng: np.random.Generator, config: SynthConfig
) -> list[GroundTruthInstance]:
    bg_categories = vocab.objects[2 * config.n_queries :]
    if not bg_categories:
        return []
    n = int(
        rng.integers(
            config.background_instances_min, config.background_instances_max + 1
        )
    )
    out = []
    for _ in range(n):
        cat = bg_categories[int(rng.integers(len(bg_categories)))]
        attrs = frozenset()
        if rng.random() < 0.4:
            attrs = frozenset({vocab.attributes[int(rng.integers(len(vocab.attributes)))]})
        out.append(
            GroundTruthInstance(
                box=_uniform_box(
                    rng, (0.05, 0.3), (0.05, 0.3),
                    config.canvas_width, config.canvas_height,
                ),
                category=cat,
                attributes=attrs,
            )
        )
    return out


def _assemble_image(
    image_id: str,
    instances: list[GroundTruthInstance],
    vocab: Vocabulary,
    rng: np.random.Generator,
    config: SynthConfig,
) -> ImageRecord:
    relations = derive_truth_relations(
        instances, config.predicates, config.canvas_width, config.canvas_height
    )
    candidates = [
        _candidate_for_instance(inst, vocab, rng, config) for inst in instances
    ]
    candidates += [
        _distractor_candidate(vocab, rng, config)
        for _ in range(config.distractors_per_image)
    ]
    return ImageRecord(
        image_id=image_id,
        candidates=tuple(candidates),
        truth_instances=tuple(instances),
        truth_relations=relations,
    )


def _query_parts(sg: SceneGraph) -> tuple[str, str, str, tuple[str, ...]]:
    (s_id, subject), (_, obj) = sg.objects
    pred = sg.relationships[0][1]
    return subject, obj, pred, sg.attributes_of(s_id)


def _positive_instances(
    sg: SceneGraph,
    bias: str,
    rng: np.random.Generator,
    config: SynthConfig,
) -> list[GroundTruthInstance]:
    subject, obj, pred, attrs = _query_parts(sg)
    attr_set = frozenset(attrs)
    s_box, o_box = _place_related_pair(pred, rng, config)
    subjects = [s_box]
    if bias in ("any_instance", "disambiguating"):
        m = int(rng.integers(config.duplicate_min, config.duplicate_max + 1))
        for _ in range(m - 1):
            if bias == "any_instance":
                subjects.append(_place_extra_satisfying(pred, o_box, rng, config))
            else:
                subjects.append(_place_non_satisfying(pred, o_box, rng, config))
    instances = [
        GroundTruthInstance(box=b, category=subject, attributes=attr_set)
        for b in subjects
    ]
    instances.append(GroundTruthInstance(box=o_box, category=obj))
    return instances


def _hard_negative_instances(
    sg: SceneGraph, rng: np.random.Generator, config: SynthConfig
) -> list[GroundTruthInstance]:
    """Both query categories present (with the query attribute) but the
    relationship is clearly absent for every subject instance."""
    subject, obj, pred, attrs = _query_parts(sg)
    attr_set = frozenset(attrs)
    _, o_box = _place_related_pair(pred, rng, config)
    m = int(rng.integers(config.duplicate_min, config.duplicate_max + 1))
    instances = [
        GroundTruthInstance(
            box=_place_non_satisfying(pred, o_box, rng, config),
            category=subject,
            attributes=attr_set,
        )
        for _ in range(m - 1 if m > 1 else 1)
    ]
    instances.append(GroundTruthInstance(box=o_box, category=obj))
    return instances


def _bias_for_query(qi: int, config: SynthConfig) -> str:
    if config.bias_mode != "mixed":
        return config.bias_mode
    n_single = round(config.mixed_single_fraction * config.n_queries)
    return "single_instance" if qi < n_single else "any_instance"


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    """Generate a dataset as a pure function of (config, seed).

    Emits positives_per_query positives per query (plus optional planted
    hard negatives and pure-background images), with the configured bias
    mode holding by construction.  Use synth_queries(config) for the
    matching query set.
    """
    rng = np.random.default_rng(seed)
    vocab = synth_vocabulary(config)
    queries = synth_queries(config)

    images = []
    counter = 0

    def next_id() -> str:
        nonlocal counter
        counter += 1
        return f"img_{counter - 1:05d}"

    for qi, sg in enumerate(queries):
        bias = _bias_for_query(qi, config)
        for _ in range(config.positives_per_query):
            instances = _positive_instances(sg, bias, rng, config)
            instances += _background_instances(vocab, rng, config)
            images.append(_assemble_image(next_id(), instances, vocab, rng, config))
    for sg in queries:
        for _ in range(config.hard_negatives_per_query):
            instances = _hard_negative_instances(sg, rng, config)
            instances += _background_instances(vocab, rng, config)
            images.append(_assemble_image(next_id(), instances, vocab, rng, config))
    for _ in range(config.background_images):
        instances = _background_instances(vocab, rng, config)
        if not instances:
            instances = _background_instances(vocab, rng, config)
        images.append(_assemble_image(next_id(), instances, vocab, rng, config))

    return Dataset(images=tuple(images), vocab=vocab, synonym_map=SynonymMap({}))
