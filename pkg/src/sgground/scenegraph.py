"""Scene-graph queries: parsing, validation, label normalization, canonical keys.

A query names a handful of objects, optional attributes on those objects,
and pairwise relationships between them.  Graphs are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field


class SceneGraphError(ValueError):
    """Malformed query document or broken graph invariant."""


@dataclass(frozen=True)
class SceneGraph:
    """Query structure: objects, attributes, and relationships.

    ``objects`` holds (node_id, category) pairs, ``attributes`` holds
    (node_id, attribute) pairs, and ``relationships`` holds
    (subject_id, predicate, object_id) triples.
    """

    objects: tuple[tuple[int, str], ...]
    attributes: tuple[tuple[int, str], ...] = ()
    relationships: tuple[tuple[int, str, int], ...] = ()

    def __post_init__(self):
        ids = [nid for nid, _ in self.objects]
        seen = set()
        for nid in ids:
            if nid in seen:
                raise SceneGraphError(f"duplicate node_id {nid}")
            seen.add(nid)
        for nid, attr in self.attributes:
            if nid not in seen:
                raise SceneGraphError(
                    f"attribute {attr!r} references undeclared node {nid}"
                )
        for sid, pred, oid in self.relationships:
            if sid not in seen:
                raise SceneGraphError(
                    f"relationship {pred!r} references undeclared node {sid}"
                )
            if oid not in seen:
                raise SceneGraphError(
                    f"relationship {pred!r} references undeclared node {oid}"
                )
            if sid == oid:
                raise SceneGraphError(
                    f"relationship {pred!r} relates node {sid} to itself"
                )

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(nid for nid, _ in self.objects)

    def category_of(self, node_id: int) -> str:
        for nid, cat in self.objects:
            if nid == node_id:
                return cat
        raise KeyError(node_id)

    def attributes_of(self, node_id: int) -> tuple[str, ...]:
        return tuple(a for nid, a in self.attributes if nid == node_id)


@dataclass(frozen=True)
class SynonymMap:
    """Surface label -> canonical label.  Canonical labels are fixed points."""

    entries: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for surface, canon in self.entries.items():
            target = self.entries.get(canon, canon)
            if target != canon:
                raise SceneGraphError(
                    f"synonym map is not idempotent: {surface!r} -> {canon!r} -> {target!r}"
                )

    def canonical(self, label: str) -> str:
        return self.entries.get(label, label)


def parse_scene_graph(text: str) -> SceneGraph:
    """Parse a JSON query document into a validated SceneGraph.

    Raises SceneGraphError with line/column on malformed JSON, and on
    dangling node references, duplicate ids, or self-relationships.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneGraphError(
            f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(doc, dict):
        raise SceneGraphError("query document must be a JSON object")
    try:
        objects = tuple(
            (int(o["id"]), str(o["category"])) for o in doc.get("objects", [])
        )
        attributes = tuple(
            (int(a["id"]), str(a["attribute"])) for a in doc.get("attributes", [])
        )
        relationships = tuple(
            (int(r["subject"]), str(r["predicate"]), int(r["object"]))
            for r in doc.get("relationships", [])
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SceneGraphError(f"malformed query document: {e!r}") from e
    if not objects:
        raise SceneGraphError("query declares no objects")
    return SceneGraph(objects, attributes, relationships)


def serialize_scene_graph(sg: SceneGraph) -> str:
    """Inverse of parse_scene_graph: parse(serialize(sg)) == sg."""
    doc = {
        "objects": [{"id": nid, "category": cat} for nid, cat in sg.objects],
        "attributes": [{"id": nid, "attribute": a} for nid, a in sg.attributes],
        "relationships": [
            {"subject": s, "predicate": p, "object": o}
            for s, p, o in sg.relationships
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_synonym_map(text: str) -> SynonymMap:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneGraphError(
            f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(doc, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in doc.items()
    ):
        raise SceneGraphError("synonym map must be a JSON object of strings")
    return SynonymMap(doc)


def normalize_labels(sg: SceneGraph, syn: SynonymMap) -> SceneGraph:
    """Replace every category/attribute/predicate by its canonical label.

    Labels absent from the map pass through unchanged; structure is kept.
    """
    return SceneGraph(
        objects=tuple((nid, syn.canonical(cat)) for nid, cat in sg.objects),
        attributes=tuple((nid, syn.canonical(a)) for nid, a in sg.attributes),
        relationships=tuple(
            (s, syn.canonical(p), o) for s, p, o in sg.relationships
        ),
    )


def canonical_key(sg: SceneGraph) -> str:
    """Deterministic key invariant under node relabeling and list reordering.

    Two queries get equal keys iff they are isomorphic: nodes are sorted by
    (category, attribute multiset), ties are resolved by trying every
    permutation within each tie group and keeping the ordering whose sorted
    relationship list compares smallest.
    """
    descriptors = []
    for nid, cat in sg.objects:
        descriptors.append((cat, tuple(sorted(sg.attributes_of(nid))), nid))
    descriptors.sort(key=lambda d: d[:2])

    # Group consecutive nodes with identical (category, attributes).
    groups: list[list[int]] = []
    for i, d in enumerate(descriptors):
        if i > 0 and d[:2] == descriptors[i - 1][:2]:
            groups[-1].append(d[2])
        else:
            groups.append([d[2]])

    obj_part = [list(d[:2]) for d in descriptors]
    best_rels = None
    for perm_choice in itertools.product(*(itertools.permutations(g) for g in groups)):
        order = [nid for group in perm_choice for nid in group]
        index = {nid: i for i, nid in enumerate(order)}
        rels = sorted((index[s], p, index[o]) for s, p, o in sg.relationships)
        if best_rels is None or rels < best_rels:
            best_rels = rels
    return json.dumps(
        [obj_part, [list(r) for r in best_rels or []]], separators=(",", ":")
    )
