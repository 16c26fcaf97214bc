"""Factor-graph construction and MAP inference over candidate assignments.

One discrete variable per query object (domain: the image's candidate
boxes), unary factors from object/attribute scores, binary factors from
calibrated relationship probabilities.  The energy of an assignment is the
negative log of the product of all touched factor values; lower is better.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import ImageRecord, Vocabulary
from .relmodel import RelationshipModel, calibrated_prob_matrix
from .scenegraph import SceneGraph

FACTOR_FLOOR = 1e-10


class InferenceError(ValueError):
    """Unbuildable graph or invalid assignment."""


@dataclass(frozen=True)
class BPParams:
    max_iters: int = 100
    damping: float = 0.5
    tol: float = 1e-6

    def __post_init__(self):
        if not (0.0 <= self.damping < 1.0):
            raise InferenceError(f"damping must be in [0, 1), got {self.damping}")
        if self.max_iters < 1 or self.tol <= 0:
            raise InferenceError("max_iters must be >= 1 and tol > 0")


@dataclass(frozen=True)
class FactorGraph:
    """Discrete factor graph; all variables share one candidate domain.

    unaries[v] is a tuple of per-candidate value vectors for variable v
    (object factor first, then one per query attribute).  binaries holds
    (subject position, object position, matrix) per query relationship.
    All values are floored into [FACTOR_FLOOR, 1] at construction.
    """

    node_ids: tuple[int, ...]
    domain_size: int
    unaries: tuple[tuple[np.ndarray, ...], ...]
    binaries: tuple[tuple[int, int, np.ndarray], ...]

    def __post_init__(self):
        if self.domain_size < 1:
            raise InferenceError("empty candidate domain")
        if len(self.unaries) != len(self.node_ids):
            raise InferenceError("one unary factor group required per variable")
        for group in self.unaries:
            for vec in group:
                if vec.shape != (self.domain_size,):
                    raise InferenceError("unary factor length must match domain")
        for i, j, mat in self.binaries:
            if mat.shape != (self.domain_size, self.domain_size):
                raise InferenceError("binary factor must be |D| x |D|")
            if not (0 <= i < len(self.node_ids) and 0 <= j < len(self.node_ids)):
                raise InferenceError("binary factor references unknown variable")

    @property
    def n_variables(self) -> int:
        return len(self.node_ids)

    def position_of(self, node_id: int) -> int:
        return self.node_ids.index(node_id)


@dataclass(frozen=True)
class Grounding:
    """A complete assignment of query nodes to candidate indices."""

    assignment: dict[int, int]
    energy: float
    converged: bool
    iterations: int


def _floor(values: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=np.float64), FACTOR_FLOOR, 1.0)


def build_factor_graph(
    sg: SceneGraph,
    img: ImageRecord,
    models: dict[str, RelationshipModel],
    vocab: Vocabulary,
) -> FactorGraph:
    """Assemble the factor graph for one query on one image.

    Raises InferenceError naming the offending label when a query category,
    attribute, or predicate is unknown or has no trained model.
    """
    if not img.candidates:
        raise InferenceError(f"image {img.image_id} has no candidate boxes")
    boxes = [c.box for c in img.candidates]
    obj_scores = np.array([c.object_scores for c in img.candidates])
    attr_scores = np.array([c.attribute_scores for c in img.candidates])

    node_ids = sg.node_ids
    unaries = []
    for nid, cat in sg.objects:
        if cat not in vocab.objects:
            raise InferenceError(f"unknown object category {cat!r}")
        group = [_floor(obj_scores[:, vocab.objects.index(cat)])]
        for a in sg.attributes_of(nid):
            if a not in vocab.attributes:
                raise InferenceError(f"unknown attribute {a!r}")
            group.append(_floor(attr_scores[:, vocab.attributes.index(a)]))
        unaries.append(tuple(group))

    position = {nid: i for i, nid in enumerate(node_ids)}
    binaries = []
    for s, pred, o in sg.relationships:
        if pred not in models:
            raise InferenceError(f"no trained model for predicate {pred!r}")
        mat = _floor(calibrated_prob_matrix(models[pred], boxes))
        binaries.append((position[s], position[o], mat))
    return FactorGraph(node_ids, len(boxes), tuple(unaries), tuple(binaries))


def _check_assignment(fg: FactorGraph, assignment: dict[int, int]) -> list[int]:
    """Validate and order an assignment; returns per-variable indices."""
    if set(assignment) != set(fg.node_ids):
        raise InferenceError(
            f"assignment covers nodes {sorted(assignment)}, "
            f"graph has {sorted(fg.node_ids)}"
        )
    idx = [assignment[nid] for nid in fg.node_ids]
    for i in idx:
        if not (0 <= i < fg.domain_size):
            raise InferenceError(f"candidate index {i} outside domain")
    return idx


def energy(fg: FactorGraph, assignment: dict[int, int]) -> float:
    """E = -sum of log factor values at the assignment; nonnegative."""
    idx = _check_assignment(fg, assignment)
    total = 0.0
    for v, group in enumerate(fg.unaries):
        for vec in group:
            total -= float(np.log(vec[idx[v]]))
    for i, j, mat in fg.binaries:
        total -= float(np.log(mat[idx[i], idx[j]]))
    return total


def factorization_components(
    fg: FactorGraph, assignment: dict[int, int]
) -> tuple[float, float]:
    """(product of unary values, that product times the binary values)."""
    idx = _check_assignment(fg, assignment)
    obj_attr = 1.0
    for v, group in enumerate(fg.unaries):
        for vec in group:
            obj_attr *= float(vec[idx[v]])
    full = obj_attr
    for i, j, mat in fg.binaries:
        full *= float(mat[idx[i], idx[j]])
    return obj_attr, full


def _log_potential_tensor(fg: FactorGraph) -> np.ndarray:
    v, d = fg.n_variables, fg.domain_size
    total = np.zeros((d,) * v)
    for pos, group in enumerate(fg.unaries):
        shape = [1] * v
        shape[pos] = d
        for vec in group:
            total = total + np.log(vec).reshape(shape)
    for i, j, mat in fg.binaries:
        shape = [1] * v
        shape[i] = d
        shape[j] = d
        if i < j:
            total = total + np.log(mat).reshape(shape)
        else:
            shape_t = [1] * v
            shape_t[j] = d
            shape_t[i] = d
            total = total + np.log(mat.T).reshape(shape_t)
    return total


def map_inference_exact(fg: FactorGraph, max_states: int = 10**7) -> Grounding:
    """Global minimum-energy assignment by exhaustive enumeration.

    Ties break toward the lexicographically smallest assignment.  Refuses
    search spaces larger than max_states.
    """
    n_states = fg.domain_size**fg.n_variables
    if n_states > max_states:
        raise InferenceError(
            f"search space {n_states} exceeds {max_states}; use map_inference_bp"
        )
    log_pot = _log_potential_tensor(fg)
    flat_best = int(np.argmax(log_pot))
    idx = np.unravel_index(flat_best, log_pot.shape)
    assignment = {nid: int(i) for nid, i in zip(fg.node_ids, idx)}
    return Grounding(
        assignment=assignment,
        energy=energy(fg, assignment),
        converged=True,
        iterations=0,
    )


def map_inference_bp(fg: FactorGraph, params: BPParams | None = None) -> Grounding:
    """Loopy max-product in the log domain with damped synchronous updates.

    Exact on trees; on cyclic graphs the decoded assignment is a (good)
    approximation whose energy never beats the true optimum.  Non-convergence
    is reported through the flag, never raised.  Variable decoding breaks
    ties toward the lowest candidate index.
    """
    params = params or BPParams()
    v, d = fg.n_variables, fg.domain_size
    phi = np.zeros((v, d))
    for pos, group in enumerate(fg.unaries):
        for vec in group:
            phi[pos] += np.log(vec)

    n_factors = len(fg.binaries)
    log_mats = [np.log(mat) for _, _, mat in fg.binaries]
    msg_to_i = np.zeros((n_factors, d))
    msg_to_j = np.zeros((n_factors, d))

    converged = False
    iterations = 0
    for iterations in range(1, params.max_iters + 1):
        belief = phi.copy()
        for f, (i, j, _) in enumerate(fg.binaries):
            belief[i] += msg_to_i[f]
            belief[j] += msg_to_j[f]

        delta = 0.0
        new_to_i = np.empty_like(msg_to_i)
        new_to_j = np.empty_like(msg_to_j)
        for f, (i, j, _) in enumerate(fg.binaries):
            n_i = belief[i] - msg_to_i[f]
            n_j = belief[j] - msg_to_j[f]
            m_j = np.max(log_mats[f] + n_i[:, None], axis=0)
            m_i = np.max(log_mats[f] + n_j[None, :], axis=1)
            m_j -= m_j.max()
            m_i -= m_i.max()
            m_i = params.damping * msg_to_i[f] + (1.0 - params.damping) * m_i
            m_j = params.damping * msg_to_j[f] + (1.0 - params.damping) * m_j
            delta = max(
                delta,
                float(np.max(np.abs(m_i - msg_to_i[f]))),
                float(np.max(np.abs(m_j - msg_to_j[f]))),
            )
            new_to_i[f] = m_i
            new_to_j[f] = m_j
        msg_to_i, msg_to_j = new_to_i, new_to_j
        if delta < params.tol:
            converged = True
            break

    belief = phi.copy()
    for f, (i, j, _) in enumerate(fg.binaries):
        belief[i] += msg_to_i[f]
        belief[j] += msg_to_j[f]
    assignment = {
        nid: int(np.argmax(belief[pos])) for pos, nid in enumerate(fg.node_ids)
    }
    return Grounding(
        assignment=assignment,
        energy=energy(fg, assignment),
        converged=converged,
        iterations=iterations,
    )
