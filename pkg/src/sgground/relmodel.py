"""Pairwise relationship models: geometry features, mixture densities, calibration.

Each predicate gets a diagonal-covariance Gaussian mixture over a 4-d
relative-geometry feature, fit by EM, plus a sigmoid mapping log-density to
a calibrated probability.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import BoundingBox, Dataset, Vocabulary
from .seeding import substream

VAR_FLOOR = 1e-4
WEIGHT_SUM_TOL = 1e-9


class ModelError(ValueError):
    """Bad model file or unusable training input."""


def pair_features(subject: BoundingBox, obj: BoundingBox) -> np.ndarray:
    """4-vector (dx/w_s, dy/h_s, ln(w_o/w_s), ln(h_o/h_s)) from box centers.

    Translation- and scale-invariant: mapping both boxes through
    (x, y) -> (a*x + b, a*y + c) with a > 0 leaves the features unchanged.
    """
    return np.array(
        [
            (obj.cx - subject.cx) / subject.w,
            (obj.cy - subject.cy) / subject.h,
            math.log(obj.w / subject.w),
            math.log(obj.h / subject.h),
        ]
    )


def pair_feature_matrix(boxes: list[BoundingBox]) -> np.ndarray:
    """Features for every ordered pair: shape (n, n, 4); diagonal is zeros."""
    arr = np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64)
    cx = arr[:, 0] + arr[:, 2] / 2.0
    cy = arr[:, 1] + arr[:, 3] / 2.0
    w, h = arr[:, 2], arr[:, 3]
    n = len(boxes)
    out = np.empty((n, n, 4))
    out[:, :, 0] = (cx[None, :] - cx[:, None]) / w[:, None]
    out[:, :, 1] = (cy[None, :] - cy[:, None]) / h[:, None]
    out[:, :, 2] = np.log(w[None, :] / w[:, None])
    out[:, :, 3] = np.log(h[None, :] / h[:, None])
    return out


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture over pair features."""

    k: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    ll_trace: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(
            self, "variances", np.asarray(self.variances, dtype=np.float64)
        )
        if self.weights.shape != (self.k,):
            raise ModelError(f"weights must have shape ({self.k},)")
        if self.means.shape != (self.k, 4) or self.variances.shape != (self.k, 4):
            raise ModelError(f"means/variances must have shape ({self.k}, 4)")
        if abs(float(self.weights.sum()) - 1.0) > WEIGHT_SUM_TOL:
            raise ModelError(
                f"component weights must sum to 1, got {float(self.weights.sum()):.12f}"
            )
        if np.any(self.variances < VAR_FLOOR * (1 - 1e-12)):
            raise ModelError(f"variances below floor {VAR_FLOOR}")


def _log_components(m: GmmModel, x: np.ndarray) -> np.ndarray:
    """Per-component log(w_k * N(x; mu_k, diag sigma2_k)); x shape (..., 4)."""
    diff = x[..., None, :] - m.means
    quad = np.sum(diff * diff / m.variances, axis=-1)
    log_norm = np.sum(np.log(2.0 * np.pi * m.variances), axis=-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(m.weights)
    return log_w - 0.5 * (quad + log_norm)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(
        np.sum(np.exp(a - m), axis=axis)
    )


def gmm_log_density(m: GmmModel, x: np.ndarray) -> np.ndarray | float:
    """Log mixture density; finite for any finite feature vector."""
    out = _logsumexp(_log_components(m, np.asarray(x, dtype=np.float64)))
    return float(out) if np.ndim(out) == 0 else out


def gmm_density(m: GmmModel, x: np.ndarray) -> float:
    """Mixture density sum_k w_k N(x; mu_k, diag sigma2_k); strictly positive
    wherever exp does not underflow."""
    return float(np.exp(gmm_log_density(m, x)))


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def _em_once(
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iters: int,
    rel_tol: float,
) -> GmmModel:
    n = len(x)
    centers = _kmeanspp_centers(x, k, rng)
    assign = np.argmin(
        np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1
    )
    weights = np.maximum(np.bincount(assign, minlength=k) / n, 1e-12)
    weights = weights / weights.sum()
    means = centers.copy()
    global_var = np.maximum(np.var(x, axis=0), VAR_FLOOR)
    variances = np.empty((k, 4))
    for j in range(k):
        members = x[assign == j]
        variances[j] = np.var(members, axis=0) if len(members) > 1 else global_var
    variances = np.maximum(variances, VAR_FLOOR)

    model = GmmModel(k, weights, means, variances)
    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iters):
        log_joint = _log_components(model, x)
        log_norm = _logsumexp(log_joint)
        ll = float(np.sum(log_norm))
        trace.append(ll)
        if np.isfinite(prev_ll) and abs(ll - prev_ll) < rel_tol * abs(prev_ll):
            break
        prev_ll = ll
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        safe_nk = np.maximum(nk, 1e-300)
        weights = np.maximum(nk / n, 1e-12)
        weights = weights / weights.sum()
        means = (resp.T @ x) / safe_nk[:, None]
        second = (resp.T @ (x * x)) / safe_nk[:, None]
        variances = np.maximum(second - means * means, VAR_FLOOR)
        model = GmmModel(k, weights, means, variances)
    return GmmModel(
        model.k, model.weights, model.means, model.variances, ll_trace=tuple(trace)
    )


def fit_gmm(
    samples: np.ndarray,
    k: int,
    seed: int | np.random.Generator,
    n_restarts: int = 10,
    max_iters: int = 200,
    rel_tol: float = 1e-6,
) -> GmmModel:
    """EM fit with k-means++ seeding and restarts, keeping the best likelihood.

    Deterministic given (samples, k, seed).  Requires at least 5*k samples.
    The fitted model carries its per-iteration log-likelihood trace.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 4:
        raise ModelError(f"samples must have shape (n, 4), got {x.shape}")
    if len(x) < 5 * k:
        raise ModelError(f"need at least {5 * k} samples for k={k}, got {len(x)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for child in rng.spawn(n_restarts):
        candidate = _em_once(x, k, child, max_iters, rel_tol)
        if best is None or candidate.ll_trace[-1] > best.ll_trace[-1]:
            best = candidate
    if np.all(best.variances <= VAR_FLOOR * (1 + 1e-12)):
        warnings.warn(
            "all fitted variances at floor; samples are (nearly) identical",
            stacklevel=2,
        )
    return best


@dataclass(frozen=True)
class PlattParams:
    """Sigmoid calibration p(s) = 1 / (1 + exp(A*s + B)) over log-densities.

    A trained calibration has A < 0, so probability increases with density.
    """

    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ModelError(f"non-finite calibration parameters ({self.a}, {self.b})")


def _sigmoid_of_negative(z: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(z)) without overflow, clamped inside (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    ez = np.exp(-z[pos])
    out[pos] = ez / (1.0 + ez)
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return np.clip(out, 1e-300, 1.0 - 1e-16)


def fit_platt(
    scores: np.ndarray,
    labels: np.ndarray,
    max_iters: int = 200,
    grad_tol: float = 1e-8,
) -> PlattParams:
    """Newton fit of the calibration sigmoid with smoothed targets.

    Targets are (n_pos+1)/(n_pos+2) for positives and 1/(n_neg+2) for
    negatives; iteration stops when the gradient norm drops below grad_tol.
    Both classes must be present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ModelError("calibration needs both positive and negative scores")
    t = np.where(y == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def objective(a: float, b: float) -> float:
        z = a * s + b
        pos = z >= 0
        out = np.empty_like(z)
        out[pos] = t[pos] * z[pos] + np.log1p(np.exp(-z[pos]))
        out[~pos] = (t[~pos] - 1.0) * z[~pos] + np.log1p(np.exp(z[~pos]))
        return float(np.sum(out))

    a, b = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    fval = objective(a, b)
    sigma = 1e-12
    for _ in range(max_iters):
        p = _sigmoid_of_negative(a * s + b)
        d2 = p * (1.0 - p)
        h11 = float(np.sum(s * s * d2)) + sigma
        h22 = float(np.sum(d2)) + sigma
        h21 = float(np.sum(s * d2))
        d1 = t - p
        g1 = float(np.sum(s * d1))
        g2 = float(np.sum(d1))
        if math.hypot(g1, g2) < grad_tol:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= 1e-10:
            new_a, new_b = a + step * da, b + step * db
            new_f = objective(new_a, new_b)
            if new_f < fval + 1e-4 * step * gd:
                a, b, fval = new_a, new_b, new_f
                break
            step /= 2.0
        else:
            break
    return PlattParams(a, b)


@dataclass(frozen=True)
class RelationshipModel:
    predicate: str
    gmm: GmmModel
    platt: PlattParams


def calibrated_prob(
    rm: RelationshipModel, subject: BoundingBox, obj: BoundingBox
) -> float:
    """Probability that (subject, obj) stand in rm.predicate, in (0, 1)."""
    log_d = gmm_log_density(rm.gmm, pair_features(subject, obj))
    return float(_sigmoid_of_negative(rm.platt.a * log_d + rm.platt.b))


def calibrated_prob_matrix(
    rm: RelationshipModel, boxes: list[BoundingBox]
) -> np.ndarray:
    """calibrated_prob for every ordered box pair: shape (n, n)."""
    feats = pair_feature_matrix(boxes)
    log_d = gmm_log_density(rm.gmm, feats)
    return _sigmoid_of_negative(rm.platt.a * log_d + rm.platt.b)


def train_relationship_models(
    train: Dataset,
    k: int = 3,
    seed: int = 0,
    neg_ratio: int = 5,
) -> dict[str, RelationshipModel]:
    """Fit one RelationshipModel per predicate seen in the training truth.

    Positives are the geometry features of every truth-related ordered pair;
    negatives are randomly sampled unrelated ordered pairs from the same
    images (neg_ratio per positive).  Predicates with fewer than 5*k
    positive pairs are skipped with a warning.
    """
    syn = train.synonym_map
    positives: dict[str, list[np.ndarray]] = {}
    negative_pool: dict[str, list[np.ndarray]] = {}
    for img in train.images:
        if not img.has_truth:
            continue
        instances = img.truth_instances
        relations = {
            (s, syn.canonical(p), o) for s, p, o in (img.truth_relations or ())
        }
        present = {p for _, p, _ in relations}
        feats = {}

        def feat(i: int, j: int) -> np.ndarray:
            if (i, j) not in feats:
                feats[(i, j)] = pair_features(instances[i].box, instances[j].box)
            return feats[(i, j)]

        for si, pred, oi in relations:
            positives.setdefault(pred, []).append(feat(si, oi))
        for pred in present:
            pool = negative_pool.setdefault(pred, [])
            for i in range(len(instances)):
                for j in range(len(instances)):
                    if i != j and (i, pred, j) not in relations:
                        pool.append(feat(i, j))

    models: dict[str, RelationshipModel] = {}
    for pred in sorted(positives):
        pos = np.array(positives[pred])
        if len(pos) < 5 * k:
            warnings.warn(
                f"predicate {pred!r}: {len(pos)} positive pairs < {5 * k}; skipped",
                stacklevel=2,
            )
            continue
        pool = negative_pool.get(pred, [])
        if not pool:
            warnings.warn(
                f"predicate {pred!r}: no unrelated same-image pairs to calibrate "
                "against; skipped",
                stacklevel=2,
            )
            continue
        gmm = fit_gmm(pos, k, substream(seed, f"em:{pred}"))
        rng_neg = substream(seed, f"neg:{pred}")
        n_neg = min(len(pool), neg_ratio * len(pos))
        idx = rng_neg.choice(len(pool), size=n_neg, replace=False)
        neg = np.array([pool[i] for i in idx])
        scores = np.concatenate(
            [gmm_log_density(gmm, pos), gmm_log_density(gmm, neg)]
        )
        labels = np.concatenate([np.ones(len(pos)), np.zeros(n_neg)])
        platt = fit_platt(scores, labels)
        if platt.a >= 0:
            warnings.warn(
                f"predicate {pred!r}: calibration slope {platt.a:.4f} >= 0; "
                "density is not predictive on this data",
                stacklevel=2,
            )
        models[pred] = RelationshipModel(pred, gmm, platt)
    return models


# ---------------------------------------------------------------------------
# Model file I/O
# ---------------------------------------------------------------------------


def save_models(
    models: dict[str, RelationshipModel],
    vocab: Vocabulary,
    path: str | Path,
    notes: dict | None = None,
) -> None:
    doc = {
        "schema_version": 1,
        "vocab_objects": list(vocab.objects),
        "vocab_attributes": list(vocab.attributes),
        "vocab_predicates": list(vocab.predicates),
        "notes": notes or {},
        "models": {
            pred: {
                "k": rm.gmm.k,
                "weights": rm.gmm.weights.tolist(),
                "means": rm.gmm.means.tolist(),
                "variances": rm.gmm.variances.tolist(),
                "platt_a": rm.platt.a,
                "platt_b": rm.platt.b,
            }
            for pred, rm in sorted(models.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_models(path: str | Path) -> tuple[dict[str, RelationshipModel], Vocabulary]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"{path}: bad model file: {e.msg}") from e
    try:
        vocab = Vocabulary(
            objects=tuple(doc["vocab_objects"]),
            attributes=tuple(doc["vocab_attributes"]),
            predicates=tuple(doc["vocab_predicates"]),
        )
        models = {
            pred: RelationshipModel(
                predicate=pred,
                gmm=GmmModel(
                    k=int(entry["k"]),
                    weights=np.array(entry["weights"]),
                    means=np.array(entry["means"]),
                    variances=np.array(entry["variances"]),
                ),
                platt=PlattParams(float(entry["platt_a"]), float(entry["platt_b"])),
            )
            for pred, entry in doc["models"].items()
        }
    except KeyError as e:
        raise ModelError(f"{path}: model file missing field {e}") from e
    return models, vocab
