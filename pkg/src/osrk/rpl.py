"""Reciprocal-point open-set head.

Each known class k owns a reciprocal point ``P[k]`` in embedding space. A
sample is scored against class k by ``d_e - d_d``: the mean squared
distance to ``P[k]`` minus the dot product with it. Larger scores mean
"more like class k". A learnable radius ``R`` bounds the squared distance
of every known sample to its own reciprocal point; at test time a sample
lying closer to the reciprocal point of its best class than the threshold
is rejected as unknown.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError, NumericalError, ShapeError

UNKNOWN = -1
USE_R = "R"


@dataclass
class RplHead:
    points: np.ndarray  # (N, m)
    radius: np.ndarray  # shape () or (N,) when per_class_radius
    gamma: float = 1.0
    lam: float = 0.1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.radius = np.asarray(self.radius, dtype=np.float64)
        problems = []
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] < 2:
            problems.append(f"points: need shape (N>=2, m>=2), got {self.points.shape}")
        if self.radius.shape not in ((), (self.points.shape[0],)):
            problems.append(f"radius: shape {self.radius.shape} is neither scalar nor per-class")
        if not self.gamma > 0:
            problems.append(f"gamma: must be > 0, got {self.gamma}")
        if not self.lam >= 0:
            problems.append(f"lambda: must be >= 0, got {self.lam}")
        if problems:
            raise ConfigError("invalid reciprocal-point head: " + "; ".join(problems))
        self.clamp_radius()

    @property
    def n_classes(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def per_class_radius(self) -> bool:
        return self.radius.ndim == 1

    def clamp_radius(self):
        np.maximum(self.radius, 0.0, out=self.radius)

    def radius_for(self, labels: np.ndarray) -> np.ndarray:
        return self.radius[labels] if self.per_class_radius else np.broadcast_to(self.radius, np.shape(labels))

    @classmethod
    def create(cls, n_classes, dim, gamma=1.0, lam=0.1, seed=0, per_class_radius=False, point_std=0.1, radius=1.0):
        rng = np.random.default_rng(seed)
        points = point_std * rng.standard_normal((n_classes, dim))
        r = np.full(n_classes, radius) if per_class_radius else np.asarray(radius, dtype=np.float64)
        return cls(points, r, gamma, lam)


def _check_pair(feature, point):
    feature = np.asarray(feature, dtype=np.float64)
    point = np.asarray(point, dtype=np.float64)
    if feature.shape != point.shape:
        raise ShapeError(f"feature shape {feature.shape} does not match point shape {point.shape}")
    return feature, point


def dist_euclid(feature, point, m: int | None = None) -> float:
    feature, point = _check_pair(feature, point)
    m = feature.size if m is None else m
    if m != feature.size:
        raise ShapeError(f"dimension m={m} does not match vector length {feature.size}")
    diff = feature - point
    return float(diff @ diff) / m


def dist_dot(feature, point) -> float:
    feature, point = _check_pair(feature, point)
    return float(feature @ point)


def dist_combined(feature, point, m: int | None = None) -> float:
    return dist_euclid(feature, point, m) - dist_dot(feature, point)


def euclid_matrix(features: np.ndarray, points: np.ndarray) -> np.ndarray:
    """(B, N) mean squared distances between each feature row and each point."""
    diff = features[:, None, :] - points[None, :, :]
    return np.einsum("bnj,bnj->bn", diff, diff) / features.shape[1]


def combined_matrix(features: np.ndarray, points: np.ndarray) -> np.ndarray:
    return euclid_matrix(features, points) - features @ points.T


def _check_batch(features, head):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != head.dim:
        raise ShapeError(f"features have dimension {features.shape[1]}, head expects {head.dim}")
    if not np.all(np.isfinite(features)):
        raise NumericalError("non-finite feature value")
    return features


def _check_labels(labels, n_batch, n_classes):
    labels = np.asarray(labels)
    if labels.shape != (n_batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n_batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def class_probabilities(features, head: RplHead) -> np.ndarray:
    """Softmax of ``gamma * d`` over classes; one row per feature (1-D in, 1-D out)."""
    single = np.ndim(features) == 1
    f = _check_batch(features, head)
    probs = _softmax_rows(head.gamma * combined_matrix(f, head.points))
    return probs[0] if single else probs


@dataclass
class LossTerms:
    total: float
    classification: float
    boundary: float
    grad_features: np.ndarray
    grad_points: np.ndarray
    grad_radius: np.ndarray


def _classification(f, labels, head):
    b, m = f.shape
    z = head.gamma * combined_matrix(f, head.points)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    loss = float(np.mean(lse - z[np.arange(b), labels]))
    g = _softmax_rows(z)
    g[np.arange(b), labels] -= 1.0
    g *= head.gamma / b  # dL/dd, shape (B, N)
    gp = g @ head.points
    grad_f = (2.0 / m) * (f * g.sum(axis=1, keepdims=True) - gp) - gp
    gtf = g.T @ f
    grad_p = -(2.0 / m) * (gtf - head.points * g.sum(axis=0)[:, None]) - gtf
    return loss, grad_f, grad_p


def _boundary(f, labels, head):
    b, m = f.shape
    own = head.points[labels]
    diff = f - own
    de = np.einsum("bj,bj->b", diff, diff) / m
    excess = de - head.radius_for(labels)
    active = excess > 0  # subgradient 0 at the kink
    loss = float(np.sum(np.where(active, excess, 0.0)) / b)
    coef = active[:, None] * (2.0 / (m * b))
    grad_f = coef * diff
    grad_p = np.zeros_like(head.points)
    np.add.at(grad_p, labels, -grad_f)
    if head.per_class_radius:
        grad_r = -np.bincount(labels[active], minlength=head.n_classes).astype(np.float64) / b
    else:
        grad_r = np.asarray(-np.count_nonzero(active) / b)
    return loss, grad_f, grad_p, grad_r


def loss_classification(features, labels, head: RplHead):
    """Mean negative log-probability of the true class -> (loss, dL/df, dL/dP)."""
    f = _check_batch(features, head)
    labels = _check_labels(labels, f.shape[0], head.n_classes)
    return _classification(f, labels, head)


def loss_boundary(features, labels, head: RplHead):
    """Mean hinge ``max(d_e(f, P[y]) - R, 0)`` -> (loss, dL/df, dL/dP, dL/dR)."""
    f = _check_batch(features, head)
    labels = _check_labels(labels, f.shape[0], head.n_classes)
    return _boundary(f, labels, head)


def loss_total(features, labels, head: RplHead) -> LossTerms:
    f = _check_batch(features, head)
    labels = _check_labels(labels, f.shape[0], head.n_classes)
    lc, gf_c, gp_c = _classification(f, labels, head)
    lo, gf_o, gp_o, gr_o = _boundary(f, labels, head)
    lam = head.lam
    return LossTerms(
        total=lc + lam * lo,
        classification=lc,
        boundary=lo,
        grad_features=gf_c + lam * gf_o,
        grad_points=gp_c + lam * gp_o,
        grad_radius=lam * gr_o,
    )


@dataclass(frozen=True)
class OpenPrediction:
    class_index: int  # UNKNOWN (-1) when rejected
    distances: np.ndarray  # combined distance to every reciprocal point
    gating_distance: float
    threshold_used: float

    @property
    def is_unknown(self) -> bool:
        return self.class_index == UNKNOWN


def resolve_threshold(head: RplHead, threshold, cls: int) -> float:
    if isinstance(threshold, str):
        if threshold != USE_R:
            raise ArgumentError(f"threshold must be a number or {USE_R!r}, got {threshold!r}")
        return float(head.radius[cls] if head.per_class_radius else head.radius)
    return float(threshold)


def predict_open_batch(features, head: RplHead, gate: str = "euclid", threshold=USE_R) -> list[OpenPrediction]:
    """Closed-set argmax of the combined distance, then reject if the gate is below the threshold."""
    if gate not in ("euclid", "combined"):
        raise ArgumentError(f"gate must be 'euclid' or 'combined', got {gate!r}")
    f = _check_batch(features, head)
    comb = combined_matrix(f, head.points)
    best = np.argmax(comb, axis=1)  # first maximum wins ties
    if gate == "euclid":
        gating = euclid_matrix(f, head.points)[np.arange(len(f)), best]
    else:
        gating = comb[np.arange(len(f)), best]
    out = []
    for i in range(len(f)):
        k = int(best[i])
        thr = resolve_threshold(head, threshold, k)
        cls = UNKNOWN if gating[i] < thr else k
        out.append(OpenPrediction(cls, comb[i].copy(), float(gating[i]), thr))
    return out


def predict_open(feature, head: RplHead, gate: str = "euclid", threshold=USE_R) -> OpenPrediction:
    return predict_open_batch(np.asarray(feature)[None, :], head, gate, threshold)[0]


def gating_distances(features, head: RplHead, gate: str = "euclid") -> np.ndarray:
    return np.array([p.gating_distance for p in predict_open_batch(features, head, gate, -np.inf)])


def calibrate_threshold(features, head: RplHead, gate: str = "euclid", q: float = 5.0) -> float:
    """``q``-th percentile of the gating distances of (known, training) features."""
    if not 0 <= q <= 100:
        raise ArgumentError(f"percentile must lie in [0, 100], got {q}")
    return float(np.percentile(gating_distances(features, head, gate), q))
