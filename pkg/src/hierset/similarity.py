"""Similarity statistics computed from training activations.

Everything downstream of the optimizer is driven by four train-set
statistics: the class/feature z-score matrix, feature/feature correlation,
the induced class/class similarity, and a per-feature locality bias from
the unpooled maps.  The bundle also records which class pairs count as
"similar" at a given pair density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .validation import require

__all__ = [
    "SimilarityBundle",
    "class_feature_similarity",
    "feature_redundancy",
    "class_class_similarity",
    "select_similar_pairs",
    "locality_bias",
    "build_similarity_bundle",
    "save_similarity_bundle",
    "load_similarity_bundle",
]


@dataclass
class SimilarityBundle:
    """Container for the train-set similarity statistics.

    ``pair_set`` holds class index pairs (i, j) with i < j whose class/class
    similarity reached the selection threshold ``theta``; an infinite theta
    means no pairs were requested.
    """

    class_feature: np.ndarray
    feature_feature: np.ndarray
    class_class: np.ndarray
    locality: np.ndarray
    pair_set: frozenset
    theta: float
    rho: float

    def __post_init__(self):
        self.class_feature = np.asarray(self.class_feature, dtype=np.float64)
        self.feature_feature = np.asarray(self.feature_feature, dtype=np.float64)
        self.class_class = np.asarray(self.class_class, dtype=np.float64)
        self.locality = np.asarray(self.locality, dtype=np.float64)
        c, q = self.class_feature.shape
        require(self.feature_feature.shape == (q, q), "feature_feature must be Q x Q")
        require(self.class_class.shape == (c, c), "class_class must be C x C")
        require(self.locality.shape == (q,), "locality must have length Q")
        if not np.allclose(self.feature_feature, self.feature_feature.T):
            raise ValidationError("feature_feature must be symmetric")
        if not np.allclose(np.diag(self.feature_feature), 0.0):
            raise ValidationError("feature_feature must have a zero diagonal")
        if not np.allclose(self.class_class, self.class_class.T):
            raise ValidationError("class_class must be symmetric")
        self.pair_set = frozenset((int(i), int(j)) for i, j in self.pair_set)
        for i, j in self.pair_set:
            require(0 <= i < j < c, f"pair ({i}, {j}) out of order or range")

    @property
    def n_classes(self):
        return self.class_feature.shape[0]

    @property
    def n_features(self):
        return self.class_feature.shape[1]


def class_feature_similarity(train):
    """Z-score each class's mean activation against the global per-feature stats.

    Uses population statistics over the train split.  Features with zero
    global standard deviation produce an all-zero column.
    """
    values = train.values
    labels = train.labels
    c = train.n_classes
    mean = values.mean(axis=0)
    std = values.std(axis=0)  # population std
    psi = np.zeros((c, values.shape[1]), dtype=np.float64)
    safe = std > 0
    for cls in range(c):
        mask = labels == cls
        if not mask.any():
            raise ValidationError(f"class {cls} has no training samples")
        cls_mean = values[mask].mean(axis=0)
        psi[cls, safe] = (cls_mean[safe] - mean[safe]) / std[safe]
    return psi


def feature_redundancy(train):
    """Pearson correlation between features, diagonal zeroed.

    Zero-variance features correlate with nothing: their rows and columns
    are set to 0.
    """
    values = train.values
    q = values.shape[1]
    std = values.std(axis=0)
    out = np.zeros((q, q), dtype=np.float64)
    safe = np.flatnonzero(std > 0)
    if safe.size >= 2 and values.shape[0] >= 2:
        corr = np.corrcoef(values[:, safe], rowvar=False)
        corr = np.atleast_2d(corr)
        out[np.ix_(safe, safe)] = corr
    np.fill_diagonal(out, 0.0)
    # corrcoef can drift a hair outside [-1, 1]
    np.clip(out, -1.0, 1.0, out=out)
    return out


def class_class_similarity(class_feature):
    """Class/class similarity: the Gram matrix of the z-score rows minus identity."""
    psi = np.asarray(class_feature, dtype=np.float64)
    kk = psi @ psi.T
    kk -= np.eye(psi.shape[0])
    return kk


def select_similar_pairs(class_class, rho):
    """Threshold the class/class similarity to the requested pair density.

    The threshold is the floor(2 * rho * C)-th highest off-diagonal entry of
    the full symmetric matrix (each unordered pair appears twice), and every
    pair at or above it is kept, so ties can enlarge the set.  rho = 0 selects
    nothing and reports an infinite threshold.

    Returns (theta, pair_set) with pairs as (i, j), i < j.
    """
    kk = np.asarray(class_class, dtype=np.float64)
    c = kk.shape[0]
    require(kk.shape == (c, c), "class_class must be square")
    require(rho >= 0, "rho must be >= 0")
    m2 = int(np.floor(2.0 * rho * c))
    if m2 == 0:
        return float("inf"), frozenset()
    off = kk[~np.eye(c, dtype=bool)]
    if m2 > off.size:
        raise ValidationError(
            f"rho={rho} asks for {m2} entries but only {off.size} off-diagonal "
            "entries exist"
        )
    theta = float(np.sort(off)[::-1][m2 - 1])
    pairs = frozenset(
        (i, j) for i in range(c) for j in range(i + 1, c) if kk[i, j] >= theta
    )
    return theta, pairs


def locality_bias(train):
    """Mean spatial concentration per feature, from the unpooled maps.

    Each map is normalized by its mean absolute value and pushed through a
    softmax over cells; the bias is the sample mean of the maximum softmax
    mass.  Without spatial maps every feature gets bias 0.
    """
    q = train.n_features
    if train.spatial_maps is None:
        return np.zeros(q, dtype=np.float64)
    maps = train.spatial_maps
    n, _, h, w = maps.shape
    flat = maps.reshape(n, q, h * w)
    scale = np.abs(flat).mean(axis=2, keepdims=True)
    normed = np.divide(flat, scale, out=np.zeros_like(flat), where=scale > 0)
    shifted = normed - normed.max(axis=2, keepdims=True)
    ex = np.exp(shifted)
    soft = ex / ex.sum(axis=2, keepdims=True)
    return soft.max(axis=2).mean(axis=0)


def build_similarity_bundle(train, rho):
    """Compute all similarity statistics for a train split at pair density rho."""
    require(train.split == "train", "similarity statistics come from the train split")
    psi = class_feature_similarity(train)
    red = feature_redundancy(train)
    kk = class_class_similarity(psi)
    theta, pairs = select_similar_pairs(kk, rho)
    loc = locality_bias(train)
    return SimilarityBundle(
        class_feature=psi,
        feature_feature=red,
        class_class=kk,
        locality=loc,
        pair_set=pairs,
        theta=theta,
        rho=float(rho),
    )


def save_similarity_bundle(bundle, path):
    """Serialize a SimilarityBundle to JSON (infinite theta stored as null)."""
    payload = {
        "class_feature": bundle.class_feature.tolist(),
        "feature_feature": bundle.feature_feature.tolist(),
        "class_class": bundle.class_class.tolist(),
        "locality": bundle.locality.tolist(),
        "pair_set": sorted(map(list, bundle.pair_set)),
        "theta": None if np.isinf(bundle.theta) else float(bundle.theta),
        "rho": bundle.rho,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_similarity_bundle(path):
    with open(path) as fh:
        payload = json.load(fh)
    theta = payload["theta"]
    return SimilarityBundle(
        class_feature=np.asarray(payload["class_feature"], dtype=np.float64),
        feature_feature=np.asarray(payload["feature_feature"], dtype=np.float64),
        class_class=np.asarray(payload["class_class"], dtype=np.float64),
        locality=np.asarray(payload["locality"], dtype=np.float64),
        pair_set=frozenset(tuple(p) for p in payload["pair_set"]),
        theta=float("inf") if theta is None else float(theta),
        rho=float(payload["rho"]),
    )
