"""Feature normalization, the ReLU transform, and training-signal kernels.

The model head works on transformed activations: each selected feature is
standardized with training-set statistics and passed through a ReLU, so
negligible activations become exact zeros.  Logits are the binary assignment
matrix applied to the transformed vector.

Also provided: the feature grounding loss (difference of mean activation on
target versus non-target features, scaled by the maximum activation) with
its analytic gradient, and a softmax cross-entropy gradient kernel used to
study the imbalance between class-exclusive and class-shared features.
Neither runs an optimizer; they are verified value/gradient computations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import ValidationError
from .validation import as_float_matrix, require

__all__ = [
    "NormalizationStats",
    "TransformedFeatures",
    "fit_normalization",
    "apply_transform",
    "predict_logits",
    "feature_grounding_loss",
    "feature_grounding_gradient",
    "toy_ce_gradient",
    "fit_active_means",
    "saliency_scale",
    "softmax",
]


class NormalizationStats(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    degenerate: np.ndarray


@dataclass
class TransformedFeatures:
    """Nonnegative transformed activations, one row per sample."""

    values: np.ndarray
    source_head: object = None

    def __post_init__(self):
        self.values = as_float_matrix(self.values, "values")
        if np.any(self.values < 0):
            raise ValidationError("transformed values must be nonnegative")

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]


def fit_normalization(train, selection):
    """Per-feature mean and population std over the training split.

    ``selection`` is a binary vector over raw features; statistics are
    computed for the selected columns in ascending raw index order.  Zero
    standard deviations are replaced by 1 and flagged in ``degenerate``.
    """
    values = train.values if hasattr(train, "values") else as_float_matrix(train, "train")
    require(values.shape[0] >= 1, "training set must be nonempty")
    sel_idx = np.flatnonzero(np.asarray(selection))
    require(sel_idx.size >= 1, "selection must pick at least one feature")
    require(
        int(sel_idx[-1]) < values.shape[1],
        "selection is longer than the feature space",
    )
    cols = values[:, sel_idx]
    mu = cols.mean(axis=0)
    sigma = cols.std(axis=0)
    degenerate = sigma == 0.0
    sigma = np.where(degenerate, 1.0, sigma)
    return NormalizationStats(mu=mu, sigma=sigma, degenerate=degenerate)


def apply_transform(raw, head):
    """ReLU((f - mu) / sigma) over the head's selected features."""
    values = raw.values if hasattr(raw, "values") else as_float_matrix(raw, "raw")
    require(
        values.shape[1] == head.selection.shape[0],
        f"raw feature count {values.shape[1]} does not match the head "
        f"({head.selection.shape[0]})",
    )
    cols = values[:, head.selected_indices]
    out = np.maximum(0.0, (cols - head.mu) / head.sigma)
    return TransformedFeatures(values=out, source_head=head)


def predict_logits(f_star, head):
    """Logits o = W* f* and the argmax class (lowest index on ties).

    A single vector returns (o, c_hat); a matrix returns one row/entry per
    sample.
    """
    w = head.assignment.astype(np.float64)
    arr = np.asarray(f_star, dtype=np.float64)
    if arr.ndim == 1:
        require(arr.shape[0] == w.shape[1], "feature count mismatch")
        logits = w @ arr
        return logits, int(np.argmax(logits))
    require(arr.shape[1] == w.shape[1], "feature count mismatch")
    logits = arr @ w.T
    return logits, np.argmax(logits, axis=1)


def _target_split(f_star, gt_features):
    k = f_star.shape[0]
    target = np.zeros(k, dtype=bool)
    idx = np.asarray(sorted(int(i) for i in gt_features), dtype=np.int64)
    require(idx.size >= 1, "gt_features must be nonempty")
    require(0 <= idx[0] and idx[-1] < k, "gt_features out of range")
    require(np.unique(idx).size == idx.size, "gt_features must be distinct")
    require(idx.size < k, "gt_features must leave a nonempty complement")
    target[idx] = True
    return target


def feature_grounding_loss(f_star, gt_features, double_complement=False):
    """L = -(mean over target features - mean over the rest) / max(f*).

    Zero when the vector is all zero.  ``double_complement`` doubles the
    subtrahend, reproducing a published variant; off by default.
    """
    arr = np.asarray(f_star, dtype=np.float64)
    require(arr.ndim == 1, "f_star must be a vector")
    require(np.all(arr >= 0), "f_star must be nonnegative")
    target = _target_split(arr, gt_features)
    m = float(arr.max())
    if m == 0.0:
        return 0.0
    factor = 2.0 if double_complement else 1.0
    a = float(arr[target].mean())
    b = factor * float(arr[~target].mean())
    return -(a - b) / m


def feature_grounding_gradient(f_star, gt_features, double_complement=False):
    """Analytic gradient of feature_grounding_loss wrt each entry.

    The maximum is treated as a subgradient at the lowest-index argmax, so
    that entry carries the quotient-rule term on top of its group term.
    """
    arr = np.asarray(f_star, dtype=np.float64)
    require(arr.ndim == 1, "f_star must be a vector")
    require(np.all(arr >= 0), "f_star must be nonnegative")
    target = _target_split(arr, gt_features)
    grad = np.zeros_like(arr)
    m = float(arr.max())
    if m == 0.0:
        return grad
    factor = 2.0 if double_complement else 1.0
    n_t = int(target.sum())
    n_c = arr.shape[0] - n_t
    grad[target] = -1.0 / (n_t * m)
    grad[~target] = factor / (n_c * m)
    a = float(arr[target].mean())
    b = factor * float(arr[~target].mean())
    j_star = int(np.argmax(arr))
    grad[j_star] += (a - b) / (m * m)
    return grad


def softmax(logits):
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def toy_ce_gradient(w_star, f_star, label):
    """Gradient of softmax cross-entropy of o = W* f* with respect to f*.

    Equals W*^T (softmax(o) - onehot(label)).  With two classes sharing
    n - 1 features, the shared features receive near-cancelling
    contributions while each exclusive feature does not; the returned vector
    exposes that imbalance directly.
    """
    w = np.asarray(w_star, dtype=np.float64)
    arr = np.asarray(f_star, dtype=np.float64)
    require(w.ndim == 2 and arr.ndim == 1, "need a matrix head and a vector input")
    require(w.shape[1] == arr.shape[0], "feature count mismatch")
    require(0 <= int(label) < w.shape[0], "label out of range")
    p = softmax(w @ arr)
    p[int(label)] -= 1.0
    return w.T @ p


def fit_active_means(train_f_star):
    """Per-feature mean of the upper component of a two-Gaussian fit.

    ReLU features concentrate a point mass at zero next to an active mode;
    the upper component mean estimates the typical active level.  Fallbacks:
    a collapsed or nonpositive upper component uses the mean of strictly
    positive values, and an all-zero feature uses 1.
    """
    from .metrics import fit_gmm2

    values = (
        train_f_star.values
        if hasattr(train_f_star, "values")
        else as_float_matrix(train_f_star, "train_f_star")
    )
    k = values.shape[1]
    out = np.ones(k, dtype=np.float64)
    for j in range(k):
        col = values[:, j]
        positive = col[col > 0]
        if positive.size == 0:
            out[j] = 1.0
            continue
        fallback = float(positive.mean())
        if col.size < 2:
            out[j] = fallback
            continue
        fit = fit_gmm2(col)
        if fit.mu2 - fit.mu1 < 1e-9 or fit.mu2 <= 0:
            out[j] = fallback
        else:
            out[j] = fit.mu2
    return out


def saliency_scale(f_star, active_mean):
    """min(f*/active_mean, 1) per feature: how active relative to typical."""
    arr = np.asarray(f_star, dtype=np.float64)
    mean = np.asarray(active_mean, dtype=np.float64)
    require(np.all(mean > 0), "active_mean must be strictly positive")
    return np.minimum(arr / mean, 1.0)
