"""Split conformal set prediction over the hierarchical head.

Three hierarchical nonconformity scores walk each class's ordered feature
prefix relative to the predicted class: ``up`` accumulates activations along
the shared prefix, ``sel`` additionally charges the activation at the first
divergent position, and ``limited`` gates ``sel``-style scoring on membership
in a fixed level set whose depth is chosen from calibration data.  Two
probability baselines (``thr``, ``aps``) share the same calibration and
prediction plumbing.

Scores are "lower is more conforming" throughout; prediction sets collect the
classes whose score is at most the conservative calibration quantile.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .hierarchy import class_feature_sets
from .transform import predict_logits, softmax
from .validation import as_float_matrix, as_labels, require

__all__ = [
    "VARIANTS",
    "CalibrationRecord",
    "score_matrix",
    "level_membership",
    "true_class_membership",
    "compute_n_limit",
    "conservative_quantile",
    "calibrate",
    "predict_set",
    "predict_sets",
    "evaluate",
    "score_up",
    "score_sel",
    "score_limited",
    "thr_scores",
    "aps_scores",
    "save_calibration_record",
    "load_calibration_record",
]

VARIANTS = ("up", "sel", "limited", "thr", "aps")
_HIERARCHICAL = ("up", "sel", "limited")
_ORDERINGS = ("dynamic", "static")


@dataclass(frozen=True)
class CalibrationRecord:
    """Frozen outcome of calibration: the score variant, target level, the
    fixed level depth (limited variant only), the conservative quantile, and
    the calibration scores it came from."""

    variant: str
    alpha: float
    n_limit: object
    quantile: float
    cal_scores: tuple
    n_cal: int

    def __post_init__(self):
        require(self.variant in VARIANTS, f"unknown variant {self.variant!r}")
        require(0.0 < self.alpha < 1.0, "alpha must be in (0, 1)")
        require(self.n_cal == len(self.cal_scores), "n_cal mismatch")
        if self.variant == "limited":
            require(self.n_limit is not None, "limited variant needs n_limit")
        else:
            require(self.n_limit is None, "n_limit only applies to limited")


def _values(x, name):
    if hasattr(x, "values"):
        return np.asarray(x.values, dtype=np.float64)
    return as_float_matrix(x, name)


def _static_per_class(static_order, feats):
    if static_order is None:
        raise ValidationError("static ordering requires static_order")
    per = (
        static_order.per_class
        if hasattr(static_order, "per_class")
        else np.asarray(static_order, dtype=np.int64)
    )
    require(per.shape == feats.shape, "static_order has the wrong shape")
    return per


def _ordered(F, head, ordering, static_order, shift_min):
    """Ordered per-class activations and prefix-match indicators.

    Returns (oacts, prefix, chat): oacts[s, c, j] is the activation of class
    c's j-th ordered feature for sample s, prefix[s, c, j] is 1 iff the first
    j+1 ordered features of c and of the predicted class coincide, chat[s] is
    the argmax class.  The per-sample min shift changes activations only, not
    the ordering or the argmax.
    """
    require(ordering in _ORDERINGS, f"unknown ordering {ordering!r}")
    _, chat = predict_logits(F, head)
    feats = class_feature_sets(head)
    shifted = F - F.min(axis=1, keepdims=True) if shift_min else F
    if ordering == "dynamic":
        acts = shifted[:, feats]
        idx = np.argsort(-acts, axis=2, kind="stable")
        ofeats = np.take_along_axis(
            np.broadcast_to(feats, acts.shape), idx, axis=2
        )
        oacts = np.take_along_axis(acts, idx, axis=2)
    else:
        per = _static_per_class(static_order, feats)
        ofeats = np.broadcast_to(per, (F.shape[0],) + per.shape)
        oacts = shifted[:, per]
    chat_feats = ofeats[np.arange(F.shape[0]), chat]
    eq = (ofeats == chat_feats[:, None, :]).astype(np.int64)
    prefix = np.cumprod(eq, axis=2)
    return oacts, prefix, chat


def _hier_scores(oacts, prefix, variant, n_limit):
    s_up = -(prefix * oacts).sum(axis=2)
    if variant == "up":
        return s_up
    # argmin hits the first 0; an all-ones row yields 0, charging the top
    # feature, which is the intended behaviour for the predicted class.
    i_div = np.argmin(prefix, axis=2)
    act_div = np.take_along_axis(oacts, i_div[..., None], axis=2)[..., 0]
    if variant == "sel":
        return s_up - act_div
    n = oacts.shape[2]
    require(
        isinstance(n_limit, (int, np.integer)) and 1 <= n_limit <= n,
        f"n_limit must be an integer in [1, {n}]",
    )
    gate = prefix[..., n_limit - 1]
    tail = -(prefix[..., n_limit - 1 :] * oacts[..., n_limit - 1 :]).sum(axis=2)
    return gate * (tail - act_div)


def _aps(p, u):
    order = np.argsort(-p, axis=1, kind="stable")
    cum = np.cumsum(np.take_along_axis(p, order, axis=1), axis=1)
    s = np.empty_like(p)
    np.put_along_axis(s, order, cum, axis=1)
    if u is not None:
        s = s - np.asarray(u, dtype=np.float64)[:, None] * p
    return s


def score_matrix(
    F,
    head,
    variant,
    *,
    n_limit=None,
    ordering="dynamic",
    static_order=None,
    shift_min=False,
    rng=None,
):
    """N x C nonconformity scores for every sample/class pair.

    ``rng`` only matters for the randomized APS baseline (one uniform draw
    per sample); the probability baselines ignore the ordering arguments.
    """
    require(variant in VARIANTS, f"unknown variant {variant!r}")
    F = _values(F, "F")
    require(
        F.shape[1] == head.k_features,
        f"expected {head.k_features} transformed features, got {F.shape[1]}",
    )
    if variant in _HIERARCHICAL:
        oacts, prefix, _ = _ordered(F, head, ordering, static_order, shift_min)
        return _hier_scores(oacts, prefix, variant, n_limit)
    logits, _ = predict_logits(F, head)
    probs = softmax(logits)
    if variant == "thr":
        return 1.0 - probs
    u = rng.random(F.shape[0]) if rng is not None else None
    return _aps(probs, u)


def level_membership(F, head, *, ordering="dynamic", static_order=None):
    """N x C x n indicator: class c is in the sample's depth-(j+1) level set.

    Membership only depends on the feature ordering, so it is invariant to
    the per-sample min shift.
    """
    F = _values(F, "F")
    _, prefix, _ = _ordered(F, head, ordering, static_order, False)
    return prefix


def true_class_membership(F, y, head, *, ordering="dynamic", static_order=None):
    prefix = level_membership(
        F, head, ordering=ordering, static_order=static_order
    )
    y = as_labels(y, head.n_classes)
    require(y.shape[0] == prefix.shape[0], "labels must align with samples")
    return prefix[np.arange(prefix.shape[0]), y]


def compute_n_limit(true_membership, alpha):
    """Deepest level whose empirical miss rate is at most alpha (floor 1)."""
    tm = np.asarray(true_membership)
    require(tm.ndim == 2 and tm.shape[0] >= 1, "need an N x n indicator matrix")
    require(0.0 < alpha < 1.0, "alpha must be in (0, 1)")
    err = 1.0 - tm.mean(axis=0)
    ok = np.flatnonzero(err <= alpha)
    return int(ok.max()) + 1 if ok.size else 1


def conservative_quantile(scores, alpha):
    """The ceil((n+1)(1-alpha))-th smallest score, +inf if that exceeds n.

    The tiny subtraction keeps float dust in (n+1)(1-alpha) from bumping the
    rank past an exact integer.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    require(s.ndim == 1 and s.shape[0] >= 1, "scores must be a nonempty vector")
    require(0.0 < alpha < 1.0, "alpha must be in (0, 1)")
    n = s.shape[0]
    rank = max(math.ceil((n + 1) * (1.0 - alpha) - 1e-9), 1)
    if rank > n:
        return float("inf")
    return float(s[rank - 1])


def calibrate(
    F,
    y,
    head,
    alpha,
    variant,
    *,
    ordering="dynamic",
    static_order=None,
    shift_min=False,
    rng=None,
):
    """Fit a CalibrationRecord on held-out samples.

    For the limited variant the level depth is chosen first, as the deepest
    level covering at least 1-alpha of the calibration samples, and the
    scores are computed at that depth.
    """
    require(variant in VARIANTS, f"unknown variant {variant!r}")
    F = _values(F, "F")
    y = as_labels(y, head.n_classes)
    require(y.shape[0] == F.shape[0], "labels must align with samples")
    n_limit = None
    if variant == "limited":
        tm = true_class_membership(
            F, y, head, ordering=ordering, static_order=static_order
        )
        n_limit = compute_n_limit(tm, alpha)
    scores = score_matrix(
        F,
        head,
        variant,
        n_limit=n_limit,
        ordering=ordering,
        static_order=static_order,
        shift_min=shift_min,
        rng=rng,
    )
    cal_scores = scores[np.arange(scores.shape[0]), y]
    quantile = conservative_quantile(cal_scores, alpha)
    return CalibrationRecord(
        variant=variant,
        alpha=float(alpha),
        n_limit=n_limit,
        quantile=quantile,
        cal_scores=tuple(float(v) for v in np.sort(cal_scores)),
        n_cal=int(cal_scores.shape[0]),
    )


def predict_sets(
    F,
    head,
    record,
    *,
    ordering="dynamic",
    static_order=None,
    shift_min=False,
    rng=None,
):
    """Prediction sets for each row of F, as sorted class-index arrays."""
    scores = score_matrix(
        F,
        head,
        record.variant,
        n_limit=record.n_limit,
        ordering=ordering,
        static_order=static_order,
        shift_min=shift_min,
        rng=rng,
    )
    return [np.flatnonzero(row <= record.quantile) for row in scores]


def predict_set(f_star, head, record, **kwargs):
    arr = np.asarray(f_star, dtype=np.float64)
    require(arr.ndim == 1, "f_star must be a vector")
    sets = predict_sets(arr[None, :], head, record, **kwargs)
    return set(int(c) for c in sets[0])


def evaluate(
    F,
    y,
    head,
    record,
    *,
    ordering="dynamic",
    static_order=None,
    shift_min=False,
    rng=None,
    psi_gt=None,
):
    """Coverage and size of the record's sets plus the fixed-level curve.

    When a ground-truth class similarity is supplied the mean within-set
    similarity of the multi-class sets is reported as coherence (None when
    every set is a singleton or empty).
    """
    F = _values(F, "F")
    y = as_labels(y, head.n_classes)
    require(y.shape[0] == F.shape[0], "labels must align with samples")
    sets = predict_sets(
        F,
        head,
        record,
        ordering=ordering,
        static_order=static_order,
        shift_min=shift_min,
        rng=rng,
    )
    hits = [int(y[i] in s) for i, s in enumerate(sets)]
    sizes = [int(s.shape[0]) for s in sets]
    prefix = level_membership(
        F, head, ordering=ordering, static_order=static_order
    )
    tm = prefix[np.arange(prefix.shape[0]), y]
    levels = []
    for j in range(prefix.shape[2]):
        levels.append(
            {
                "level": j + 1,
                "coverage": float(tm[:, j].mean()),
                "mean_size": float(prefix[:, :, j].sum(axis=1).mean()),
            }
        )
    report = {
        "variant": record.variant,
        "alpha": record.alpha,
        "n_cal": record.n_cal,
        "n_limit": record.n_limit,
        "quantile": record.quantile,
        "quantile_zero": bool(record.quantile >= 0.0),
        "coverage": float(np.mean(hits)),
        "mean_size": float(np.mean(sizes)),
        "levels": levels,
        "coherence": None,
    }
    if psi_gt is not None:
        from .metrics import set_coherence

        report["coherence"] = set_coherence(
            [set(int(c) for c in s) for s in sets], psi_gt
        )
    return report


def _single(f_star, head, order):
    arr = np.asarray(f_star, dtype=np.float64)
    require(arr.ndim == 1, "f_star must be a vector")
    require(arr.shape[0] == head.k_features, "f_star has the wrong length")
    per = np.asarray(order.per_class if hasattr(order, "per_class") else order)
    _, chat = predict_logits(arr, head)
    oacts = arr[per]
    eq = (per == per[chat][None, :]).astype(np.int64)
    prefix = np.cumprod(eq, axis=1)
    return oacts[None], prefix[None], chat


def score_up(f_star, head, order, c):
    oacts, prefix, _ = _single(f_star, head, order)
    return float(_hier_scores(oacts, prefix, "up", None)[0, c])


def score_sel(f_star, head, order, c):
    oacts, prefix, _ = _single(f_star, head, order)
    return float(_hier_scores(oacts, prefix, "sel", None)[0, c])


def score_limited(f_star, head, order, c, n_limit):
    oacts, prefix, _ = _single(f_star, head, order)
    return float(_hier_scores(oacts, prefix, "limited", n_limit)[0, c])


def thr_scores(probs):
    return 1.0 - np.asarray(probs, dtype=np.float64)


def aps_scores(probs, u=None):
    """Cumulative-probability scores; ties broken toward lower class index.
    ``u`` (per-sample uniforms) enables the randomized variant."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        out = _aps(p[None, :], None if u is None else np.asarray([u]))
        return out[0]
    return _aps(p, u)


def save_calibration_record(record, path):
    payload = {
        "variant": record.variant,
        "alpha": record.alpha,
        "n_limit": None if record.n_limit is None else int(record.n_limit),
        "quantile": None if math.isinf(record.quantile) else record.quantile,
        "cal_scores": list(record.cal_scores),
        "n_cal": record.n_cal,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_calibration_record(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    quantile = payload["quantile"]
    return CalibrationRecord(
        variant=payload["variant"],
        alpha=float(payload["alpha"]),
        n_limit=payload["n_limit"],
        quantile=float("inf") if quantile is None else float(quantile),
        cal_scores=tuple(float(v) for v in payload["cal_scores"]),
        n_cal=int(payload["n_cal"]),
    )
