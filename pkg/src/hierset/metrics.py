"""Interpretability metrics over transformed features, maps, and assignments.

The suite shares a deterministic 1D two-component Gaussian mixture fit:
contrastiveness scores how bimodal each feature's activation distribution is
(self-explaining features are near-binary), generality how widely a feature
spreads over classes, locality how diversely the predicted class's feature
maps activate in space, and the grounding metrics compare learned structure
against ground-truth class or attribute similarity.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import logsumexp
from scipy.stats import norm

from .exceptions import ValidationError
from .hierarchy import class_feature_sets
from .transform import apply_transform, predict_logits
from .validation import as_binary_matrix, as_float_matrix, as_labels, require

__all__ = [
    "GmmFit",
    "GroundTruthSim",
    "fit_gmm2",
    "gaussian_overlap",
    "contrastiveness",
    "generality",
    "locality5",
    "structural_grounding",
    "structural_grounding_raw",
    "feature_alignment",
    "set_coherence",
    "feature_sparsity",
    "ground_truth_similarity",
    "write_metric_report",
]

_SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class GmmFit:
    """Two-component 1D Gaussian mixture, components ordered by mean."""

    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    weight1: float
    converged: bool

    def __post_init__(self):
        require(self.mu1 <= self.mu2, "components must be ordered by mean")
        require(
            min(self.sigma1, self.sigma2) >= _SIGMA_FLOOR,
            "component sigmas must respect the clamp",
        )
        require(0.0 <= self.weight1 <= 1.0, "weight1 must be in [0, 1]")


@dataclass(frozen=True)
class GroundTruthSim:
    """Ground-truth class similarity derived from class attribute means."""

    psi_gt: np.ndarray
    lambda_means: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi_gt, dtype=np.float64)
        require(
            psi.ndim == 2 and psi.shape[0] == psi.shape[1],
            "psi_gt must be square",
        )
        require(np.allclose(psi, psi.T), "psi_gt must be symmetric")
        require((psi >= 0).all(), "psi_gt entries must be nonnegative")
        object.__setattr__(self, "psi_gt", psi)
        object.__setattr__(
            self,
            "lambda_means",
            np.asarray(self.lambda_means, dtype=np.float64),
        )


def fit_gmm2(values, max_iter=200, tol=1e-8):
    """Deterministic EM fit of a two-component 1D mixture.

    Initialization splits the sorted values at the median and uses the
    halves' means, stds, and sizes.  Sigmas are clamped at 1e-6 throughout,
    which keeps the fit defined for point masses (e.g. rectified features
    that are exactly zero on most samples).
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    require(x.shape[0] >= 2, "need at least 2 values")
    m = x.shape[0]
    xs = np.sort(x)
    half = m // 2
    mu = np.array([xs[:half].mean(), xs[half:].mean()])
    sigma = np.maximum(
        [xs[:half].std(), xs[half:].std()], _SIGMA_FLOOR
    ).astype(np.float64)
    w1 = half / m
    ll_prev = None
    converged = False
    for _ in range(max_iter):
        logp = np.stack(
            [
                np.log(max(w1, 1e-300)) + norm.logpdf(x, mu[0], sigma[0]),
                np.log(max(1.0 - w1, 1e-300))
                + norm.logpdf(x, mu[1], sigma[1]),
            ]
        )
        lse = logsumexp(logp, axis=0)
        ll = float(lse.sum())
        if ll_prev is not None and abs(ll - ll_prev) < tol:
            converged = True
            break
        ll_prev = ll
        resp = np.exp(logp - lse)
        n1 = resp[0].sum()
        n2 = m - n1
        if n1 < 1e-12 or n2 < 1e-12:
            break
        mu = np.array(
            [(resp[0] * x).sum() / n1, (resp[1] * x).sum() / n2]
        )
        sigma = np.maximum(
            np.sqrt(
                [
                    (resp[0] * (x - mu[0]) ** 2).sum() / n1,
                    (resp[1] * (x - mu[1]) ** 2).sum() / n2,
                ]
            ),
            _SIGMA_FLOOR,
        )
        w1 = n1 / m
    if mu[0] > mu[1]:
        mu = mu[::-1]
        sigma = sigma[::-1]
        w1 = 1.0 - w1
    return GmmFit(
        mu1=float(mu[0]),
        sigma1=float(sigma[0]),
        mu2=float(mu[1]),
        sigma2=float(sigma[1]),
        weight1=float(w1),
        converged=converged,
    )


def _crossing_points(fit, lo, hi):
    # Unweighted pdfs cross where a quadratic in x vanishes.
    a = 1.0 / (2 * fit.sigma2**2) - 1.0 / (2 * fit.sigma1**2)
    b = fit.mu1 / fit.sigma1**2 - fit.mu2 / fit.sigma2**2
    c = (
        -fit.mu1**2 / (2 * fit.sigma1**2)
        + fit.mu2**2 / (2 * fit.sigma2**2)
        + np.log(fit.sigma2 / fit.sigma1)
    )
    coeffs = np.array([a, b, c])
    if np.allclose(coeffs, 0.0):
        return []
    roots = np.roots(coeffs)
    pts = sorted(
        float(r.real)
        for r in roots
        if abs(r.imag) < 1e-12 and lo < r.real < hi
    )
    return pts


def gaussian_overlap(fit):
    """Integral of min(pdf1, pdf2) for the fit's unweighted components."""
    lo = fit.mu1 - 8.0 * fit.sigma1
    hi = fit.mu2 + 8.0 * fit.sigma2

    def integrand(x):
        return min(
            norm.pdf(x, fit.mu1, fit.sigma1), norm.pdf(x, fit.mu2, fit.sigma2)
        )

    pts = _crossing_points(fit, lo, hi)
    value, _ = quad(
        integrand, lo, hi, points=pts or None, epsabs=1e-6, limit=200
    )
    return float(value)


def contrastiveness(f_star_test):
    """100 x mean over features of (1 - overlap of the 2-component fit)."""
    values = (
        f_star_test.values
        if hasattr(f_star_test, "values")
        else as_float_matrix(f_star_test, "f_star_test")
    )
    require(values.shape[0] >= 2, "need at least 2 samples")
    terms = [
        1.0 - gaussian_overlap(fit_gmm2(values[:, j]))
        for j in range(values.shape[1])
    ]
    return 100.0 * float(np.mean(terms))


def generality(train_f_star, labels, head):
    """100 x (1 - mean over features of the max class share of the feature's
    total min-shifted activation).  Zero-total features use share 0."""
    values = (
        train_f_star.values
        if hasattr(train_f_star, "values")
        else as_float_matrix(train_f_star, "train_f_star")
    )
    c_count = head.n_classes
    y = as_labels(labels, c_count)
    require(y.shape[0] == values.shape[0], "labels must align with samples")
    shifted = values - values.min(axis=0, keepdims=True)
    onehot = np.zeros((values.shape[0], c_count))
    onehot[np.arange(values.shape[0]), y] = 1.0
    per_class = onehot.T @ shifted
    total = shifted.sum(axis=0)
    share = np.zeros(values.shape[1])
    pos = total > 0
    share[pos] = per_class[:, pos].max(axis=0) / total[pos]
    return 100.0 * float(1.0 - share.mean())


def locality5(spatial_maps, head, weights_rule="assigned"):
    """Spatial diversity of the predicted class's assigned feature maps.

    Each map is scaled by its mean absolute value, softmaxed over cells, and
    the cellwise maxima across the class's n maps are summed and divided by
    n.  Identical maps give 100/n percent, disjoint peaked maps approach 100.
    """
    require(
        weights_rule == "assigned",
        f"unknown weights_rule {weights_rule!r}",
    )
    maps = (
        spatial_maps.spatial_maps
        if hasattr(spatial_maps, "spatial_maps")
        else spatial_maps
    )
    if maps is None:
        raise ValidationError("spatial maps are required")
    maps = np.asarray(maps, dtype=np.float64)
    require(maps.ndim == 4, "spatial_maps must be N x Q x h x w")
    require(
        maps.shape[1] == head.selection.shape[0],
        "spatial_maps feature axis does not match the head",
    )
    pooled = maps.mean(axis=(2, 3))
    f_star = apply_transform(pooled, head).values
    _, chat = predict_logits(f_star, head)
    raw_feats = head.selected_indices[class_feature_sets(head)]
    n_samples = maps.shape[0]
    n = head.n_per_class
    sel = maps[np.arange(n_samples)[:, None], raw_feats[chat]]
    flat = sel.reshape(n_samples, n, -1)
    scale = np.abs(flat).mean(axis=2, keepdims=True)
    z = np.divide(flat, scale, out=np.zeros_like(flat), where=scale > 0)
    z = z - z.max(axis=2, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=2, keepdims=True)
    envelope = p.max(axis=1)
    return 100.0 * float((envelope.sum(axis=1) / n).mean())


def _top_pairs(psi_gt, count=25):
    c = psi_gt.shape[0]
    pairs = [(i, j) for i in range(c) for j in range(i + 1, c)]
    pairs.sort(key=lambda p: (-psi_gt[p[0], p[1]], p[0], p[1]))
    return pairs[:count]


def structural_grounding(w_full, psi_gt):
    """100 x sum of normalized model similarity over the top-25 ground-truth
    pairs, divided by the sum of max-normalized ground-truth similarity.

    Model similarity is the shared-feature count divided by n; ground truth
    is divided by its largest entry among the chosen pairs.
    """
    w = as_binary_matrix(w_full, "w_full")
    psi = np.asarray(psi_gt.psi_gt if hasattr(psi_gt, "psi_gt") else psi_gt)
    psi = as_float_matrix(psi, "psi_gt")
    require(psi.shape == (w.shape[0], w.shape[0]), "psi_gt shape mismatch")
    sums = w.sum(axis=1)
    require((sums == sums[0]).all() and sums[0] >= 1, "rows must share n")
    n = int(sums[0])
    model = (w @ w.T) / n
    pairs = _top_pairs(psi)
    gmax = max(psi[i, j] for i, j in pairs)
    if gmax <= 0:
        return 0.0
    model_sum = sum(float(model[i, j]) for i, j in pairs)
    gt_sum = sum(float(psi[i, j]) / gmax for i, j in pairs)
    return 100.0 * model_sum / gt_sum


def structural_grounding_raw(w_full, psi_gt):
    """The unnormalized ratio: 100 x sum of shared-feature counts over the
    top-25 pairs divided by the sum of raw ground-truth similarity."""
    w = as_binary_matrix(w_full, "w_full")
    psi = np.asarray(psi_gt.psi_gt if hasattr(psi_gt, "psi_gt") else psi_gt)
    psi = as_float_matrix(psi, "psi_gt")
    require(psi.shape == (w.shape[0], w.shape[0]), "psi_gt shape mismatch")
    model = (w @ w.T).astype(np.float64)
    pairs = _top_pairs(psi)
    gt_sum = sum(float(psi[i, j]) for i, j in pairs)
    if gt_sum <= 0:
        return 0.0
    model_sum = sum(float(model[i, j]) for i, j in pairs)
    return 100.0 * model_sum / gt_sum


def feature_alignment(train_f_star, attribute_table):
    """Mean over features of the scaled best attribute contrast.

    The contrast of attribute a against feature j is the mean activation on
    samples with the attribute minus the mean without it; attributes present
    or absent everywhere are skipped.  The scale is N over the feature's
    min-shifted total; zero-total features contribute 0.
    """
    values = (
        train_f_star.values
        if hasattr(train_f_star, "values")
        else as_float_matrix(train_f_star, "train_f_star")
    )
    table = attribute_table.per_sample.astype(np.float64)
    require(
        table.shape[0] == values.shape[0],
        "attribute rows must align with samples",
    )
    n_samples = values.shape[0]
    counts = table.sum(axis=0)
    valid = (counts > 0) & (counts < n_samples)
    if not valid.any():
        raise ValidationError("no attribute varies across the samples")
    present = (table.T @ values)[valid] / counts[valid, None]
    absent = ((1.0 - table).T @ values)[valid] / (
        n_samples - counts[valid, None]
    )
    best = (present - absent).max(axis=0)
    shifted_total = (values - values.min(axis=0, keepdims=True)).sum(axis=0)
    contrib = np.zeros(values.shape[1])
    pos = shifted_total > 0
    contrib[pos] = (n_samples / shifted_total[pos]) * best[pos]
    return float(contrib.mean())


def set_coherence(predicted_sets, psi_gt):
    """Mean ground-truth similarity over the pairs inside each predicted set,
    pooled over samples; None when no set has two classes."""
    psi = np.asarray(psi_gt.psi_gt if hasattr(psi_gt, "psi_gt") else psi_gt)
    psi = as_float_matrix(psi, "psi_gt")
    pair_values = []
    for s in predicted_sets:
        members = sorted(int(c) for c in s)
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pair_values.append(float(psi[members[a], members[b]]))
    if not pair_values:
        return None
    return float(np.mean(pair_values))


def feature_sparsity(f_star_test):
    values = (
        f_star_test.values
        if hasattr(f_star_test, "values")
        else as_float_matrix(f_star_test, "f_star_test")
    )
    return 100.0 * float((values > 0).mean())


def ground_truth_similarity(lambda_means):
    lam = as_float_matrix(lambda_means, "lambda_means")
    require((lam >= 0).all(), "lambda_means entries must be nonnegative")
    return GroundTruthSim(psi_gt=lam @ lam.T, lambda_means=lam)


def write_metric_report(metric_values, config, path):
    """CSV report: one row per metric plus a 12-hex digest of the config."""
    text = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value", "config_digest"])
        for name in sorted(metric_values):
            value = metric_values[name]
            cell = "" if value is None else "%.17g" % value
            writer.writerow([name, cell, digest])
