"""Planted-structure synthetic data with a known ground-truth assignment.

The generator plants a binary class-to-feature assignment with an exact
number of features per class, distinct rows, and a guaranteed quota of class
pairs sharing all but one feature (consecutive index windows).  Samples are
the assigned rows scaled by a concept mean plus Gaussian noise, with pure
noise on distractor features, so splits are i.i.d. and calibration/test
exchangeability holds by construction.  ``recovery_score`` is the oracle:
how much of the planted assignment a solved head recovers, up to feature
permutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb, floor

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import FeatureMatrix
from .exceptions import ValidationError
from .validation import require

__all__ = ["PlantedSpec", "generate", "recovery_score"]


@dataclass(frozen=True)
class PlantedSpec:
    """Parameters of a planted instance.

    ``rho_true`` is the target fraction of classes participating in planted
    feature-sharing pairs; the first 2*floor(rho_true*C) classes form a chain
    of consecutive feature windows, each adjacent pair sharing n-1 features.
    """

    n_classes: int
    n_raw_features: int
    k_true: int
    n_per_class: int
    rho_true: float
    concept_mean: float
    noise_sigma: float
    train_per_class: int
    cal_per_class: int
    test_per_class: int
    seed: int

    def __post_init__(self):
        require(self.n_classes >= 1, "need at least one class")
        require(
            1 <= self.n_per_class <= self.k_true <= self.n_raw_features,
            "need 1 <= n_per_class <= k_true <= n_raw_features",
        )
        require(0.0 <= self.rho_true <= 1.0, "rho_true must be in [0, 1]")
        require(self.noise_sigma >= 0.0, "noise_sigma must be nonnegative")
        require(
            min(self.train_per_class, self.cal_per_class, self.test_per_class)
            >= 1,
            "each split needs at least one sample per class",
        )
        require(
            comb(self.k_true, self.n_per_class) >= self.n_classes,
            "not enough distinct feature subsets for the classes",
        )
        m = self.n_planted_pairs
        if m >= 1:
            require(
                2 * m <= self.n_classes and 2 * m <= self.k_true,
                "rho_true pair chain is not constructible",
            )
            require(
                self.n_per_class < self.k_true,
                "pair chain needs n_per_class < k_true",
            )

    @property
    def n_planted_pairs(self):
        return floor(self.rho_true * self.n_classes)

    @property
    def distractor_count(self):
        return self.n_raw_features - self.k_true


def _planted_rows(spec):
    """Distinct sorted feature tuples in the k_true-local space: a window
    chain for the paired classes, then lexicographic subsets for the rest."""
    c, k, n = spec.n_classes, spec.k_true, spec.n_per_class
    rows = []
    used = set()
    for i in range(2 * spec.n_planted_pairs):
        window = tuple(sorted((i + t) % k for t in range(n)))
        rows.append(window)
        used.add(window)
    for combo in combinations(range(k), n):
        if len(rows) == c:
            break
        if combo not in used:
            rows.append(combo)
            used.add(combo)
    require(len(rows) == c, "could not construct enough distinct rows")
    return rows


def generate(spec):
    """Draw the planted assignment and the three i.i.d. splits.

    Returns (train, calibration, test, w_true, psi_gt): w_true is the C x Q
    binary ground-truth assignment over raw features and psi_gt its
    shared-feature similarity W W^T / n.
    """
    rows = _planted_rows(spec)
    c, q, n = spec.n_classes, spec.n_raw_features, spec.n_per_class
    rng = np.random.default_rng(spec.seed)
    true_cols = np.sort(rng.choice(q, size=spec.k_true, replace=False))
    w_true = np.zeros((c, q), dtype=np.int8)
    for ci, row in enumerate(rows):
        w_true[ci, true_cols[list(row)]] = 1
    psi_gt = (w_true @ w_true.T) / float(n)

    def draw(per_class, split):
        labels = np.repeat(np.arange(c), per_class)
        x = spec.concept_mean * w_true[labels].astype(np.float64)
        x = x + rng.normal(0.0, spec.noise_sigma, size=(labels.shape[0], q))
        return FeatureMatrix(
            values=x, labels=labels, n_classes=c, split=split
        )

    train = draw(spec.train_per_class, "train")
    calibration = draw(spec.cal_per_class, "calibration")
    test = draw(spec.test_per_class, "test")
    return train, calibration, test, w_true, psi_gt


def recovery_score(assignment, w_true):
    """Fraction of planted assignment entries recovered, maximized over
    bijections between selected and true feature columns.

    The bijection objective is additive per matched column pair, so the
    assignment problem solves it exactly for any k.
    """
    w_true = np.asarray(w_true)
    c, q = w_true.shape
    require(
        assignment.assignment.shape[0] == c,
        "class count does not match the ground truth",
    )
    require(
        assignment.selection.shape[0] == q,
        "assignment is over a different raw feature space",
    )
    sel_cols = assignment.selected_indices
    true_cols = np.flatnonzero(w_true.any(axis=0))
    if sel_cols.shape[0] != true_cols.shape[0]:
        raise ValidationError(
            f"k mismatch: {sel_cols.shape[0]} selected vs "
            f"{true_cols.shape[0]} true features"
        )
    k = sel_cols.shape[0]
    model = assignment.assignment_full()[:, sel_cols].astype(np.int64)
    truth = w_true[:, true_cols].astype(np.int64)
    agree = np.empty((k, k), dtype=np.int64)
    for a in range(k):
        agree[a] = (model[:, a][:, None] == truth).sum(axis=0)
    rows_idx, cols_idx = linear_sum_assignment(-agree)
    total = int(agree[rows_idx, cols_idx].sum())
    return total / float(c * k)
