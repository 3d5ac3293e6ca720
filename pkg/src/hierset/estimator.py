"""Scikit-learn style front end over the functional pipeline.

``HierarchicalHeadClassifier`` fits the full head on raw training
activations: similarity statistics, the constrained assignment program,
optional hierarchy relaxation, and the normalization/rectification stats.
``ConformalSetPredictor`` wraps calibration and set prediction over a fitted
head.  Both follow the estimator conventions (params in ``__init__``, state
in ``fit``, trailing-underscore attributes, ``get_params`` round-trip).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import conformal
from .data import FeatureMatrix, ModelHead
from .exceptions import ValidationError
from .hierarchy import order_class_features, static_order_from_train
from .qp import build_instance, relax_hierarchy, solve
from .similarity import build_similarity_bundle
from .transform import apply_transform, fit_active_means, fit_normalization
from .validation import as_float_matrix, require

__all__ = ["HierarchicalHeadClassifier", "ConformalSetPredictor"]


class HierarchicalHeadClassifier(ClassifierMixin, BaseEstimator):
    """Interpretable head: k shared features, n per class, paired classes
    sharing all but one.

    Parameters mirror the pipeline defaults.  ``rho`` sets the fraction of
    classes receiving a hierarchy pair constraint, ``relax`` grows the pair
    structure after the exact solve, and ``skip_pair_constraints`` drops the
    pair constraints from the program entirely (relaxation can still
    introduce pairs afterwards).
    """

    def __init__(
        self,
        k_features=50,
        n_per_class=5,
        rho=0.5,
        lambda_redundancy=0.1,
        lambda_bias=0.1,
        mip_gap=0.01,
        relax=True,
        skip_pair_constraints=False,
    ):
        self.k_features = k_features
        self.n_per_class = n_per_class
        self.rho = rho
        self.lambda_redundancy = lambda_redundancy
        self.lambda_bias = lambda_bias
        self.mip_gap = mip_gap
        self.relax = relax
        self.skip_pair_constraints = skip_pair_constraints

    def fit(self, X, y, spatial_maps=None):
        X = as_float_matrix(X, "X")
        y = np.asarray(y)
        require(y.ndim == 1 and y.shape[0] == X.shape[0], "y must align with X")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        require(self.classes_.shape[0] >= 2, "need at least two classes")
        train = FeatureMatrix(
            values=X,
            labels=encoded,
            n_classes=self.classes_.shape[0],
            split="train",
            spatial_maps=spatial_maps,
        )
        self.bundle_ = build_similarity_bundle(train, rho=self.rho)
        inst = build_instance(
            self.bundle_,
            self.k_features,
            self.n_per_class,
            lambda_redundancy=self.lambda_redundancy,
            lambda_bias=self.lambda_bias,
            mip_gap=self.mip_gap,
            pair_set=frozenset() if self.skip_pair_constraints else None,
        )
        assignment = solve(inst)
        self.relaxation_ = None
        if self.relax:
            assignment, self.relaxation_ = relax_hierarchy(assignment, inst)
        self.assignment_ = assignment
        mu, sigma, _ = fit_normalization(train, assignment.selection)
        head = ModelHead(
            selection=assignment.selection,
            assignment=assignment.assignment,
            mu=mu,
            sigma=sigma,
            active_mean=np.ones(int(self.k_features)),
            n_per_class=self.n_per_class,
            k_features=self.k_features,
        )
        f_star = apply_transform(train, head).values
        self.head_ = ModelHead(
            selection=assignment.selection,
            assignment=assignment.assignment,
            mu=mu,
            sigma=sigma,
            active_mean=fit_active_means(f_star),
            n_per_class=self.n_per_class,
            k_features=self.k_features,
        )
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "head_")
        return apply_transform(
            as_float_matrix(X, "X"), self.head_
        ).values

    def decision_function(self, X):
        return self.transform(X) @ self.head_.assignment.T.astype(np.float64)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ConformalSetPredictor(BaseEstimator):
    """Split conformal set prediction over a fitted head.

    ``fit`` calibrates on held-out raw activations; ``predict`` returns one
    label array per sample.  ``classes`` maps external labels to the head's
    class indices (e.g. a fitted classifier's ``classes_``); when omitted,
    labels must already be integers in [0, C).
    """

    def __init__(
        self,
        head=None,
        alpha=0.1,
        variant="limited",
        ordering="dynamic",
        classes=None,
        shift_min=False,
    ):
        self.head = head
        self.alpha = alpha
        self.variant = variant
        self.ordering = ordering
        self.classes = classes
        self.shift_min = shift_min

    def _encode(self, y):
        y = np.asarray(y)
        if self.classes is None:
            return y
        classes = np.asarray(self.classes)
        pos = np.searchsorted(classes, y)
        ok = (pos < classes.shape[0]) & (classes[np.minimum(pos, classes.shape[0] - 1)] == y)
        if not np.asarray(ok).all():
            raise ValidationError("y contains labels outside classes")
        return pos

    def fit(self, X, y):
        if self.head is None:
            raise ValidationError("a fitted head is required")
        f_star = apply_transform(as_float_matrix(X, "X"), self.head).values
        y_enc = self._encode(y)
        self.static_order_ = None
        if self.ordering == "static":
            self.static_order_ = static_order_from_train(
                f_star, y_enc, self.head
            )
        self.record_ = conformal.calibrate(
            f_star,
            y_enc,
            self.head,
            self.alpha,
            self.variant,
            ordering=self.ordering,
            static_order=self.static_order_,
            shift_min=self.shift_min,
        )
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "record_")
        f_star = apply_transform(as_float_matrix(X, "X"), self.head).values
        sets = conformal.predict_sets(
            f_star,
            self.head,
            self.record_,
            ordering=self.ordering,
            static_order=self.static_order_,
            shift_min=self.shift_min,
        )
        if self.classes is None:
            return sets
        classes = np.asarray(self.classes)
        return [classes[s] for s in sets]

    def explain_order(self, x):
        """Per-class feature order for one raw sample, matching predict."""
        check_is_fitted(self, "record_")
        f_star = apply_transform(
            np.asarray(x, dtype=np.float64)[None, :], self.head
        ).values[0]
        if self.ordering == "static":
            return self.static_order_
        return order_class_features(f_star, self.head, strategy="dynamic")
