"""hierset: a hierarchical, conformal, interpretable model head.

The package fits a sparse binary feature-to-class assignment over
precomputed activations (exact branch-and-bound with pair constraints and
duplicate prohibition), rectifies and normalizes the features, explains
predictions through shared-prefix hierarchies and explanation graphs, wraps
the head in split conformal set prediction, and scores interpretability.
"""

from .conformal import (
    CalibrationRecord,
    calibrate,
    compute_n_limit,
    conservative_quantile,
    evaluate,
    predict_set,
    predict_sets,
    score_matrix,
)
from .data import (
    AttributeTable,
    FeatureMatrix,
    ModelHead,
    load_feature_matrix,
    load_model_head,
    save_feature_matrix,
    save_model_head,
    split_calibration,
)
from .estimator import ConformalSetPredictor, HierarchicalHeadClassifier
from .exceptions import InfeasibleError, IterationCapError, ValidationError
from .hierarchy import (
    ClassOrder,
    ExplanationGraph,
    build_explanation_graph,
    fixed_level_set,
    graph_to_dot,
    graph_to_json,
    order_class_features,
    static_order_from_train,
)
from .metrics import (
    contrastiveness,
    feature_alignment,
    feature_sparsity,
    fit_gmm2,
    gaussian_overlap,
    generality,
    ground_truth_similarity,
    locality5,
    set_coherence,
    structural_grounding,
)
from .qp import (
    Assignment,
    QpInstance,
    brute_force,
    build_instance,
    objective_value,
    relax_hierarchy,
    solve,
)
from .similarity import SimilarityBundle, build_similarity_bundle
from .synth import PlantedSpec, generate, recovery_score
from .transform import (
    apply_transform,
    feature_grounding_gradient,
    feature_grounding_loss,
    fit_active_means,
    fit_normalization,
    predict_logits,
    toy_ce_gradient,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AttributeTable",
    "Assignment",
    "CalibrationRecord",
    "ClassOrder",
    "ConformalSetPredictor",
    "ExplanationGraph",
    "FeatureMatrix",
    "HierarchicalHeadClassifier",
    "InfeasibleError",
    "IterationCapError",
    "ModelHead",
    "PlantedSpec",
    "QpInstance",
    "SimilarityBundle",
    "ValidationError",
    "apply_transform",
    "brute_force",
    "build_explanation_graph",
    "build_instance",
    "build_similarity_bundle",
    "calibrate",
    "compute_n_limit",
    "conservative_quantile",
    "contrastiveness",
    "evaluate",
    "feature_alignment",
    "feature_grounding_gradient",
    "feature_grounding_loss",
    "feature_sparsity",
    "fit_active_means",
    "fit_gmm2",
    "fit_normalization",
    "fixed_level_set",
    "gaussian_overlap",
    "generality",
    "generate",
    "graph_to_dot",
    "graph_to_json",
    "ground_truth_similarity",
    "load_feature_matrix",
    "load_model_head",
    "locality5",
    "objective_value",
    "order_class_features",
    "predict_logits",
    "predict_set",
    "predict_sets",
    "recovery_score",
    "relax_hierarchy",
    "save_feature_matrix",
    "save_model_head",
    "score_matrix",
    "set_coherence",
    "solve",
    "split_calibration",
    "static_order_from_train",
    "structural_grounding",
    "toy_ce_gradient",
]
