"""N-dimensional permutohedral filtering and dense CRF mean-field refinement."""

from .densecrf import CrfParams, MeanFieldState, mean_field_inference, potts, unary_from_probs
from .permutohedral import FeatureConfig, Lattice, build_features, filter, filter_transpose, lattice_build
from .training import TrainConfig, backward, distort_labels, forward_with_tape, train_overfit

__all__ = [
    "CrfParams", "FeatureConfig", "Lattice", "MeanFieldState", "TrainConfig",
    "backward", "build_features", "distort_labels", "filter", "filter_transpose",
    "forward_with_tape", "lattice_build", "mean_field_inference", "potts",
    "train_overfit", "unary_from_probs",
]
