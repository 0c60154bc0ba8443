"""Bi-classifier determinacy maximization for unsupervised domain adaptation, in numpy."""

from .discrepancy import cdd, cdd_grad, entropy, l1_discrepancy, relevance_matrix
from .errors import DataFormatError, InvalidArgument, ModelFormatError, NumericalDivergence, StateError
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "InvalidArgument",
    "ModelFormatError",
    "NumericalDivergence",
    "StateError",
    "TrainConfig",
    "cdd",
    "cdd_grad",
    "entropy",
    "evaluate",
    "l1_discrepancy",
    "relevance_matrix",
    "train",
]
