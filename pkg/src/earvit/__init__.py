"""Overlapping-patch vision transformers for ear verification.

Built on an in-package float64 autodiff tensor, this library covers the
whole desk-scale pipeline: patch tokenization with configurable overlap,
T/S/B/L encoder presets with a 512-d embedding head, margin-softmax training
with class sampling and AdamW, and genuine/impostor ROC-AUC evaluation with
percentage-variation comparisons between patch-stride settings.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DataFormatError, DatasetError,
                     EarvitError, EvalError, GridError, ShapeError, TrainingError)
from .patches import PatchGridSpec, patch_count
from .verify import percentage_variation, roc_auc

__all__ = [
    "__version__",
    "ConfigError", "ContractError", "DataFormatError", "DatasetError",
    "EarvitError", "EvalError", "GridError", "ShapeError", "TrainingError",
    "PatchGridSpec", "patch_count", "percentage_variation", "roc_auc",
]
