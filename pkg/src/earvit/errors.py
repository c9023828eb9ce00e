"""Exception hierarchy shared by all earvit modules."""


class EarvitError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EarvitError):
    """Tensor shapes or dimensions are incompatible with an operation."""


class ConfigError(EarvitError):
    """A configuration value or combination of values is invalid."""


class GridError(ConfigError):
    """A (W, P, S) patch grid violates the no-truncation constraints."""


class ContractError(EarvitError):
    """A caller broke a documented precondition (bad labels, non-unit embeddings, ...)."""


class DataFormatError(EarvitError):
    """An input file could not be decoded."""


class DatasetError(EarvitError):
    """A dataset tree is empty or otherwise unusable."""


class EvalError(EarvitError):
    """Evaluation cannot proceed (no genuine pairs, one-class AUC, ...)."""


class TrainingError(EarvitError):
    """Training aborted (non-finite gradients, degenerate dataset, ...)."""
