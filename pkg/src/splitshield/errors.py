"""Exception types shared across the package."""


class SplitShieldError(Exception):
    """Base class for all errors raised by this package."""


class InvalidMatrix(SplitShieldError):
    """Matrix input contains NaN/Inf or has an unusable shape."""


class DimensionError(SplitShieldError):
    """Operand dimensions do not agree."""


class NumericalFailure(SplitShieldError):
    """An iterative routine failed to converge within its iteration cap."""


class ShapeError(SplitShieldError):
    """Tensor shape does not match what a layer or model expects."""


class BackwardBeforeForward(SplitShieldError):
    """backward() called without a preceding train-mode forward()."""


class InvalidSplit(SplitShieldError):
    """Split index outside the model's valid split positions."""


class InsufficientBatch(SplitShieldError):
    """Batch statistics requested on fewer than two examples."""


class InvalidBudget(SplitShieldError):
    """Negative distortion budget."""


class InvalidM(SplitShieldError):
    """Retained-coefficient count outside the valid range."""


class MaskError(SplitShieldError):
    """Prune mask references positions outside the feature vector."""


class MissingHiddenLabels(SplitShieldError):
    """Operation requires hidden labels the dataset does not carry."""


class UnknownAttribute(SplitShieldError):
    """Named hidden attribute not present in the dataset."""


class EmptySplit(SplitShieldError):
    """Requested dataset split contains no examples."""


class SpecError(SplitShieldError):
    """Synthetic dataset specification is infeasible or inconsistent."""


class MagicMismatch(SplitShieldError):
    """File does not start with the expected magic bytes."""


class LengthMismatch(SplitShieldError):
    """File payload shorter or longer than its declared shape."""


class ProtocolError(SplitShieldError):
    """Malformed or out-of-contract wire frame."""


class Incompatible(SplitShieldError):
    """Peer speaks an unsupported protocol or checkpoint version."""


class NoFeasibleConfig(SplitShieldError):
    """No profile row satisfies the requested accuracy-drop bound."""


class ConfigError(SplitShieldError):
    """Run configuration failed validation."""
