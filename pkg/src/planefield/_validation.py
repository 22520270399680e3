"""Exceptions and small input-validation helpers shared across the package."""

import numpy as np


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's preconditions."""


class NumericFault(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


class DatasetError(ValueError):
    """Raised by dataset ingestion; carries every validation failure found."""

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("; ".join(self.failures))


class CheckpointError(IOError):
    """Raised when a checkpoint file is malformed, truncated or mismatched."""


class NotFittedError(ValueError, AttributeError):
    pass


def require(cond, msg):
    if not cond:
        raise ContractViolation(msg)


def as_float_array(x, name="array", ndim=None):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ContractViolation(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    return arr


def check_is_fitted(estimator, attr="model_"):
    if getattr(estimator, attr, None) is None:
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call fit first."
        )
