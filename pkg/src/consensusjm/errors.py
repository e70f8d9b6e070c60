"""Exception types shared across the package."""
from __future__ import annotations

from .data import DataValidationError

__all__ = ["DataValidationError", "NumericalError", "SingularDesignError", "ChainFailure"]


class NumericalError(RuntimeError):
    """A density, transform or linear solve produced an unusable result."""


class SingularDesignError(NumericalError):
    """The fixed-effects design matrix is rank deficient."""


class ChainFailure(RuntimeError):
    """A sampler job failed; carries the offending ``(subsample, chain)``."""

    def __init__(self, subsample: int, chain: int, message: str):
        super().__init__(f"subsample {subsample}, chain {chain}: {message}")
        self.subsample = subsample
        self.chain = chain
        self.message = message
