"""
Errors Module

Exception hierarchy shared by every graphalign component.

Each error also derives from the closest builtin exception so that callers
written against ``ValueError`` / ``RuntimeError`` / ``OSError`` keep working.
"""

from typing import Optional


class GraphAlignError(Exception):
    """Base class for all graphalign errors."""

    category = "runtime"


class DegenerateInputError(GraphAlignError, ValueError):
    """Raised when a geometric solver receives rank-deficient input."""

    category = "degenerate-input"


class OutOfDomainError(GraphAlignError, ValueError):
    """Raised when an argument lies outside an operation's domain (e.g. logmap near pi)."""

    category = "out-of-domain"


class CatalogError(GraphAlignError, KeyError):
    """Raised for unknown shape categories."""

    category = "catalog"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown category"


class DegeneratePartError(GraphAlignError, ValueError):
    """Raised when an anchor neighbourhood cannot support a stable rigid fit."""

    category = "degenerate-part"


class DatasetFormatError(GraphAlignError, OSError):
    """Raised when a dataset or checkpoint file cannot be decoded."""

    category = "dataset-format"


class DatasetVersionError(DatasetFormatError):
    """Raised when a file header carries a wrong magic or an unsupported version."""

    category = "dataset-version"


class DatasetTruncatedError(DatasetFormatError):
    """Raised when a file ends before all announced records were read."""

    category = "dataset-truncated"


class DigestMismatchError(GraphAlignError, ValueError):
    """Raised when a checkpoint or dataset was produced under a different configuration."""

    category = "digest-mismatch"


class ConfigError(GraphAlignError, ValueError):
    """Raised for invalid configuration files, keys or values.

    Attributes:
        key: The offending ``section.key`` when one can be named.
    """

    category = "config"

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class GraphConstructionError(GraphAlignError, ValueError):
    """Raised when an alignment graph is assembled from inconsistent parts."""

    category = "graph"


class NonFiniteLossError(GraphAlignError, RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    category = "non-finite-loss"


class TrainingDivergenceError(GraphAlignError, RuntimeError):
    """Raised when pretraining validation loss keeps rising or a spectral-norm check fails.

    Attributes:
        result: The run state restored to its last good parameters, if available.
    """

    category = "divergence"

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class InferenceFailure(GraphAlignError, RuntimeError):
    """Raised when every inference restart was flagged non-finite."""

    category = "inference"


class ExclusionViolationError(GraphAlignError, ValueError):
    """Raised when an evaluation set would reuse data its mode must exclude.

    Attributes:
        seed: The offending instance or sample seed.
    """

    category = "exclusion"

    def __init__(self, message: str, seed: Optional[int] = None):
        super().__init__(message)
        self.seed = seed


class InconsistentWaypointsError(GraphAlignError, ValueError):
    """Raised when demonstration trajectories disagree on their waypoint count."""

    category = "waypoints"
