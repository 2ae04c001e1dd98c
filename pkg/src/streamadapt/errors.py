"""Exception taxonomy shared across the package.

Three failure families: configuration (shapes or settings wired wrong),
numeric (non-finite or degenerate values at runtime), protocol (a contract
between pipeline components was violated, e.g. a sampler produced a batch
the loss cannot consume).
"""


class ConfigurationError(ValueError):
    """Inconsistent dimensions, invalid hyperparameters, shrink requests."""


class NumericError(ArithmeticError):
    """Non-finite intermediate or degenerate value; message carries context."""


class ProtocolError(RuntimeError):
    """Cross-module contract violation (batch structure, label namespace)."""


class ClusteringFailure(ProtocolError):
    """Clustering produced no usable clusters; caller should fall back."""
