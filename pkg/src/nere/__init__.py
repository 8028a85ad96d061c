"""Neural educational recommendation engine at desk scale.

Synthetic study logs, set embeddings, a GRU/attention sequence model that
regresses the next set's content vector, NN-Descent retrieval and the
evaluation harness around them.
"""

from nere.errors import (
    ConfigError,
    EmbeddingIndexError,
    FormatError,
    NereError,
    PreconditionError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmbeddingIndexError",
    "FormatError",
    "NereError",
    "PreconditionError",
    "ShapeError",
    "StateError",
    "__version__",
]
