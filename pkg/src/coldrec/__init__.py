"""User cold-start recommendation toolkit.

Learns warm user/track embedding spaces, regresses registration-day
features of cold users into those spaces with a neural network, assigns
cold users to warm-user segments, and serves and evaluates
semi-personalized recommendations.
"""

from .core import (
    Catalog,
    Demographics,
    EmbeddingTable,
    MeanResult,
    TrackMeta,
    UserUniverse,
    ValidationError,
    cosine_sim,
    mean_embedding,
    top_k_by_similarity,
)
from .events import Event, InteractionLog, UnknownSignalError

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "Demographics",
    "EmbeddingTable",
    "Event",
    "InteractionLog",
    "MeanResult",
    "TrackMeta",
    "UnknownSignalError",
    "UserUniverse",
    "ValidationError",
    "__version__",
    "cosine_sim",
    "mean_embedding",
    "top_k_by_similarity",
]
