"""Online market basket analysis.

Streams of shopping baskets train joint product/user embeddings window by
window (:mod:`omba.ome`); association rules are mined from the embeddings
with sign-random-projection hashing (:mod:`omba.arm`) and scored against
exact counts (:mod:`omba.stats`); :mod:`omba.evaluation` runs the
intra-basket retrieval protocol.
"""

__version__ = "0.1.0"

from .model import Basket, EmbeddingStore, Hyperparameters, Item, Kind, UnitId, Window, normalize  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "Basket",
    "EmbeddingStore",
    "Hyperparameters",
    "Item",
    "Kind",
    "UnitId",
    "Window",
    "normalize",
    "BACKEND",
]
