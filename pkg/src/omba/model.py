"""Shared domain vocabulary: units, baskets, windows and the embedding store."""

from __future__ import annotations

import enum
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

DEGENERATE_NORM = 1e-12
ANONYMOUS_USER = "__anonymous__"
SNAPSHOT_MAGIC = b"OMBA-EMB-v1\n"


class Kind(str, enum.Enum):
    PRODUCT = "product"
    USER = "user"


class UnitId(NamedTuple):
    kind: Kind
    id: str

    @classmethod
    def product(cls, id: str) -> "UnitId":
        return cls(Kind.PRODUCT, id)

    @classmethod
    def user(cls, id: str) -> "UnitId":
        return cls(Kind.USER, id)


class Item(NamedTuple):
    product: str
    # unit price in dollars; None when the source had no price for this row
    price: Optional[float]


@dataclass(frozen=True)
class Basket:
    """One transaction.

    ``items`` keeps first-seen order so that iteration is deterministic, but
    product ids must be unique within the basket.
    """

    timestamp: float
    user: str
    items: tuple[Item, ...]
    basket_id: str = ""

    def __post_init__(self):
        if not math.isfinite(self.timestamp):
            raise ValueError(f"basket {self.basket_id!r}: non-finite timestamp")
        seen = set()
        for it in self.items:
            if it.product in seen:
                raise ValueError(f"basket {self.basket_id!r}: duplicate product {it.product!r}")
            seen.add(it.product)
            if it.price is not None and not (it.price >= 0 and math.isfinite(it.price)):
                raise ValueError(f"basket {self.basket_id!r}: bad price {it.price!r}")

    @classmethod
    def of(cls, timestamp, user, products, prices=None, basket_id=""):
        """Convenience constructor from parallel product/price sequences."""
        products = list(products)
        if prices is None:
            prices = [1.0] * len(products)
        items = tuple(Item(str(p), None if c is None else float(c)) for p, c in zip(products, prices))
        return cls(float(timestamp), str(user), items, str(basket_id))

    @property
    def products(self) -> tuple[str, ...]:
        return tuple(it.product for it in self.items)


@dataclass
class Window:
    index: int
    baskets: list[Basket] = field(default_factory=list)
    start: float = 0.0
    end: float = 0.0

    def __len__(self):
        return len(self.baskets)


@dataclass(frozen=True)
class Hyperparameters:
    d: int = 300
    eta: float = 0.05
    negatives: int = 3
    epochs: int = 50
    tau: float = 0.1
    price_clip: float = 10.0
    seed: int = 0
    value_weighting: bool = True
    noise: str = "unigram"  # or "uniform"
    eps: float = 1e-8

    def __post_init__(self):
        if self.d < 1 or self.negatives < 1 or self.epochs < 0:
            raise ValueError("d and negatives must be positive, epochs nonnegative")
        if not self.eta > 0 or self.tau < 0 or not self.price_clip > 0:
            raise ValueError("eta and price_clip must be positive, tau nonnegative")
        if self.noise not in ("unigram", "uniform"):
            raise ValueError(f"unknown noise distribution {self.noise!r}")


def normalize(v, return_flag: bool = False):
    """Scale ``v`` to unit L2 norm.

    Vectors with norm below 1e-12 are returned unchanged; with
    ``return_flag=True`` the result is ``(vector, degenerate)``.
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    degenerate = n < DEGENERATE_NORM
    out = v.copy() if degenerate else v / n
    if return_flag:
        return out, degenerate
    return out


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`normalize`; returns (normalized, degenerate mask)."""
    norms = np.linalg.norm(m, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    return m / safe[:, None], degenerate


class EmbeddingStore:
    """Dense, array-backed vectors and AdaGrad accumulators for every unit.

    Unit ids are interned to row indices in order of first insertion; the
    mapping is part of the persisted snapshot.
    """

    def __init__(self, d: int, capacity: int = 64):
        if d < 1:
            raise ValueError("dimension must be positive")
        self.d = d
        self.step_count = 0
        self._units: list[UnitId] = []
        self._index: dict[UnitId, int] = {}
        self._vectors = np.zeros((max(capacity, 1), d))
        self._accum = np.zeros((max(capacity, 1), d))
        self._lock = threading.RLock()

    def __len__(self):
        return len(self._units)

    def __contains__(self, unit):
        return unit in self._index

    @property
    def units(self) -> list[UnitId]:
        return list(self._units)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors[: len(self._units)]

    @property
    def grad_accum(self) -> np.ndarray:
        return self._accum[: len(self._units)]

    # raw buffers for kernels; rows past len(self) are unused
    @property
    def vector_buffer(self) -> np.ndarray:
        return self._vectors

    @property
    def accum_buffer(self) -> np.ndarray:
        return self._accum

    def index(self, unit: UnitId) -> int:
        return self._index[unit]

    def get(self, unit: UnitId) -> Optional[int]:
        return self._index.get(unit)

    def vector(self, unit: UnitId) -> np.ndarray:
        return self._vectors[self._index[unit]]

    def kind_indices(self, kind: Kind) -> np.ndarray:
        return np.array([i for i, u in enumerate(self._units) if u.kind == kind], dtype=np.int64)

    def _grow(self, needed: int):
        cap = self._vectors.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        for name in ("_vectors", "_accum"):
            old = getattr(self, name)
            new = np.zeros((new_cap, self.d))
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def add(self, unit: UnitId, vector=None, rng: Optional[np.random.Generator] = None) -> int:
        """Insert ``unit`` if absent and return its row.

        New rows are initialized uniformly in [-0.5/d, 0.5/d] from ``rng`` unless
        an explicit vector is given.
        """
        with self._lock:
            idx = self._index.get(unit)
            if idx is not None:
                return idx
            idx = len(self._units)
            self._grow(idx + 1)
            if vector is not None:
                self._vectors[idx] = np.asarray(vector, dtype=np.float64)
            else:
                if rng is None:
                    raise ValueError("rng required to initialize a new unit")
                half = 0.5 / self.d
                self._vectors[idx] = rng.uniform(-half, half, self.d)
            self._accum[idx] = 0.0
            self._units.append(unit)
            self._index[unit] = idx
            return idx

    def ensure_all(self, units: Iterable[UnitId], rng: np.random.Generator) -> int:
        """Add every missing unit in iteration order; returns how many were new."""
        before = len(self._units)
        for u in units:
            if u not in self._index:
                self.add(u, rng=rng)
        return len(self._units) - before

    def copy(self) -> "EmbeddingStore":
        other = EmbeddingStore(self.d, capacity=max(len(self), 1))
        other.step_count = self.step_count
        other._units = list(self._units)
        other._index = dict(self._index)
        n = len(self)
        other._vectors[:n] = self.vectors
        other._accum[:n] = self.grad_accum
        return other

    def products(self) -> tuple[list[str], np.ndarray]:
        """Product ids and a copy of their raw vectors, in row order."""
        rows = self.kind_indices(Kind.PRODUCT)
        ids = [self._units[i].id for i in rows]
        return ids, self._vectors[rows].copy()

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "d": self.d,
            "step_count": self.step_count,
            "count": len(self),
            "dtype": "<f8",
            "units": [[u.kind.value, u.id, i] for i, u in enumerate(self._units)],
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = self.vectors.astype("<f8").tobytes() + self.grad_accum.astype("<f8").tobytes()
        return SNAPSHOT_MAGIC + head + b"\n" + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        if not data.startswith(SNAPSHOT_MAGIC):
            raise ValueError("not an OMBA-EMB-v1 snapshot")
        rest = data[len(SNAPSHOT_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl].decode("utf-8"))
        body = rest[nl + 1:]
        d, n = header["d"], header["count"]
        expected = 2 * n * d * 8
        if len(body) != expected:
            raise ValueError(f"snapshot body has {len(body)} bytes, expected {expected}")
        arr = np.frombuffer(body, dtype="<f8").reshape(2, n, d) if n else np.zeros((2, 0, d))
        store = cls(d, capacity=max(n, 1))
        for kind, uid, idx in header["units"]:
            if idx != len(store._units):
                raise ValueError("snapshot unit table is not dense")
            unit = UnitId(Kind(kind), uid)
            store._units.append(unit)
            store._index[unit] = idx
        store._vectors[:n] = arr[0]
        store._accum[:n] = arr[1]
        store.step_count = header["step_count"]
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
