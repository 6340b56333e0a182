"""Association rules from product embeddings via sign random projections.

Each of ``num_tables`` tables hashes a normalized product vector to the sign
pattern of ``num_functions`` Gaussian projections. Products sharing a bucket
collide in that table; pairs are ranked by how many tables they collide in.
The defaults (4 functions, 11 tables, sigmoid scale 4.3) make the
at-least-one-collision probability track sigmoid(4.3 * cosine), the
Lift-based association likelihood under negative-sampling training.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .model import EmbeddingStore, normalize, normalize_rows
from .stats import CooccurrenceIndex, UndefinedLift, lift

log = logging.getLogger(__name__)

NUM_FUNCTIONS = 4
NUM_TABLES = 11
LIFT_SCALE = 4.3


class HashEnsemble:
    """``num_tables`` x ``num_functions`` standard-normal projection vectors."""

    def __init__(self, d: int, num_functions: int = NUM_FUNCTIONS, num_tables: int = NUM_TABLES, seed: int = 0):
        if d < 1 or num_functions < 1 or num_tables < 1:
            raise ValueError("d, num_functions and num_tables must be positive")
        if num_functions > 62:
            raise ValueError("at most 62 hash functions per table")
        self.d = d
        self.num_functions = num_functions
        self.num_tables = num_tables
        self.seed = seed
        self.projections = np.random.default_rng(seed).standard_normal((num_tables, num_functions, d))

    def signature(self, v) -> np.ndarray:
        """Bits of ``v`` per table, shape (num_tables, num_functions); 1 where f.v >= 0."""
        v, degenerate = normalize(v, return_flag=True)
        if degenerate:
            raise ValueError("zero embedding has no signature")
        return (self.projections @ v >= 0).astype(np.uint8)

    def codes(self, vectors: np.ndarray) -> np.ndarray:
        """Integer bucket code per (product, table); bit i is function i."""
        bits = np.einsum("tfd,nd->ntf", self.projections, vectors) >= 0
        weights = 1 << np.arange(self.num_functions, dtype=np.int64)
        return (bits.astype(np.int64) * weights).sum(axis=2)


def signature_string(bits: np.ndarray) -> list[str]:
    return ["".join(str(int(b)) for b in row) for row in bits]


def collision_probability(cosine, num_functions: int = NUM_FUNCTIONS, num_tables: int = NUM_TABLES):
    """Chance that two vectors at ``cosine`` share a bucket in at least one table."""
    c = np.clip(np.asarray(cosine, dtype=np.float64), -1.0, 1.0)
    per_bit = 1.0 - np.arccos(c) / np.pi
    p = 1.0 - (1.0 - per_bit ** num_functions) ** num_tables
    return float(p) if p.ndim == 0 else p


def lift_likelihood(dot, scale: float = LIFT_SCALE):
    x = scale * np.asarray(dot, dtype=np.float64)
    p = 0.5 * (1.0 + np.tanh(0.5 * x))
    return float(p) if p.ndim == 0 else p


def _grid(step: float) -> np.ndarray:
    n = int(round(2.0 / step))
    return np.linspace(-1.0, 1.0, n + 1)


def calibration_gap(num_functions: int = NUM_FUNCTIONS, num_tables: int = NUM_TABLES,
                    scale: float = LIFT_SCALE, grid_step: float = 0.001) -> float:
    """Max |collision_probability - lift_likelihood| over a cosine grid on [-1, 1]."""
    c = _grid(grid_step)
    return float(np.max(np.abs(collision_probability(c, num_functions, num_tables) - lift_likelihood(c, scale))))


def best_scale(num_functions: int, num_tables: int, grid_step: float = 0.001,
               bounds: tuple[float, float] = (0.1, 30.0)) -> tuple[float, float]:
    """(scale, gap) minimizing the calibration gap for a fixed table layout."""
    c = _grid(grid_step)
    p = collision_probability(c, num_functions, num_tables)
    res = minimize_scalar(lambda a: np.max(np.abs(p - lift_likelihood(c, a))),
                          bounds=bounds, method="bounded", options={"xatol": 1e-6})
    return float(res.x), float(res.fun)


def calibration_sweep(functions=range(1, 9), tables=range(1, 21), grid_step: float = 0.001) -> list[dict]:
    """Re-fit the sigmoid scale for every layout; sorted by gap ascending."""
    rows = []
    for f in functions:
        for t in tables:
            a, gap = best_scale(f, t, grid_step)
            rows.append({"num_functions": f, "num_tables": t, "scale": a, "gap": gap})
    rows.sort(key=lambda r: r["gap"])
    return rows


@dataclass
class AssociationRule:
    product_a: str
    product_b: str
    collision_count: int
    cosine: float
    lift: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "product_a": self.product_a,
            "product_b": self.product_b,
            "collision_count": self.collision_count,
            "cosine": self.cosine,
            "lift": self.lift,
        }


@dataclass
class MiningStats:
    products: int = 0
    degenerate: int = 0
    excluded_rare: int = 0
    giant_buckets: int = 0
    candidate_pairs: int = 0


def _bucket_pairs(members: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(len(members), 1)
    return np.stack([members[i], members[j]], axis=1)


def collision_counts(codes: np.ndarray, max_bucket: Optional[int] = None, stats: Optional[MiningStats] = None):
    """Pairwise collision counts from per-table bucket codes.

    Returns (pairs, counts) with pairs as (i, j), i < j, over product rows.
    Buckets larger than ``max_bucket`` are skipped. Tables merge by addition,
    so they can be processed in any order.
    """
    n, t = codes.shape
    chunks = []
    for table in range(t):
        col = codes[:, table]
        order = np.argsort(col, kind="stable")
        sorted_codes = col[order]
        cuts = np.flatnonzero(np.diff(sorted_codes)) + 1
        for members in np.split(order, cuts):
            if len(members) < 2:
                continue
            if max_bucket is not None and len(members) > max_bucket:
                if stats is not None:
                    stats.giant_buckets += 1
                log.info("table %d: bucket of %d products skipped", table, len(members))
                continue
            chunks.append(_bucket_pairs(np.sort(members)))
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    allpairs = np.concatenate(chunks).astype(np.int64)
    keys = allpairs[:, 0] * n + allpairs[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    return np.stack([uniq // n, uniq % n], axis=1), counts


def default_max_bucket(n: int, num_functions: int) -> int:
    """Giant-bucket threshold: twice sqrt(n), but never under 4x the mean bucket size."""
    return int(max(2 * math.sqrt(n), 4 * n / 2 ** num_functions))


def mine_rules(store: EmbeddingStore, ensemble: HashEnsemble, top_k: int = 100,
               index: Optional[CooccurrenceIndex] = None, min_count: int = 0,
               max_bucket: Optional[int] = None, stats: Optional[MiningStats] = None) -> list[AssociationRule]:
    """Top-``top_k`` product pairs by (collisions desc, cosine desc, ids asc).

    ``min_count`` > 0 drops products the index saw fewer times (needs ``index``).
    Cosines are computed for colliding pairs only.
    """
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    ids, raw = store.products()
    if len(ids) < 2:
        raise ValueError("need at least two products to mine rules")
    if raw.shape[1] != ensemble.d:
        raise ValueError(f"ensemble dimension {ensemble.d} != embedding dimension {raw.shape[1]}")
    stats = stats if stats is not None else MiningStats()
    V, degenerate = normalize_rows(raw)
    keep = ~degenerate
    stats.degenerate = int(degenerate.sum())
    if stats.degenerate:
        log.warning("%d zero product embeddings excluded from mining", stats.degenerate)
    if min_count > 0:
        if index is None:
            raise ValueError("min_count needs a co-occurrence index")
        rare = np.array([index.item_counts.get(p, 0) < min_count for p in ids])
        stats.excluded_rare = int((rare & keep).sum())
        keep &= ~rare
    rows = np.flatnonzero(keep)
    ids = [ids[i] for i in rows]
    V = V[rows]
    n = len(ids)
    stats.products = n
    if max_bucket is None:
        max_bucket = default_max_bucket(n, ensemble.num_functions)

    pairs, counts = collision_counts(ensemble.codes(V), max_bucket, stats)
    stats.candidate_pairs = len(counts)
    if not len(counts):
        return []
    cos = np.einsum("ij,ij->i", V[pairs[:, 0]], V[pairs[:, 1]])
    a = [ids[i] for i in pairs[:, 0]]
    b = [ids[j] for j in pairs[:, 1]]
    lo = [x if x <= y else y for x, y in zip(a, b)]
    hi = [y if x <= y else x for x, y in zip(a, b)]
    # sort by the integer count and cosine first, then settle exact ties by id
    order = np.lexsort((-cos, -counts))
    ranked = []
    i = 0
    while i < len(order) and len(ranked) < top_k:
        j = i
        while j + 1 < len(order) and counts[order[j + 1]] == counts[order[i]] and cos[order[j + 1]] == cos[order[i]]:
            j += 1
        group = sorted(order[i:j + 1], key=lambda k: (lo[k], hi[k]))
        ranked.extend(group)
        i = j + 1
    rules = []
    for k in ranked[:top_k]:
        value = None
        if index is not None:
            try:
                value = lift(lo[k], hi[k], index)
            except UndefinedLift:
                value = None
        rules.append(AssociationRule(lo[k], hi[k], int(counts[k]), float(np.clip(cos[k], -1.0, 1.0)), value))
    return rules


def bucket_groups(store: EmbeddingStore, ensemble: HashEnsemble) -> list[list[list[str]]]:
    """Raw bucket membership per table (groups of two or more products)."""
    ids, raw = store.products()
    V, degenerate = normalize_rows(raw)
    rows = np.flatnonzero(~degenerate)
    codes = ensemble.codes(V[rows])
    tables = []
    for t in range(codes.shape[1]):
        groups = {}
        for r, c in zip(rows, codes[:, t]):
            groups.setdefault(int(c), []).append(ids[r])
        tables.append([sorted(g) for _, g in sorted(groups.items()) if len(g) > 1])
    return tables


def write_rules(rules, fh) -> None:
    for r in rules:
        fh.write(json.dumps(r.as_dict(), sort_keys=False) + "\n")


def read_rules(fh) -> list[AssociationRule]:
    return [AssociationRule(**json.loads(line)) for line in fh if line.strip()]
