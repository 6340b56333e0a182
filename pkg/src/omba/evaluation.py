"""Intra-basket item retrieval and the user-repetition test."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from .model import Basket, EmbeddingStore, Hyperparameters, Kind, UnitId, Window, normalize_rows
from .ome import NoiseDistribution, OnlineTrainer
from .stats import BASELINES, CooccurrenceIndex, baseline_score

log = logging.getLogger(__name__)

SCORERS = ("Embedding",) + BASELINES


@dataclass(frozen=True)
class EvalQuery:
    target: str
    context_products: tuple[str, ...]
    user: str
    candidates: tuple[str, ...]


@dataclass
class EvalReport:
    mrr: float
    recall_at: dict[int, float]
    dcg: float
    query_count: int

    def as_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "recall": {str(k): v for k, v in sorted(self.recall_at.items())},
            "dcg": self.dcg,
            "queries": self.query_count,
        }


def metrics(ranks: Sequence[int], ks: Sequence[int] = (1, 5, 10)) -> EvalReport:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks to score")
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    return EvalReport(
        mrr=float(np.mean(1.0 / r)),
        recall_at={int(k): float(np.mean(r <= k)) for k in ks},
        dcg=float(np.mean(1.0 / np.log2(r + 1.0))),
        query_count=int(r.size),
    )


def product_catalog(noise: NoiseDistribution, store: EmbeddingStore) -> tuple[list[str], np.ndarray]:
    """Product ids and their sampling mass from the noise table."""
    cum, rows = noise.table(Kind.PRODUCT)
    units = store.units
    mass = np.diff(np.concatenate([[0.0], cum])) if len(cum) else np.zeros(0)
    return [units[r].id for r in rows], mass


def build_queries(test_baskets: Sequence[Basket], M: int, catalog: Sequence[str], weights, rng: np.random.Generator,
                  one_per_basket: bool = False) -> tuple[list[EvalQuery], int]:
    """Held-out-product queries with ``M`` negatives drawn by ``weights`` over ``catalog``.

    Negatives are distinct and never products of the query's basket. Returns
    (queries, skipped baskets). ``one_per_basket`` picks a single random target
    per basket instead of one query per product.
    """
    catalog = list(catalog)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(catalog):
        raise ValueError("catalog and weights differ in length")
    pos = {p: i for i, p in enumerate(catalog)}
    queries, skipped = [], 0
    for b in test_baskets:
        prods = b.products
        if len(prods) < 2:
            skipped += 1
            log.debug("basket %r has %d product(s); no query", b.basket_id, len(prods))
            continue
        allowed = w.copy()
        for p in prods:
            if p in pos:
                allowed[pos[p]] = 0.0
        if np.count_nonzero(allowed) < M:
            raise ValueError(f"catalog too small: need {M} negatives outside a {len(prods)}-product basket")
        targets = [prods[rng.integers(len(prods))]] if one_per_basket else list(prods)
        for t in targets:
            negs = rng.choice(len(catalog), size=M, replace=False, p=allowed / allowed.sum())
            cands = [t] + [catalog[i] for i in negs]
            order = rng.permutation(M + 1)
            queries.append(EvalQuery(t, tuple(p for p in prods if p != t), b.user,
                                     tuple(cands[i] for i in order)))
    return queries, skipped


def _rank(target: str, candidates: Sequence[str], scores: Sequence[float]) -> int:
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i]))
    for pos, i in enumerate(order, start=1):
        if candidates[i] == target:
            return pos
    raise ValueError("target missing from candidates")


def embedding_scores(query: EvalQuery, store: EmbeddingStore, normalized: Optional[np.ndarray] = None) -> list[float]:
    """Mean cosine of each candidate to the context products and the user; unknown units score 0.

    ``normalized`` may carry precomputed unit rows of ``store.vectors`` (zero rows
    for degenerate vectors) to avoid renormalizing per query.
    """
    if normalized is None:
        normalized, deg = normalize_rows(store.vectors)
        normalized[deg] = 0.0
    ctx = [UnitId.product(p) for p in query.context_products] + [UnitId.user(query.user)]
    known_ctx = [r for r in (store.get(u) for u in ctx) if r is not None]
    cand_rows = [store.get(UnitId.product(c)) for c in query.candidates]
    if not known_ctx:
        return [0.0] * len(cand_rows)
    centroid = normalized[known_ctx].sum(axis=0) / len(ctx)
    return [0.0 if r is None else float(normalized[r] @ centroid) for r in cand_rows]


def rank_candidates(query: EvalQuery, scorer: str, store: Optional[EmbeddingStore] = None,
                    index: Optional[CooccurrenceIndex] = None, normalized: Optional[np.ndarray] = None) -> int:
    """1-based rank of the target; ties go to the smaller product id."""
    if scorer == "Embedding":
        if store is None:
            raise ValueError("Embedding scorer needs a store")
        scores = embedding_scores(query, store, normalized)
    elif scorer in BASELINES:
        if index is None:
            raise ValueError(f"{scorer} scorer needs a co-occurrence index")
        scores = [baseline_score(c, query.context_products, index, scorer) for c in query.candidates]
    else:
        raise ValueError(f"unknown scorer {scorer!r}")
    return _rank(query.target, query.candidates, scores)


@dataclass
class ProtocolResult:
    reports: dict[str, EvalReport]
    ranks: dict[str, list[int]] = field(default_factory=dict)
    skipped_baskets: int = 0
    train_reports: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {s: r.as_dict() for s, r in self.reports.items()}


def run_protocol(windows: Sequence[Window], query_windows: Sequence[int], hp: Hyperparameters, M: int = 10,
                 scorers: Sequence[str] = SCORERS, ks: Sequence[int] = (1, 5, 10), eval_seed: int = 0,
                 trainer: Optional[OnlineTrainer] = None, uniform_negatives: bool = False,
                 one_per_basket: bool = False) -> ProtocolResult:
    """Online evaluation: each query window is scored with models fed only earlier windows.

    After scoring, the query window is trained on like any other window.
    Windows after the last query window are not consumed.
    """
    query_windows = list(query_windows)
    if query_windows != sorted(set(query_windows)):
        raise ValueError("query windows must be strictly ascending")
    if query_windows and (query_windows[0] < 0 or query_windows[-1] >= len(windows)):
        raise ValueError(f"query window out of range [0, {len(windows)})")
    for s in scorers:
        if s not in SCORERS:
            raise ValueError(f"unknown scorer {s!r}")
    trainer = trainer or OnlineTrainer(hp)
    index = CooccurrenceIndex()
    rng = np.random.default_rng(eval_seed)
    ranks: dict[str, list[int]] = {s: [] for s in scorers}
    qset = set(query_windows)
    skipped = 0
    last = query_windows[-1] if query_windows else -1
    for w in windows[: last + 1]:
        if w.index in qset:
            catalog, mass = product_catalog(trainer.noise, trainer.store)
            known = set(catalog)
            # products new in this window can still serve as negatives, at unit mass
            fresh = sorted({p for b in w.baskets for p in b.products} - known)
            catalog = catalog + fresh
            mass = np.concatenate([mass, np.ones(len(fresh))])
            if uniform_negatives:
                mass = np.ones(len(catalog))
            queries, sk = build_queries(w.baskets, M, catalog, mass, rng, one_per_basket)
            skipped += sk
            normalized, deg = normalize_rows(trainer.store.vectors)
            normalized[deg] = 0.0
            for q in queries:
                for s in scorers:
                    ranks[s].append(rank_candidates(q, s, trainer.store, index, normalized))
        trainer.train_window(w)
        index.add_window(w)
    reports = {s: metrics(r, ks) for s, r in ranks.items() if r}
    return ProtocolResult(reports, ranks, skipped, list(trainer.reports))


# -- user repetition ---------------------------------------------------------


def tfidf_vectors(baskets: Sequence[Basket]) -> list[dict[str, float]]:
    """Sparse TF-IDF per basket: tf = count in basket, idf = ln(N / df)."""
    n = len(baskets)
    df: dict[str, int] = defaultdict(int)
    for b in baskets:
        for p in set(b.products):
            df[p] += 1
    vecs = []
    for b in baskets:
        tf: dict[str, int] = defaultdict(int)
        for p in b.products:
            tf[p] += 1
        vecs.append({p: c * math.log(n / df[p]) for p, c in tf.items()})
    return vecs


def sparse_cosine(a: dict[str, float], b: dict[str, float]) -> float:
    if len(a) > len(b):
        a, b = b, a
    dot = sum(v * b.get(k, 0.0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


@dataclass
class RepetitionResult:
    t_stat: float
    p_value: float
    mean_same: float
    mean_diff: float
    k: int

    def as_dict(self) -> dict:
        return {"t_stat": self.t_stat, "p_value": self.p_value, "mean_same": self.mean_same,
                "mean_diff": self.mean_diff, "k": self.k}


def user_repetition_test(baskets: Sequence[Basket], k: int, rng: np.random.Generator) -> RepetitionResult:
    """Are two baskets of one user more alike than baskets of two different users?

    Samples ``k`` same-user and ``k`` different-user basket pairs, compares
    TF-IDF cosines with a one-sided Welch t-test (alternative: same > diff).
    """
    baskets = list(baskets)
    by_user: dict[str, list[int]] = defaultdict(list)
    for i, b in enumerate(baskets):
        by_user[b.user].append(i)
    repeat_users = sorted(u for u, idx in by_user.items() if len(idx) >= 2)
    if len(repeat_users) < 2:
        raise ValueError("need at least two users with two or more baskets")
    if k < 2:
        raise ValueError("k must be at least 2")
    users = sorted(by_user)
    vecs = tfidf_vectors(baskets)
    same = np.empty(k)
    diff = np.empty(k)
    for i in range(k):
        idx = by_user[repeat_users[rng.integers(len(repeat_users))]]
        x, y = rng.choice(len(idx), size=2, replace=False)
        same[i] = sparse_cosine(vecs[idx[x]], vecs[idx[y]])
        u1, u2 = rng.choice(len(users), size=2, replace=False)
        a = by_user[users[u1]]
        b = by_user[users[u2]]
        diff[i] = sparse_cosine(vecs[a[rng.integers(len(a))]], vecs[b[rng.integers(len(b))]])
    if np.all(same == same[0]) and np.all(diff == diff[0]):
        # zero variance in both samples: the t statistic is degenerate
        gap = same[0] - diff[0]
        t = math.inf if gap > 0 else (-math.inf if gap < 0 else 0.0)
        p = 0.0 if gap > 0 else (1.0 if gap < 0 else 0.5)
    else:
        res = sps.ttest_ind(same, diff, equal_var=False, alternative="greater")
        t, p = float(res.statistic), float(res.pvalue)
    return RepetitionResult(t, p, float(same.mean()), float(diff.mean()), k)
