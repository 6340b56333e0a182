"""Exact co-occurrence counts, Support, Lift and the count-based baselines."""

from __future__ import annotations

import csv
from collections import Counter
from itertools import combinations
from typing import Iterable

from .model import Basket, Window


class UndefinedLift(ValueError):
    """Raised when a marginal Support is zero, so Lift has no value."""


class EmptyIndex(ValueError):
    pass


def _pair(x: str, y: str) -> tuple[str, str]:
    return (x, y) if x <= y else (y, x)


class CooccurrenceIndex:
    """Item and pair basket-counts; pairs keyed by the ordered (min, max) id tuple."""

    def __init__(self):
        self.basket_count = 0
        self.item_counts: Counter = Counter()
        self.pair_counts: Counter = Counter()

    def add_baskets(self, baskets: Iterable[Basket]) -> "CooccurrenceIndex":
        items, pairs = self.item_counts, self.pair_counts
        for b in baskets:
            prods = sorted(b.products)
            self.basket_count += 1
            items.update(prods)
            if len(prods) > 1:
                pairs.update(combinations(prods, 2))
        return self

    def add_window(self, window: Window) -> "CooccurrenceIndex":
        return self.add_baskets(window.baskets)

    def count(self, itemset) -> int:
        items = tuple(itemset)
        if len(items) == 1:
            return self.item_counts.get(items[0], 0)
        if len(items) == 2:
            if items[0] == items[1]:
                return self.item_counts.get(items[0], 0)
            return self.pair_counts.get(_pair(*items), 0)
        raise ValueError("only itemsets of size 1 or 2 are indexed")

    def pair_count(self, x: str, y: str) -> int:
        return self.pair_counts.get(_pair(x, y), 0)

    def __eq__(self, other):
        if not isinstance(other, CooccurrenceIndex):
            return NotImplemented
        return (
            self.basket_count == other.basket_count
            and +self.item_counts == +other.item_counts
            and +self.pair_counts == +other.pair_counts
        )

    def dump_pairs(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["product_a", "product_b", "pair_count"])
        for (a, b), n in sorted(self.pair_counts.items()):
            w.writerow([a, b, n])


def build_index(baskets: Iterable[Basket]) -> CooccurrenceIndex:
    return CooccurrenceIndex().add_baskets(baskets)


def support(itemset, index: CooccurrenceIndex) -> float:
    if index.basket_count == 0:
        raise EmptyIndex("support is undefined on an empty index")
    return index.count(itemset) / index.basket_count


def lift(x: str, y: str, index: CooccurrenceIndex) -> float:
    n = index.basket_count
    if n == 0:
        raise EmptyIndex("lift is undefined on an empty index")
    cx, cy = index.item_counts.get(x, 0), index.item_counts.get(y, 0)
    if cx == 0 or cy == 0:
        raise UndefinedLift(f"zero marginal support for {x if cx == 0 else y!r}")
    # counts form avoids the rounding of three divisions; symmetric by construction
    return index.pair_count(x, y) * n / (cx * cy)


def lift_from_supports(joint: float, sx: float, sy: float) -> float:
    if sx <= 0 or sy <= 0:
        raise UndefinedLift("zero marginal support")
    return joint / (sx * sy)


BASELINES = ("Pop", "Sup", "Lift")


def baseline_score(candidate: str, context: Iterable[str], index: CooccurrenceIndex, method: str) -> float:
    """Count-based similarity of ``candidate`` to a query context; higher is better.

    Sup and Lift average the pairwise measure over the context products; an
    undefined Lift term counts as 0.
    """
    if method == "Pop":
        return float(index.item_counts.get(candidate, 0))
    context = list(context)
    if not context or index.basket_count == 0:
        return 0.0
    if method == "Sup":
        return sum(index.pair_count(candidate, c) for c in context) / index.basket_count / len(context)
    if method == "Lift":
        total = 0.0
        for c in context:
            try:
                total += lift(candidate, c, index)
            except UndefinedLift:
                pass
        return total / len(context)
    raise ValueError(f"unknown baseline {method!r}")
