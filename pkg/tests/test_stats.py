import numpy as np
import pytest
from hypothesis import given, strategies as st

from omba.ingest import window_stream
from omba.model import Basket
from omba.stats import (CooccurrenceIndex, EmptyIndex, UndefinedLift, baseline_score, build_index, lift,
                        lift_from_supports, support)


@pytest.fixture
def index(five_baskets):
    return build_index(five_baskets)


class TestIndex:
    def test_two_baskets(self):
        idx = build_index([Basket.of(0, "u", ["A", "B"]), Basket.of(1, "u", ["A"])])
        assert idx.item_counts == {"A": 2, "B": 1}
        assert idx.pair_count("B", "A") == 1

    def test_empty(self):
        idx = build_index([])
        assert idx.basket_count == 0 and not idx.item_counts and not idx.pair_counts

    def test_fixture_counts(self, index):
        assert index.pair_count("A", "B") == 2
        assert index.pair_count("A", "C") == 1
        assert index.item_counts["C"] == 3

    def test_pairs_keyed_by_ordered_tuple(self, index):
        assert all(a < b for a, b in index.pair_counts)

    def test_incremental_equals_batch(self, five_baskets):
        inc = CooccurrenceIndex()
        for w in window_stream(five_baskets, window_days=1):
            inc.add_window(w)
        assert inc == build_index(five_baskets)


class TestSupportAndLift:
    def test_support(self, index):
        assert support(["A"], index) == pytest.approx(0.6)
        assert support(["Z"], index) == 0.0
        assert support(["A", "B"], index) == pytest.approx(0.4)

    def test_support_empty(self):
        with pytest.raises(EmptyIndex):
            support(["A"], CooccurrenceIndex())

    def test_lift_fixture(self, index):
        assert abs(lift("A", "B", index) - 0.4 / (0.6 * 0.6)) < 1e-9

    def test_never_together(self, index):
        assert lift("A", "D", index) == 0.0

    def test_undefined(self, index):
        with pytest.raises(UndefinedLift):
            lift("A", "Z", index)

    def test_strong_association_example(self):
        # marginals 1.2% and 0.5%, joint support back-derived from a lift of 43.45
        assert abs(lift_from_supports(0.0026070, 0.012, 0.005) - 43.45) < 0.01

    @given(st.lists(st.sets(st.sampled_from("ABCDEFG"), min_size=1), min_size=1, max_size=30),
           st.sampled_from("ABCDEFG"), st.sampled_from("ABCDEFG"))
    def test_symmetric(self, sets, x, y):
        idx = build_index([Basket.of(i, "u", sorted(s)) for i, s in enumerate(sets)])
        try:
            a = lift(x, y, idx)
        except UndefinedLift:
            with pytest.raises(UndefinedLift):
                lift(y, x, idx)
            return
        assert a == lift(y, x, idx)

    def test_independent_items_have_lift_one(self):
        rng = np.random.default_rng(7)
        n = 50_000
        xs = rng.random(n) < 0.2
        ys = rng.random(n) < 0.3
        baskets = [Basket.of(i, "u", (["x"] if a else []) + (["y"] if b else []) + ["z"])
                   for i, (a, b) in enumerate(zip(xs, ys))]
        assert abs(lift("x", "y", build_index(baskets)) - 1.0) < 0.1


class TestBaselines:
    def test_pop(self, index):
        assert baseline_score("C", ["A"], index, "Pop") == 3

    def test_sup(self, index):
        assert baseline_score("B", ["A"], index, "Sup") == pytest.approx(0.4)

    def test_lift_unseen_candidate(self, index):
        assert baseline_score("Z", ["A"], index, "Lift") == 0.0

    def test_mean_over_context(self, index):
        want = (lift("C", "A", index) + lift("C", "B", index)) / 2
        assert baseline_score("C", ["A", "B"], index, "Lift") == pytest.approx(want)

    def test_unknown_method(self, index):
        with pytest.raises(ValueError):
            baseline_score("A", ["B"], index, "Cosine")
