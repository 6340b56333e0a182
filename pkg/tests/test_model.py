import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from omba.model import Basket, EmbeddingStore, Hyperparameters, Item, Kind, UnitId, normalize, normalize_rows

finite_vectors = arrays(np.float64, st.integers(1, 12),
                        elements=st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize([3.0, 4.0, 0.0, 0.0]), [0.6, 0.8, 0.0, 0.0])

    def test_unit_vector_is_fixed(self):
        e1 = np.eye(5)[0]
        np.testing.assert_array_equal(normalize(e1), e1)

    def test_diagonal(self):
        np.testing.assert_allclose(normalize([1.0, 1.0]), [1 / np.sqrt(2)] * 2, atol=1e-9)

    def test_degenerate_flag(self):
        v, flag = normalize(np.zeros(3), return_flag=True)
        assert flag
        np.testing.assert_array_equal(v, 0.0)
        _, flag = normalize([1e-13, 0.0], return_flag=True)
        assert flag

    @given(finite_vectors)
    def test_idempotent(self, v):
        once = normalize(v)
        np.testing.assert_allclose(normalize(once), once, atol=1e-12)

    @given(finite_vectors)
    def test_unit_norm(self, v):
        out, degenerate = normalize(v, return_flag=True)
        if not degenerate:
            assert abs(np.linalg.norm(out) - 1.0) < 1e-9

    def test_rows(self):
        m = np.array([[3.0, 4.0], [0.0, 0.0]])
        out, deg = normalize_rows(m)
        np.testing.assert_allclose(out[0], [0.6, 0.8])
        assert deg.tolist() == [False, True]


class TestBasket:
    def test_duplicate_products_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Basket(0.0, "u", (Item("a", 1.0), Item("a", 2.0)))

    def test_negative_price_rejected(self):
        with pytest.raises(ValueError):
            Basket(0.0, "u", (Item("a", -1.0),))

    def test_nonfinite_timestamp_rejected(self):
        with pytest.raises(ValueError):
            Basket(float("nan"), "u", ())

    def test_missing_price_allowed(self):
        assert Basket(0.0, "u", (Item("a", None),)).items[0].price is None


def test_hyperparameter_defaults():
    hp = Hyperparameters()
    assert (hp.d, hp.eta, hp.negatives, hp.epochs, hp.tau, hp.price_clip) == (300, 0.05, 3, 50, 0.1, 10.0)


class TestEmbeddingStore:
    def test_same_string_two_kinds(self, rng):
        s = EmbeddingStore(4)
        a = s.add(UnitId.product("x"), rng=rng)
        b = s.add(UnitId.user("x"), rng=rng)
        assert a != b and len(s) == 2

    def test_init_range_and_zero_accum(self, rng):
        s = EmbeddingStore(10)
        for i in range(200):
            s.add(UnitId.product(str(i)), rng=rng)
        assert np.all(np.abs(s.vectors) <= 0.05)
        assert np.all(s.grad_accum == 0.0)
        assert s.vectors.shape == s.grad_accum.shape == (200, 10)

    def test_add_is_idempotent(self, rng):
        s = EmbeddingStore(3)
        i = s.add(UnitId.product("a"), rng=rng)
        v = s.vectors[i].copy()
        assert s.add(UnitId.product("a"), rng=rng) == i
        np.testing.assert_array_equal(s.vectors[i], v)

    def test_snapshot_round_trip(self, rng):
        s = EmbeddingStore(6)
        for i in range(70):
            s.add(UnitId(Kind.PRODUCT if i % 3 else Kind.USER, f"id{i}"), rng=rng)
        s.accum_buffer[: len(s)] = rng.random((len(s), 6))
        s.step_count = 17
        data = s.to_bytes()
        assert data.startswith(b"OMBA-EMB-v1\n")
        t = EmbeddingStore.from_bytes(data)
        assert t.units == s.units and t.step_count == 17
        np.testing.assert_array_equal(t.vectors, s.vectors)
        np.testing.assert_array_equal(t.grad_accum, s.grad_accum)
        assert t.to_bytes() == data

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="snapshot"):
            EmbeddingStore.from_bytes(b"nope")
