import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omba.model import Basket, EmbeddingStore, Hyperparameters, Kind, UnitId, Window, normalize
from omba.ome import (NoiseDistribution, OnlineTrainer, TrainTask, adaptive_lr, apply_update, basket_tasks,
                      context_vector, exact_recovery_probabilities, intra_agreement, sample_negatives,
                      task_loss_and_grads, train_window, value_weight)

P, U = UnitId.product, UnitId.user


def store_with(vectors: dict, d=None):
    d = d or len(next(iter(vectors.values())))
    s = EmbeddingStore(d)
    for unit, v in vectors.items():
        s.vector_buffer[s.add(unit, rng=np.random.default_rng(0))] = v
    return s


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def oracle_loss(task, negatives, store, hp):
    """Loss written straight from the objective, clamps included."""
    ctx = task.context_products
    if ctx:
        g = np.array([value_weight(p, hp.price_clip) if hp.value_weighting else 1.0 for _, p in ctx])
        phat = sum(gi * store.vector(u) for gi, (u, _) in zip(g, ctx)) / g.sum()
    if task.user is None:
        h = phat
    elif ctx:
        h = (store.vector(task.user) + phat) / 2
    else:
        h = store.vector(task.user)
    clamp = lambda s: min(30.0, max(-30.0, s))
    loss = -math.log(sig(clamp(store.vector(task.target) @ h)))
    for n in negatives:
        loss -= math.log(sig(-clamp(store.vector(n) @ h)))
    return loss


class TestValueWeight:
    def test_examples(self):
        assert value_weight(1.0) == pytest.approx(0.76923, abs=1e-5)
        assert value_weight(2.0) == pytest.approx(3.7882, abs=1e-3)
        assert value_weight(10.0) == value_weight(25.0)
        assert value_weight(10.0) == pytest.approx(153.49, abs=0.01)

    def test_floor_and_missing(self):
        assert value_weight(0.0) == value_weight(0.01) > 0
        assert value_weight(None) == 1.0

    def test_negative(self):
        with pytest.raises(ValueError):
            value_weight(-1.0)


class TestContextVector:
    e = np.eye(4)

    def test_equal_prices(self):
        s = store_with({P("a"): self.e[0], P("b"): self.e[1]})
        t = TrainTask(U("u"), ((P("a"), 1.0), (P("b"), 1.0)))
        np.testing.assert_allclose(context_vector(t, s), [0.5, 0.5, 0, 0])

    def test_price_weighted(self):
        s = store_with({P("a"): self.e[0], P("b"): self.e[1]})
        t = TrainTask(U("u"), ((P("a"), 1.0), (P("b"), 2.0)))
        np.testing.assert_allclose(context_vector(t, s), [0.16878, 0.83122, 0, 0], atol=1e-4)

    def test_user_target_single_product(self):
        v = np.array([0.3, -0.2, 0.1, 0.4])
        s = store_with({P("a"): v})
        np.testing.assert_allclose(context_vector(TrainTask(U("u"), ((P("a"), 3.0),)), s), v)

    def test_product_target(self):
        s = store_with({P("a"): self.e[0], P("z"): self.e[2], U("u"): self.e[1]})
        t = TrainTask(P("z"), ((P("a"), 5.0),), U("u"))
        np.testing.assert_allclose(context_vector(t, s), [0.5, 0.5, 0, 0])

    def test_lone_product_uses_user(self):
        s = store_with({P("z"): self.e[2], U("u"): self.e[1]})
        np.testing.assert_allclose(context_vector(TrainTask(P("z"), (), U("u")), s), self.e[1])

    def test_empty_context_rejected(self):
        with pytest.raises(ValueError):
            TrainTask(U("u"), ())


class TestTasks:
    def test_enumeration(self):
        tasks = basket_tasks(Basket.of(0, "u", ["a", "b"]))
        assert [t.target for t in tasks] == [P("a"), P("b"), U("u")]
        assert tasks[0].context_products == ((P("b"), 1.0),) and tasks[0].user == U("u")
        assert tasks[2].user is None and len(tasks[2].context_products) == 2

    def test_single_product_basket(self):
        tasks = basket_tasks(Basket.of(0, "u", ["a"]))
        assert len(tasks) == 2 and tasks[0].context_products == ()


class TestNegatives:
    def noise(self, counts):
        s = EmbeddingStore(2)
        rows = [s.add(P(k), rng=np.random.default_rng(0)) for k in counts]
        nd = NoiseDistribution()
        nd.add_counts(Kind.PRODUCT, rows, list(counts.values()))
        return nd, rows

    def test_single_unit(self, rng):
        nd, rows = self.noise({"a": 1})
        assert sample_negatives(Kind.PRODUCT, 5, nd, rng) == [rows[0]] * 5

    def test_uniform_frequencies(self, rng):
        nd, rows = self.noise(dict.fromkeys("abcd", 1))
        draws = np.array(sample_negatives(Kind.PRODUCT, 40_000, nd, rng))
        freq = np.bincount(draws, minlength=4) / draws.size
        np.testing.assert_allclose(freq, 0.25, atol=0.01)

    def test_target_exclusion(self, rng):
        nd, rows = self.noise({"z": 99, "a": 1})
        assert set(sample_negatives(Kind.PRODUCT, 200, nd, rng, target=rows[0])) == {rows[1]}

    def test_exclusion_renormalizes(self, rng):
        nd, rows = self.noise({"a": 1, "z": 5, "b": 3})
        draws = np.array(sample_negatives(Kind.PRODUCT, 40_000, nd, rng, target=rows[1]))
        assert rows[1] not in draws
        assert np.mean(draws == rows[0]) == pytest.approx(0.25, abs=0.01)

    def test_only_the_target(self, rng):
        nd, rows = self.noise({"z": 1})
        assert sample_negatives(Kind.PRODUCT, 3, nd, rng, target=rows[0]) == [rows[0]] * 3

    def test_probabilities_sum_to_one(self):
        nd, _ = self.noise({"a": 3, "b": 1, "c": 6})
        assert sum(nd.probabilities(Kind.PRODUCT).values()) == pytest.approx(1.0)

    def test_empty_table(self, rng):
        with pytest.raises(ValueError):
            sample_negatives(Kind.USER, 1, NoiseDistribution(), rng)


class TestLoss:
    def test_perfect_fit(self):
        # target dot 30 and negative dot -30 (unit user, no products)
        s = store_with({U("u"): np.array([1.0, 0.0]), P("z"): np.array([30.0, 0.0]), P("n"): np.array([-30.0, 0.0])})
        loss, _ = task_loss_and_grads(TrainTask(P("z"), (), U("u")), [P("n")], s)
        assert loss < 1e-12

    def test_all_dots_zero(self):
        e = np.eye(6)
        s = store_with({U("u"): e[0], P("z"): e[1], P("n1"): e[2], P("n2"): e[3], P("n3"): e[4]})
        loss, _ = task_loss_and_grads(TrainTask(P("z"), (), U("u")), [P("n1"), P("n2"), P("n3")], s)
        assert loss == pytest.approx(4 * math.log(2), abs=1e-4)
        assert loss == pytest.approx(2.7726, abs=1e-4)

    def test_matches_oracle_loss(self, rng):
        s, task, negs = random_task(rng, 8)
        hp = Hyperparameters(d=8)
        assert task_loss_and_grads(task, negs, s, hp)[0] == pytest.approx(oracle_loss(task, negs, s, hp), rel=1e-12)


def random_task(rng, d, n_ctx=None, user_target=None, n_neg=3, scale=0.5):
    n_ctx = rng.integers(0, 5) if n_ctx is None else n_ctx
    user_target = bool(rng.integers(2)) if user_target is None else user_target
    if user_target and n_ctx == 0:
        n_ctx = 1
    s = EmbeddingStore(d)
    units = [U("u")] + [P(f"c{i}") for i in range(n_ctx)] + [P("z")] + [P(f"n{i}") for i in range(n_neg)]
    for u in units:
        s.vector_buffer[s.add(u, rng=rng)] = rng.normal(scale=scale, size=d)
    ctx = tuple((P(f"c{i}"), float(rng.uniform(0.2, 15))) for i in range(n_ctx))
    negatives = [P(f"n{i}") for i in range(n_neg)]
    if user_target:
        task = TrainTask(U("u"), ctx)
        negatives = [U(f"m{i}") for i in range(n_neg)]
        for n in negatives:
            s.vector_buffer[s.add(n, rng=rng)] = rng.normal(scale=scale, size=d)
    else:
        task = TrainTask(P("z"), ctx, U("u"))
    # a repeated negative exercises gradient merging
    negatives.append(negatives[0])
    return s, task, negatives


def finite_difference(task, negatives, store, hp, unit, eps=1e-5):
    r = store.index(unit)
    out = np.empty(store.d)
    for k in range(store.d):
        old = store.vector_buffer[r, k]
        store.vector_buffer[r, k] = old + eps
        up = oracle_loss(task, negatives, store, hp)
        store.vector_buffer[r, k] = old - eps
        down = oracle_loss(task, negatives, store, hp)
        store.vector_buffer[r, k] = old
        out[k] = (up - down) / (2 * eps)
    return out


def gradient_rel_error(seed, d, weighting=True):
    rng = np.random.default_rng(seed)
    s, task, negs = random_task(rng, d)
    hp = Hyperparameters(d=d, value_weighting=weighting)
    _, grads = task_loss_and_grads(task, negs, s, hp)
    worst = 0.0
    for unit in s.units:
        fd = finite_difference(task, negs, s, hp, unit)
        an = grads.get(unit, np.zeros(d))
        worst = max(worst, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-8))
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    assert gradient_rel_error(seed, 8) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_gradient_without_weighting(seed):
    assert gradient_rel_error(100 + seed, 16, weighting=False) < 1e-6


class TestIntraAgreement:
    def test_zero_dots(self):
        s = store_with({P("a"): np.eye(3)[0], P("b"): np.eye(3)[1], U("u"): np.eye(3)[2]})
        assert intra_agreement(Basket.of(0, "u", ["a", "b"]), s) == pytest.approx(0.5)

    def test_saturation(self):
        s = store_with({P("a"): np.array([np.sqrt(30.0), 0]), U("u"): np.array([np.sqrt(30.0), 0])})
        assert intra_agreement(Basket.of(0, "u", ["a"]), s) == pytest.approx(1.0, abs=1e-9)

    def test_three_units(self):
        # dots: a.b = 0, a.u = 2, b.u = -2
        s = store_with({P("a"): np.array([1.0, 0.0]), P("b"): np.array([0.0, 1.0]), U("u"): np.array([2.0, -2.0])})
        assert intra_agreement(Basket.of(0, "u", ["a", "b"]), s) == pytest.approx(0.5, abs=1e-5)


class TestAdaptiveLr:
    def test_examples(self):
        assert adaptive_lr(0.7, 0.0, 0.05) == 0.05
        assert adaptive_lr(0.5, 0.1, 0.05) == pytest.approx(0.047561, abs=1e-6)
        assert adaptive_lr(1.0, 0.1, 0.05) == pytest.approx(0.045242, abs=1e-6)

    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 5), st.floats(1e-4, 1))
    def test_bounds_and_monotone(self, a, b, tau, eta):
        lo, hi = sorted((a, b))
        assert adaptive_lr(hi, tau, eta) <= adaptive_lr(lo, tau, eta)
        lr = adaptive_lr(a, tau, eta)
        assert eta * math.exp(-tau) * (1 - 1e-12) <= lr <= eta


class TestApplyUpdate:
    def store(self):
        return store_with({P("a"): np.array([0.1, -0.2, 0.3])})

    def test_zero_gradient(self):
        s = self.store()
        before = s.vector(P("a")).copy()
        assert apply_update(P("a"), np.zeros(3), 0.05, s)
        np.testing.assert_array_equal(s.vector(P("a")), before)
        np.testing.assert_array_equal(s.grad_accum, 0.0)

    def test_first_step_is_sign(self):
        s = self.store()
        before = s.vector(P("a")).copy()
        g = np.array([2.0, -0.5, 1e-3])
        apply_update(P("a"), g, 0.05, s)
        step = before - s.vector(P("a"))
        np.testing.assert_allclose(step, 0.05 * g / np.sqrt(g * g + 1e-8))
        np.testing.assert_allclose(step, 0.05 * np.sign(g), rtol=1e-2)

    def test_second_identical_step(self):
        s = self.store()
        g = np.ones(3)
        apply_update(P("a"), g, 0.05, s)
        before = s.vector(P("a")).copy()
        apply_update(P("a"), g, 0.05, s)
        np.testing.assert_allclose(before - s.vector(P("a")), 0.05 / np.sqrt(2), atol=1e-6)

    def test_nonfinite_skipped(self):
        s = self.store()
        before = s.vector(P("a")).copy()
        assert not apply_update(P("a"), np.array([np.nan, 0, 0]), 0.05, s)
        np.testing.assert_array_equal(s.vector(P("a")), before)

    @settings(max_examples=30)
    @given(st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3), min_size=1, max_size=10))
    def test_accumulator_nondecreasing(self, grads):
        s = self.store()
        prev = s.grad_accum.copy()
        prev_factor = 0.05 / np.sqrt(prev + 1e-8)
        for g in grads:
            apply_update(P("a"), np.array(g), 0.05, s)
            assert np.all(s.grad_accum >= prev)
            factor = 0.05 / np.sqrt(s.grad_accum + 1e-8)
            assert np.all(factor <= prev_factor)
            prev, prev_factor = s.grad_accum.copy(), factor


def window_of(baskets, index=0):
    return Window(index, tuple(baskets), 0.0, 86400.0)


class TestTrainWindow:
    def test_empty_window(self, backend):
        s = EmbeddingStore(4)
        rep = train_window(window_of([]), s, NoiseDistribution(), Hyperparameters(d=4, epochs=3),
                           np.random.default_rng(0), backend=backend)
        assert rep.tasks == 0 and len(s) == 0

    def test_task_count(self, backend):
        s = EmbeddingStore(4)
        rep = train_window(window_of([Basket.of(0, "u", ["a", "b"])]), s, NoiseDistribution(),
                           Hyperparameters(d=4, epochs=1), np.random.default_rng(0), backend=backend)
        assert rep.tasks == 3 and rep.units_initialized == 3

    def test_deterministic(self, five_baskets, backend):
        hp = Hyperparameters(d=8, epochs=5, seed=3)
        a, b = OnlineTrainer(hp, backend=backend), OnlineTrainer(hp, backend=backend)
        a.train_window(window_of(five_baskets))
        b.train_window(window_of(five_baskets))
        assert a.store.to_bytes() == b.store.to_bytes()

    def test_accumulators_grow(self, five_baskets):
        t = OnlineTrainer(Hyperparameters(d=8, epochs=2))
        t.train_window(window_of(five_baskets[:3]))
        acc = t.store.grad_accum.copy()
        t.train_window(window_of(five_baskets, 1))
        assert np.all(t.store.grad_accum[: len(acc)] >= acc)


def splitmix_uniforms(state):
    """Independent splitmix64 stream, yielding doubles in [0, 1)."""
    mask = (1 << 64) - 1
    while True:
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        yield ((z ^ (z >> 31)) >> 11) / 2.0 ** 53


def reference_epoch(baskets, store, noise, hp, order, state):
    """One epoch composed from the per-operation functions."""
    stream = splitmix_uniforms(state)

    def negatives(kind, target):
        # conditional draw: u scaled over the non-target mass, then the target's interval skipped
        cum, rows = noise.table(kind)
        mass = np.diff(np.concatenate([[0.0], cum]))
        keep = rows != store.index(target)
        kept_rows, kept_cum = rows[keep], np.cumsum(mass[keep])
        out = []
        for _ in range(hp.negatives):
            x = next(stream) * kept_cum[-1]
            i = min(int(np.searchsorted(kept_cum, x, side="right")), len(kept_rows) - 1)
            out.append(store.units[kept_rows[i]])
        return out

    for b in order:
        basket = baskets[b]
        lr = adaptive_lr(intra_agreement(basket, store), hp.tau, hp.eta)
        for task in basket_tasks(basket):
            _, grads = task_loss_and_grads(task, negatives(task.target.kind, task.target), store, hp)
            for unit, g in grads.items():
                apply_update(unit, g, lr, store, hp.eps)


def test_kernel_matches_composed_operations(backend):
    rng = np.random.default_rng(5)
    baskets = [Basket.of(i, f"u{rng.integers(3)}", [f"p{j}" for j in rng.choice(8, rng.integers(1, 5), replace=False)],
                         prices=list(rng.uniform(0.5, 12, 4)))
               for i in range(12)]
    hp = Hyperparameters(d=6, epochs=1, eta=0.2)
    ref_store = EmbeddingStore(6)
    trainer = OnlineTrainer(hp, backend=backend, init_seed=1, train_seed=2)
    trainer.train_window(window_of(baskets))

    # replay the trainer's random choices against the composed reference
    init_rng, rng2 = np.random.default_rng(1), np.random.default_rng(2)
    from omba.ome import init_units
    init_units(baskets, ref_store, init_rng)
    noise = NoiseDistribution()
    noise.update(baskets, ref_store)
    order = rng2.permutation(len(baskets))
    state = int(rng2.integers(0, 2**63))
    reference_epoch(baskets, ref_store, noise, hp, order, state)
    np.testing.assert_allclose(trainer.store.vectors, ref_store.vectors, rtol=0, atol=1e-12)
    np.testing.assert_allclose(trainer.store.grad_accum, ref_store.grad_accum, rtol=0, atol=1e-12)


def test_cooccurring_pair_grows_closer():
    gains = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        baskets = [Basket.of(i, f"u{i % 4}", ["x", "y", f"f{rng.integers(20)}"]) for i in range(40)]
        hp = Hyperparameters(d=32, epochs=50, seed=seed)
        t = OnlineTrainer(hp)
        t.store.ensure_all([U(f"u{i}") for i in range(4)] + [P("x"), P("y")], t.init_rng)
        before = normalize(t.store.vector(P("x"))) @ normalize(t.store.vector(P("y")))
        t.train_window(window_of(baskets))
        after = normalize(t.store.vector(P("x"))) @ normalize(t.store.vector(P("y")))
        gains.append(after - before)
    assert np.mean(gains) > 0


@pytest.mark.parametrize("seed", range(5))
def test_exact_softmax_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    s, task, _ = random_task(rng, 8, n_ctx=3, user_target=False, scale=3.0)
    for i in range(12 - len(s.kind_indices(Kind.PRODUCT))):
        s.vector_buffer[s.add(P(f"extra{i}"), rng=rng)] = rng.normal(scale=3.0, size=8)
    probs = exact_recovery_probabilities(task, s)
    assert len(probs) == 12
    assert abs(sum(probs.values()) - 1.0) < 1e-9
