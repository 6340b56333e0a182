"""Online multi-modal embedding trainer.

Every unit of a basket (its products and its user) is recovered from the rest
of the basket with a negative-sampling logistic loss. The context of a
product is the average of the user vector and the price-weighted mean of the
other products; the context of a user is the weighted product mean. Updates
use a per-basket learning rate damped by how well the model already fits the
basket, scaled per coordinate by AdaGrad.

The window loop itself runs in :mod:`omba.kernels`; the functions here are
the per-operation reference used by tests and by callers needing one piece.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .model import Basket, EmbeddingStore, Hyperparameters, Kind, UnitId, Window

log = logging.getLogger(__name__)

PRICE_FLOOR = 0.01
SIGMOID_CLAMP = 30.0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def value_weight(price: Optional[float], clip: float = 10.0) -> float:
    """Inverse appearance probability of a product at ``price``.

    Appearance probability follows 1.3 * price**-2.3 (power law in price), so
    the weight is min(price, clip)**2.3 / 1.3. Prices under one cent are
    floored; a missing price gives the neutral weight 1.
    """
    if price is None or (isinstance(price, float) and math.isnan(price)):
        return 1.0
    if price < 0:
        raise ValueError("price must be nonnegative")
    p = min(max(price, PRICE_FLOOR), clip)
    return p ** 2.3 / 1.3


@dataclass(frozen=True)
class TrainTask:
    target: UnitId
    # (product unit, price) pairs of the rest of the basket
    context_products: tuple[tuple[UnitId, Optional[float]], ...]
    # present only when the target is a product
    user: Optional[UnitId] = None

    def __post_init__(self):
        if not self.context_products and self.user is None:
            raise ValueError("a task needs a nonempty context")


def basket_tasks(basket: Basket) -> list[TrainTask]:
    """Product-recovery tasks in item order, then the user-recovery task."""
    user = UnitId.user(basket.user)
    items = [(UnitId.product(it.product), it.price) for it in basket.items]
    tasks = []
    for k, (unit, _) in enumerate(items):
        tasks.append(TrainTask(unit, tuple(items[:k] + items[k + 1:]), user))
    if items:
        tasks.append(TrainTask(user, tuple(items)))
    return tasks


def _weights(prices, hp: Hyperparameters) -> np.ndarray:
    if not hp.value_weighting:
        return np.ones(len(prices))
    return np.array([value_weight(p, hp.price_clip) for p in prices])


def context_vector(task: TrainTask, store: EmbeddingStore, hp: Hyperparameters = Hyperparameters()) -> np.ndarray:
    if task.context_products:
        w = _weights([p for _, p in task.context_products], hp)
        V = np.stack([store.vector(u) for u, _ in task.context_products])
        phat = (w[:, None] * V).sum(axis=0) / w.sum()
    if task.user is None:
        return phat
    vu = store.vector(task.user)
    if not task.context_products:
        return vu.copy()
    return 0.5 * (vu + phat)


class NoiseDistribution:
    """Per-kind unigram counts over store rows, sampled by binary search.

    ``uniform=True`` gives every seen unit the same mass.
    """

    def __init__(self, uniform: bool = False):
        self.uniform = uniform
        self._counts = {Kind.PRODUCT: {}, Kind.USER: {}}
        self._tables = {}

    def update(self, baskets: Sequence[Basket], store: EmbeddingStore) -> None:
        pc, uc = self._counts[Kind.PRODUCT], self._counts[Kind.USER]
        for b in baskets:
            r = store.index(UnitId.user(b.user))
            uc[r] = uc.get(r, 0) + 1
            for p in b.products:
                r = store.index(UnitId.product(p))
                pc[r] = pc.get(r, 0) + 1
        self._tables.clear()

    def add_counts(self, kind: Kind, rows, counts=None) -> None:
        c = self._counts[kind]
        counts = np.ones(len(rows)) if counts is None else counts
        for r, n in zip(rows, counts):
            c[int(r)] = c.get(int(r), 0) + n
        self._tables.clear()

    def table(self, kind: Kind) -> tuple[np.ndarray, np.ndarray]:
        """(cumulative mass, store rows) for ``kind``, rows ascending."""
        if kind not in self._tables:
            c = self._counts[kind]
            rows = np.array(sorted(c), dtype=np.int64)
            mass = np.ones(len(rows)) if self.uniform else np.array([c[r] for r in rows], dtype=np.float64)
            self._tables[kind] = (np.cumsum(mass), rows)
        return self._tables[kind]

    def probabilities(self, kind: Kind) -> dict[int, float]:
        cum, rows = self.table(kind)
        if not len(rows):
            return {}
        mass = np.diff(np.concatenate([[0.0], cum]))
        return dict(zip(rows.tolist(), (mass / cum[-1]).tolist()))

    def __len__(self):
        return sum(len(c) for c in self._counts.values())


def sample_negatives(kind: Kind, count: int, noise: NoiseDistribution, rng: np.random.Generator,
                     target: Optional[int] = None) -> list[int]:
    """Draw ``count`` store rows of ``kind`` i.i.d. from ``noise``, never ``target``.

    Exclusion draws from the table with the target's mass removed, which is
    what redrawing the target until it misses converges to. A table holding
    nothing but the target returns it.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    cum, rows = noise.table(kind)
    if not len(rows):
        raise ValueError(f"noise table for {kind.value} is empty")
    t = int(np.searchsorted(rows, target)) if target is not None else len(rows)
    if t < len(rows) and rows[t] == target:
        below = float(cum[t - 1]) if t > 0 else 0.0
        mass = float(cum[t]) - below
    else:
        t, below, mass = -1, 0.0, 0.0
    rest = float(cum[-1]) - mass
    out = []
    for _ in range(count):
        if rest <= 0.0:
            out.append(int(target))
            continue
        x = rng.random() * rest
        if t >= 0 and x >= below:
            x += mass
        i = min(int(np.searchsorted(cum, x, side="right")), len(rows) - 1)
        if i == t:
            i = t + 1 if t + 1 < len(rows) else t - 1
        out.append(int(rows[i]))
    return out


def task_loss_and_grads(task: TrainTask, negatives: Sequence[UnitId], store: EmbeddingStore,
                        hp: Hyperparameters = Hyperparameters()) -> tuple[float, dict[UnitId, np.ndarray]]:
    """Negative-sampling loss of one task and its gradient for every unit involved.

    Price weights are constants. Dot products are clamped to [-30, 30].
    """
    h = context_vector(task, store, hp)
    vz = store.vector(task.target)
    s = float(np.clip(vz @ h, -SIGMOID_CLAMP, SIGMOID_CLAMP))
    loss = math.log1p(math.exp(-s))
    cz = float(sigmoid(s)) - 1.0
    grads: dict[UnitId, np.ndarray] = {}

    def add(unit, g):
        grads[unit] = grads[unit] + g if unit in grads else g

    add(task.target, cz * h)
    gh = cz * vz
    for n in negatives:
        vn = store.vector(n)
        sn = float(np.clip(vn @ h, -SIGMOID_CLAMP, SIGMOID_CLAMP))
        loss += math.log1p(math.exp(sn))
        c = float(sigmoid(sn))
        add(n, c * h)
        gh = gh + c * vn

    ctx = task.context_products
    if ctx:
        w = _weights([p for _, p in ctx], hp)
        share = w / w.sum()
    if task.user is not None:
        if ctx:
            add(task.user, 0.5 * gh)
            share = 0.5 * share
        else:
            add(task.user, gh.copy())
    for (u, _), a in zip(ctx, share if ctx else ()):
        add(u, a * gh)
    return loss, grads


def intra_agreement(basket: Basket, store: EmbeddingStore) -> float:
    """Mean sigmoid of raw dot products over all unordered unit pairs of the basket."""
    rows = [store.index(UnitId.product(p)) for p in basket.products]
    rows.append(store.index(UnitId.user(basket.user)))
    if len(rows) < 2:
        log.warning("intra-agreement of a basket with %d unit(s) set to 0.5", len(rows))
        return 0.5
    V = store.vectors[rows]
    G = V @ V.T
    iu = np.triu_indices(len(rows), 1)
    return float(np.mean(sigmoid(G[iu])))


def adaptive_lr(psi: float, tau: float, eta: float) -> float:
    if tau < 0 or eta <= 0:
        raise ValueError("need tau >= 0 and eta > 0")
    return math.exp(-tau * psi) * eta


def apply_update(unit: UnitId, gradient: np.ndarray, lr: float, store: EmbeddingStore, eps: float = 1e-8) -> bool:
    """AdaGrad step; returns False (and leaves the unit alone) on a non-finite gradient."""
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        return False
    r = store.index(unit)
    store.accum_buffer[r] += g * g
    store.vector_buffer[r] -= lr / np.sqrt(store.accum_buffer[r] + eps) * g
    return True


@dataclass
class TrainReport:
    window: int
    tasks: int
    mean_loss: float
    units_initialized: int
    skipped_updates: int = 0
    baskets: int = 0

    def as_dict(self) -> dict:
        return {
            "window": self.window,
            "baskets": self.baskets,
            "tasks": self.tasks,
            "mean_loss": self.mean_loss,
            "units_initialized": self.units_initialized,
            "skipped_updates": self.skipped_updates,
        }


def encode_baskets(baskets: Sequence[Basket], store: EmbeddingStore, hp: Hyperparameters):
    """CSR arrays (ptr, product rows, weights, user rows) for the kernel."""
    ptr = np.zeros(len(baskets) + 1, dtype=np.int64)
    items, weights = [], []
    users = np.empty(len(baskets), dtype=np.int64)
    for i, b in enumerate(baskets):
        for it in b.items:
            items.append(store.index(UnitId.product(it.product)))
            weights.append(value_weight(it.price, hp.price_clip) if hp.value_weighting else 1.0)
        ptr[i + 1] = len(items)
        users[i] = store.index(UnitId.user(b.user))
    return ptr, np.array(items, dtype=np.int64), np.array(weights, dtype=np.float64), users


def init_units(baskets: Sequence[Basket], store: EmbeddingStore, rng: np.random.Generator) -> int:
    """Lazily add every unseen unit, users before their basket's products."""
    new = 0
    for b in baskets:
        new += store.ensure_all([UnitId.user(b.user)] + [UnitId.product(p) for p in b.products], rng)
    return new


def train_window(window: Window, store: EmbeddingStore, noise: NoiseDistribution, hp: Hyperparameters,
                 rng: np.random.Generator, init_rng: Optional[np.random.Generator] = None,
                 threads: int = 1, backend: Optional[str] = None) -> TrainReport:
    """Run ``hp.epochs`` shuffled passes over the window's baskets.

    The noise distribution absorbs the window's counts before training.
    ``threads > 1`` selects the lossy parallel mode (compiled backend only).
    """
    baskets = [b for b in window.baskets if b.items]
    if not baskets:
        return TrainReport(window.index, 0, 0.0, 0, baskets=0)
    new = init_units(baskets, store, init_rng if init_rng is not None else rng)
    noise.update(baskets, store)
    pcum, prows = noise.table(Kind.PRODUCT)
    ucum, urows = noise.table(Kind.USER)
    ptr, items, weights, users = encode_baskets(baskets, store, hp)

    kernel = kernels.get(backend)
    if threads > 1 and kernel is kernels.BACKENDS["python"]:
        log.warning("parallel mode needs the compiled kernel; training sequentially")
        threads = 1
    tasks, loss, skipped = 0, 0.0, 0
    for _ in range(hp.epochs):
        order = rng.permutation(len(baskets)).astype(np.int64)
        state = int(rng.integers(0, 2**63))
        t, l, s, _state = kernel.train_epoch(
            store.vector_buffer, store.accum_buffer, ptr, items, weights, users, order,
            pcum, prows, ucum, urows, hp.negatives, hp.tau, hp.eta, hp.eps, state, threads)
        tasks += t
        loss += l
        skipped += s
    store.step_count += tasks
    if skipped:
        log.warning("window %d: %d non-finite updates skipped", window.index, skipped)
    return TrainReport(window.index, tasks, loss / tasks if tasks else 0.0, new, skipped, len(baskets))


class OnlineTrainer:
    """Store, noise table and RNG streams carried across windows."""

    def __init__(self, hp: Hyperparameters, store: Optional[EmbeddingStore] = None,
                 init_seed: Optional[int] = None, train_seed: Optional[int] = None,
                 threads: int = 1, backend: Optional[str] = None):
        self.hp = hp
        self.store = store if store is not None else EmbeddingStore(hp.d)
        self.noise = NoiseDistribution(uniform=hp.noise == "uniform")
        self.init_rng = np.random.default_rng(hp.seed if init_seed is None else init_seed)
        self.rng = np.random.default_rng(hp.seed + 1 if train_seed is None else train_seed)
        self.threads = threads
        self.backend = backend
        self.reports: list[TrainReport] = []

    def train_window(self, window: Window) -> TrainReport:
        rep = train_window(window, self.store, self.noise, self.hp, self.rng, self.init_rng,
                           self.threads, self.backend)
        self.reports.append(rep)
        return rep

    def fit(self, windows: Sequence[Window]) -> list[TrainReport]:
        return [self.train_window(w) for w in windows]


def exact_recovery_probabilities(task: TrainTask, store: EmbeddingStore,
                                 hp: Hyperparameters = Hyperparameters()) -> dict[UnitId, float]:
    """Full softmax over every stored unit of the target's kind (small catalogs only)."""
    h = context_vector(task, store, hp)
    rows = store.kind_indices(task.target.kind)
    s = store.vectors[rows] @ h
    s = s - s.max()
    p = np.exp(s)
    p /= p.sum()
    units = store.units
    return {units[r]: float(q) for r, q in zip(rows, p)}
