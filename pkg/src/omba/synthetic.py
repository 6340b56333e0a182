"""Synthetic basket streams with known associations.

Used by the end-to-end checks: planted product pairs co-occur at a fixed
rate, background products are drawn independently of each other (from a
skewed global popularity, or from a small per-user pool), and optional
scenario knobs swap planted pairs mid-stream or add rare expensive pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ingest import SECONDS_PER_DAY, window_stream
from .model import Basket, Item, Window


@dataclass(frozen=True)
class StreamConfig:
    n_products: int = 1000
    n_users: int = 200
    n_baskets: int = 20000
    n_windows: int = 30
    n_pairs: int = 50
    pair_rate: tuple[float, float] = (0.012, 0.02)
    background_mean: float = 3.0
    popularity_exponent: float = 0.8
    user_pool_size: int = 15
    user_pool_prob: float = 0.5
    # swap `swap_fraction` of the planted pairs for fresh ones from this window on
    swap_window: Optional[int] = None
    swap_fraction: float = 0.5
    n_rare_pairs: int = 0
    rare_rate: float = 0.003
    rare_price: tuple[float, float] = (8.0, 20.0)
    seed: int = 0


@dataclass
class SyntheticStream:
    config: StreamConfig
    baskets: list[Basket]
    windows: list[Window]
    planted: list[tuple[str, str]]
    new_pairs: list[tuple[str, str]] = field(default_factory=list)
    retired: list[tuple[str, str]] = field(default_factory=list)
    rare_pairs: list[tuple[str, str]] = field(default_factory=list)
    prices: dict[str, float] = field(default_factory=dict)


def _pid(i: int) -> str:
    return f"p{i:04d}"


def _key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def planted_stream(cfg: StreamConfig = StreamConfig()) -> SyntheticStream:
    rng = np.random.default_rng(cfg.seed)
    n_rare = 2 * cfg.n_rare_pairs
    n_pair_products = 2 * cfg.n_pairs
    n_background = cfg.n_products - n_pair_products - n_rare
    if n_background < 2 * cfg.n_pairs:
        raise ValueError("catalog too small for the requested pairs")

    perm = rng.permutation(cfg.n_products)
    pair_ids = perm[:n_pair_products]
    rare_ids = perm[n_pair_products:n_pair_products + n_rare]
    background = perm[n_pair_products + n_rare:]

    prices = np.exp(rng.uniform(np.log(0.5), np.log(5.0), cfg.n_products))
    prices[rare_ids] = rng.uniform(*cfg.rare_price, n_rare)

    planted = [(int(pair_ids[2 * i]), int(pair_ids[2 * i + 1])) for i in range(cfg.n_pairs)]
    rates = rng.uniform(*cfg.pair_rate, cfg.n_pairs)
    rare = [(int(rare_ids[2 * i]), int(rare_ids[2 * i + 1])) for i in range(cfg.n_rare_pairs)]

    pop = 1.0 / np.arange(1, n_background + 1) ** cfg.popularity_exponent
    pop = pop[rng.permutation(n_background)]
    pop /= pop.sum()
    pools = [rng.choice(background, cfg.user_pool_size, replace=False) for _ in range(cfg.n_users)]

    new_pairs, retired = [], []
    if cfg.swap_window is not None:
        n_swap = int(round(cfg.swap_fraction * cfg.n_pairs))
        retired = planted[:n_swap]
        fresh = rng.choice(background, 2 * n_swap, replace=False)
        new_pairs = [(int(fresh[2 * i]), int(fresh[2 * i + 1])) for i in range(n_swap)]
        fresh_set = set(fresh.tolist())
        # products that became pair members stop appearing as background
        keep = np.array([b not in fresh_set for b in background])
        background_after = background[keep]
        pop_after = pop[keep] / pop[keep].sum()
        pools_after = [np.array([p for p in pool if p not in fresh_set]) for pool in pools]

    per_window = np.full(cfg.n_windows, cfg.n_baskets // cfg.n_windows)
    per_window[: cfg.n_baskets % cfg.n_windows] += 1
    baskets = []
    serial = 0
    for w in range(cfg.n_windows):
        swapped = cfg.swap_window is not None and w >= cfg.swap_window
        active = list(zip(planted, rates))
        bg, bg_pop, user_pools = background, pop, pools
        singles = []
        if swapped:
            active = list(zip(new_pairs, rates[: len(new_pairs)])) + active[len(retired):]
            # retired products keep selling, each on its own
            singles = [(p, r) for pair, r in zip(retired, rates) for p in pair]
            bg, bg_pop, user_pools = background_after, pop_after, pools_after
        pair_list = [pr for pr, _ in active]
        pair_rates = np.array([r for _, r in active])
        single_list = [p for p, _ in singles]
        single_rates = np.array([r for _, r in singles])
        bg_cum = np.cumsum(bg_pop)
        times = np.sort(rng.uniform(0, SECONDS_PER_DAY, per_window[w])) + w * SECONDS_PER_DAY
        for t in times:
            user = int(rng.integers(cfg.n_users))
            prods: list[int] = []
            for i in np.flatnonzero(rng.random(len(pair_list)) < pair_rates):
                prods += pair_list[i]
            if single_list:
                prods += [single_list[i] for i in np.flatnonzero(rng.random(len(single_list)) < single_rates)]
            if rare:
                for i in np.flatnonzero(rng.random(len(rare)) < cfg.rare_rate):
                    prods += rare[i]
            k = rng.poisson(cfg.background_mean)
            if not prods and k == 0:
                k = 1
            pool = user_pools[user]
            for _ in range(k):
                if len(pool) and rng.random() < cfg.user_pool_prob:
                    prods.append(int(pool[rng.integers(len(pool))]))
                else:
                    j = min(int(np.searchsorted(bg_cum, rng.random() * bg_cum[-1], side="right")), len(bg) - 1)
                    prods.append(int(bg[j]))
            seen = dict.fromkeys(prods)
            items = tuple(Item(_pid(p), round(float(prices[p]), 2)) for p in seen)
            baskets.append(Basket(float(t), f"u{user:03d}", items, f"b{serial:06d}"))
            serial += 1

    def named(pairs):
        return [_key(_pid(a), _pid(b)) for a, b in pairs]

    return SyntheticStream(
        config=cfg,
        baskets=baskets,
        windows=window_stream(baskets),
        planted=named(planted),
        new_pairs=named(new_pairs),
        retired=named(retired),
        rare_pairs=named(rare),
        prices={_pid(i): round(float(prices[i]), 2) for i in range(cfg.n_products)},
    )


def repetition_corpus(n_users: int = 50, baskets_per_user: int = 20, n_products: int = 500,
                      pool_size: int = 10, basket_size: int = 4, private: bool = True,
                      seed: int = 0) -> list[Basket]:
    """Baskets for the user-repetition test.

    ``private=True``: each user buys only from their own ``pool_size`` products.
    ``private=False``: every basket is drawn from one shared distribution, so
    users are exchangeable.
    """
    rng = np.random.default_rng(seed)
    pools = [rng.choice(n_products, pool_size, replace=False) for _ in range(n_users)]
    out = []
    t = 0.0
    for u in range(n_users):
        for _ in range(baskets_per_user):
            source = pools[u] if private else np.arange(n_products)
            size = min(basket_size, len(source))
            prods = rng.choice(source, size, replace=False)
            out.append(Basket(t, f"u{u:03d}", tuple(Item(_pid(int(p)), 1.0) for p in prods), f"b{len(out):06d}"))
            t += 60.0
    return out
