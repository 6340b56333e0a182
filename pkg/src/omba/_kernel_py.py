"""Pure-Python window-training kernel.

Mirrors ``_kernel.pyx`` operation for operation, including the splitmix64
stream used for negative draws, so both backends train the same model.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
CLAMP = 30.0


def splitmix64(state):
    """Advance ``state``; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def draw(state, cum, units):
    """One draw from a cumulative-count table; returns (new_state, unit)."""
    state, z = splitmix64(state)
    u = (z >> 11) * (1.0 / 9007199254740992.0)
    x = u * cum[-1]
    i = int(np.searchsorted(cum, x, side="right"))
    if i >= len(cum):
        i = len(cum) - 1
    return state, int(units[i])


def draw_excluding(state, cum, units, target):
    """Exact draw with ``target``'s mass removed (the limit of redrawing it forever).

    ``units`` must be ascending. A table holding only the target returns it.
    """
    t = int(np.searchsorted(units, target))
    if t >= len(units) or units[t] != target:
        return draw(state, cum, units)
    below = float(cum[t - 1]) if t > 0 else 0.0
    mass = float(cum[t]) - below
    state, z = splitmix64(state)
    rest = float(cum[-1]) - mass
    if rest <= 0.0:
        return state, int(target)
    x = (z >> 11) * (1.0 / 9007199254740992.0) * rest
    if x >= below:
        x += mass
    i = min(int(np.searchsorted(cum, x, side="right")), len(cum) - 1)
    if i == t:
        i = t + 1 if t + 1 < len(cum) else t - 1
    return state, int(units[i])


def sigmoid(s):
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def _clamp(s):
    return CLAMP if s > CLAMP else (-CLAMP if s < -CLAMP else s)


def intra_agreement(vec, rows):
    n = len(rows)
    if n < 2:
        return 0.5
    total = 0.0
    for i in range(n):
        vi = vec[rows[i]]
        for j in range(i + 1, n):
            total += sigmoid(float(vi @ vec[rows[j]]))
    return total / (n * (n - 1) / 2)


def _task(vec, acc, target, user, ctx, w, neg_cum, neg_units, n_neg, lr, eps, state):
    """One recovery task with immediate AdaGrad updates.

    ``user`` is the user row for product targets (-1 for user targets);
    ``ctx``/``w`` are the context product rows and weights.
    """
    if len(ctx):
        wsum = float(np.sum(w))
        phat = (w[:, None] * vec[ctx]).sum(axis=0) / wsum
    if user >= 0:
        h = 0.5 * (vec[user] + phat) if len(ctx) else vec[user].copy()
    else:
        h = phat

    negs = []
    for _ in range(n_neg):
        state, n = draw_excluding(state, neg_cum, neg_units, target)
        negs.append(n)

    s = _clamp(float(vec[target] @ h))
    loss = math.log1p(math.exp(-s))
    cz = sigmoid(s) - 1.0
    gh = cz * vec[target]
    coefs = []
    for n in negs:
        s = _clamp(float(vec[n] @ h))
        loss += math.log1p(math.exp(s))
        c = sigmoid(s)
        coefs.append(c)
        gh = gh + c * vec[n]

    grads = {target: cz * h}
    order = [target]

    def add(row, g):
        if row in grads:
            grads[row] = grads[row] + g
        else:
            grads[row] = g
            order.append(row)

    for n, c in zip(negs, coefs):
        add(n, c * h)
    if user >= 0:
        if len(ctx):
            add(user, 0.5 * gh)
            for x, wx in zip(ctx, w):
                add(int(x), (0.5 * wx / wsum) * gh)
        else:
            add(user, gh.copy())
    else:
        for x, wx in zip(ctx, w):
            add(int(x), (wx / wsum) * gh)

    skipped = 0
    for row in order:
        g = grads[row]
        if not np.all(np.isfinite(g)):
            skipped += 1
            continue
        acc[row] += g * g
        vec[row] -= lr / np.sqrt(acc[row] + eps) * g
    return loss, skipped, state


def train_epoch(vec, acc, ptr, items, weights, users, order,
                prod_cum, prod_units, user_cum, user_units,
                n_neg, tau, eta, eps, rng_state, n_threads=1):
    """Visit baskets in ``order`` once; returns (tasks, loss_sum, skipped, rng_state).

    Baskets are CSR-encoded: products of basket b are ``items[ptr[b]:ptr[b+1]]``
    with context weights ``weights[...]``; ``users[b]`` is the user row.
    ``n_threads`` is accepted for signature parity and ignored.
    """
    state = int(rng_state) & MASK64
    tasks = 0
    loss_sum = 0.0
    skipped = 0
    for b in order:
        lo, hi = int(ptr[b]), int(ptr[b + 1])
        prods = items[lo:hi]
        w = weights[lo:hi]
        m = hi - lo
        if m == 0:
            continue
        user = int(users[b])
        psi = intra_agreement(vec, list(prods) + [user])
        lr = math.exp(-tau * psi) * eta
        for k in range(m):
            keep = np.arange(m) != k
            loss, sk, state = _task(vec, acc, int(prods[k]), user, prods[keep], w[keep],
                                    prod_cum, prod_units, n_neg, lr, eps, state)
            loss_sum += loss
            skipped += sk
            tasks += 1
        loss, sk, state = _task(vec, acc, user, -1, prods, w,
                                user_cum, user_units, n_neg, lr, eps, state)
        loss_sum += loss
        skipped += sk
        tasks += 1
    return tasks, loss_sum, skipped, state


def draw_uniforms(rng_state, n):
    """Testing helper: ``n`` consecutive uniforms and the advanced state."""
    state = int(rng_state) & MASK64
    out = np.empty(n)
    for i in range(n):
        state, z = splitmix64(state)
        out[i] = (z >> 11) * (1.0 / 9007199254740992.0)
    return out, state
