# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled window-training kernel; see ``_kernel_py.py`` for the reference."""

from cython.parallel cimport prange, threadid
from libc.math cimport exp, log1p, sqrt, isfinite
from libc.stdlib cimport malloc, free
from libc.stdint cimport uint64_t, int64_t

import numpy as np

cdef double CLAMP = 30.0


cdef inline uint64_t _splitmix(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] += 0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline int64_t _draw(uint64_t* state, const double* cum, const int64_t* units,
                          Py_ssize_t n) noexcept nogil:
    cdef uint64_t z = _splitmix(state)
    cdef double u = <double>(z >> 11) * (1.0 / 9007199254740992.0)
    cdef double x = u * cum[n - 1]
    cdef Py_ssize_t lo = 0, hi = n, mid
    # first index with cum > x
    while lo < hi:
        mid = (lo + hi) >> 1
        if cum[mid] > x:
            hi = mid
        else:
            lo = mid + 1
    if lo >= n:
        lo = n - 1
    return units[lo]


cdef inline int64_t _draw_excluding(uint64_t* state, const double* cum, const int64_t* units,
                                    Py_ssize_t n, int64_t target) noexcept nogil:
    # exact draw from the table with the target's mass removed
    cdef Py_ssize_t lo = 0, hi = n, mid, t
    cdef double below, mass, x
    cdef uint64_t z
    while lo < hi:
        mid = (lo + hi) >> 1
        if units[mid] < target:
            lo = mid + 1
        else:
            hi = mid
    if lo >= n or units[lo] != target:
        return _draw(state, cum, units, n)
    t = lo
    below = cum[t - 1] if t > 0 else 0.0
    mass = cum[t] - below
    z = _splitmix(state)
    if cum[n - 1] - mass <= 0.0:
        return target
    x = <double>(z >> 11) * (1.0 / 9007199254740992.0) * (cum[n - 1] - mass)
    if x >= below:
        x += mass
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) >> 1
        if cum[mid] > x:
            hi = mid
        else:
            lo = mid + 1
    if lo >= n:
        lo = n - 1
    if lo == t:
        lo = t + 1 if t + 1 < n else t - 1
    return units[lo]


cdef inline double _sigmoid(double s) noexcept nogil:
    cdef double e
    if s >= 0:
        return 1.0 / (1.0 + exp(-s))
    e = exp(s)
    return e / (1.0 + e)


cdef inline double _clamp(double s) noexcept nogil:
    if s > CLAMP:
        return CLAMP
    if s < -CLAMP:
        return -CLAMP
    return s


cdef inline double _dot(const double* a, const double* b, Py_ssize_t d) noexcept nogil:
    cdef double t = 0.0
    cdef Py_ssize_t i, k
    for i in range(d):
        t += a[i] * b[i]
    return t


cdef inline Py_ssize_t _slot(int64_t row, int64_t* touched, Py_ssize_t* n_touched,
                             double* grads, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, k
    for i in range(n_touched[0]):
        if touched[i] == row:
            return i
    i = n_touched[0]
    touched[i] = row
    n_touched[0] = i + 1
    for k in range(d):
        grads[i * d + k] = 0.0
    return i


cdef double _task(double* vec, double* acc, Py_ssize_t d,
                  int64_t target, int64_t user,
                  const int64_t* ctx, const double* w, Py_ssize_t n_ctx,
                  const double* cum, const int64_t* units, Py_ssize_t n_units,
                  int n_neg, double lr, double eps, uint64_t* state,
                  double* h, double* gh, double* grads, int64_t* touched, int64_t* negs,
                  double* coefs, int64_t* skipped) noexcept nogil:
    cdef Py_ssize_t i, k, j, slot, n_touched = 0
    cdef double wsum = 0.0, s, cz, loss, c, scale, g, a
    cdef int64_t n, row
    cdef double* v
    cdef bint ok

    # context vector
    if n_ctx > 0:
        for k in range(d):
            gh[k] = 0.0
        for i in range(n_ctx):
            wsum += w[i]
        for i in range(n_ctx):
            v = vec + ctx[i] * d
            for k in range(d):
                gh[k] += w[i] * v[k]
        for k in range(d):
            gh[k] /= wsum
    if user >= 0:
        v = vec + user * d
        if n_ctx > 0:
            for k in range(d):
                h[k] = 0.5 * (v[k] + gh[k])
        else:
            for k in range(d):
                h[k] = v[k]
    else:
        for k in range(d):
            h[k] = gh[k]

    for j in range(n_neg):
        negs[j] = _draw_excluding(state, cum, units, n_units, target)

    s = _clamp(_dot(vec + target * d, h, d))
    loss = log1p(exp(-s))
    cz = _sigmoid(s) - 1.0
    v = vec + target * d
    for k in range(d):
        gh[k] = cz * v[k]
    for j in range(n_neg):
        v = vec + negs[j] * d
        s = _clamp(_dot(v, h, d))
        loss += log1p(exp(s))
        c = _sigmoid(s)
        coefs[j] = c
        for k in range(d):
            gh[k] += c * v[k]

    slot = _slot(target, touched, &n_touched, grads, d)
    for k in range(d):
        grads[slot * d + k] += cz * h[k]
    for j in range(n_neg):
        slot = _slot(negs[j], touched, &n_touched, grads, d)
        for k in range(d):
            grads[slot * d + k] += coefs[j] * h[k]
    if user >= 0:
        slot = _slot(user, touched, &n_touched, grads, d)
        scale = 0.5 if n_ctx > 0 else 1.0
        for k in range(d):
            grads[slot * d + k] += scale * gh[k]
        for i in range(n_ctx):
            slot = _slot(ctx[i], touched, &n_touched, grads, d)
            scale = 0.5 * w[i] / wsum
            for k in range(d):
                grads[slot * d + k] += scale * gh[k]
    else:
        for i in range(n_ctx):
            slot = _slot(ctx[i], touched, &n_touched, grads, d)
            scale = w[i] / wsum
            for k in range(d):
                grads[slot * d + k] += scale * gh[k]

    for i in range(n_touched):
        row = touched[i]
        ok = True
        for k in range(d):
            if not isfinite(grads[i * d + k]):
                ok = False
                break
        if not ok:
            skipped[0] += 1
            continue
        for k in range(d):
            g = grads[i * d + k]
            a = acc[row * d + k] + g * g
            acc[row * d + k] = a
            vec[row * d + k] -= lr / sqrt(a + eps) * g
    return loss


cdef double _basket(double* vec, double* acc, Py_ssize_t d,
                    const int64_t* prods, const double* w, Py_ssize_t m, int64_t user,
                    const double* pcum, const int64_t* punits, Py_ssize_t np_,
                    const double* ucum, const int64_t* uunits, Py_ssize_t nu,
                    int n_neg, double tau, double eta, double eps, uint64_t* state,
                    double* scratch, int64_t* iscratch, int64_t* tasks,
                    int64_t* skipped) noexcept nogil:
    cdef Py_ssize_t i, j, k, q, T = 2 + n_neg + m
    cdef double psi = 0.0, lr, loss = 0.0
    cdef double* h = scratch
    cdef double* gh = scratch + d
    cdef double* coefs = scratch + 2 * d
    cdef double* cw = coefs + n_neg
    cdef double* grads = cw + m
    cdef int64_t* touched = iscratch
    cdef int64_t* negs = iscratch + T
    cdef int64_t* ctx = negs + n_neg
    cdef int64_t ri, rj

    # intra-agreement over products plus the user
    for i in range(m + 1):
        ri = prods[i] if i < m else user
        for j in range(i + 1, m + 1):
            rj = prods[j] if j < m else user
            psi += _sigmoid(_dot(vec + ri * d, vec + rj * d, d))
    psi /= (m + 1) * m / 2.0
    lr = exp(-tau * psi) * eta

    for k in range(m):
        q = 0
        for i in range(m):
            if i != k:
                ctx[q] = prods[i]
                cw[q] = w[i]
                q += 1
        loss += _task(vec, acc, d, prods[k], user, ctx, cw, m - 1, pcum, punits, np_,
                      n_neg, lr, eps, state, h, gh, grads, touched, negs, coefs, skipped)
        tasks[0] += 1
    loss += _task(vec, acc, d, user, -1, prods, w, m, ucum, uunits, nu,
                  n_neg, lr, eps, state, h, gh, grads, touched, negs, coefs, skipped)
    tasks[0] += 1
    return loss


def train_epoch(double[:, ::1] vec, double[:, ::1] acc,
                const int64_t[::1] ptr, const int64_t[::1] items, const double[::1] weights,
                const int64_t[::1] users, const int64_t[::1] order,
                const double[::1] prod_cum, const int64_t[::1] prod_units,
                const double[::1] user_cum, const int64_t[::1] user_units,
                int n_neg, double tau, double eta, double eps, rng_state, int n_threads=1):
    """Visit baskets in ``order`` once; returns (tasks, loss_sum, skipped, rng_state).

    ``n_threads > 1`` runs baskets concurrently with unsynchronized updates;
    results are then not reproducible.
    """
    cdef Py_ssize_t d = vec.shape[1], nb = order.shape[0], m_max = 0, b, i, t
    cdef Py_ssize_t np_ = prod_cum.shape[0], nu = user_cum.shape[0]
    cdef uint64_t state = <uint64_t>(int(rng_state) & 0xFFFFFFFFFFFFFFFF)
    cdef int64_t tasks = 0, skipped = 0
    cdef double loss = 0.0
    cdef Py_ssize_t fsize, isize
    cdef double* scratch
    cdef int64_t* iscratch
    cdef uint64_t* states
    cdef int64_t* ttasks
    cdef int64_t* tskip
    cdef double* tloss
    cdef int nt = n_threads if n_threads > 1 else 1
    cdef Py_ssize_t bb, lo, hi, tid

    if nb == 0:
        return 0, 0.0, 0, int(state)
    if np_ == 0 or nu == 0:
        raise ValueError("noise tables must be nonempty")
    for i in range(ptr.shape[0] - 1):
        if ptr[i + 1] - ptr[i] > m_max:
            m_max = ptr[i + 1] - ptr[i]
    fsize = 2 * d + n_neg + m_max + (2 + n_neg + m_max) * d
    isize = (2 + n_neg + m_max) + n_neg + m_max

    scratch = <double*> malloc(nt * fsize * sizeof(double))
    iscratch = <int64_t*> malloc(nt * isize * sizeof(int64_t))
    states = <uint64_t*> malloc(nt * sizeof(uint64_t))
    ttasks = <int64_t*> malloc(nt * sizeof(int64_t))
    tskip = <int64_t*> malloc(nt * sizeof(int64_t))
    tloss = <double*> malloc(nt * sizeof(double))
    if not scratch or not iscratch or not states or not ttasks or not tskip or not tloss:
        free(scratch); free(iscratch); free(states); free(ttasks); free(tskip); free(tloss)
        raise MemoryError()
    try:
        if nt == 1:
            with nogil:
                for i in range(nb):
                    b = order[i]
                    lo = ptr[b]
                    hi = ptr[b + 1]
                    if hi == lo:
                        continue
                    loss += _basket(&vec[0, 0], &acc[0, 0], d, &items[lo], &weights[lo], hi - lo,
                                    users[b], &prod_cum[0], &prod_units[0], np_,
                                    &user_cum[0], &user_units[0], nu, n_neg, tau, eta, eps,
                                    &state, scratch, iscratch, &tasks, &skipped)
        else:
            for t in range(nt):
                states[t] = state + <uint64_t>(t + 1) * 0xD1B54A32D192ED03ULL
                ttasks[t] = 0
                tskip[t] = 0
                tloss[t] = 0.0
            _splitmix(&state)
            for bb in prange(nb, nogil=True, num_threads=nt, schedule="dynamic", chunksize=16):
                tid = threadid()
                b = order[bb]
                lo = ptr[b]
                hi = ptr[b + 1]
                if hi > lo:
                    tloss[tid] += _basket(&vec[0, 0], &acc[0, 0], d, &items[lo], &weights[lo], hi - lo,
                                          users[b], &prod_cum[0], &prod_units[0], np_,
                                          &user_cum[0], &user_units[0], nu, n_neg, tau, eta, eps,
                                          &states[tid], scratch + tid * fsize, iscratch + tid * isize,
                                          &ttasks[tid], &tskip[tid])
            for t in range(nt):
                tasks += ttasks[t]
                skipped += tskip[t]
                loss += tloss[t]
    finally:
        free(scratch); free(iscratch); free(states); free(ttasks); free(tskip); free(tloss)
    return tasks, loss, skipped, int(state)


def draw_uniforms(rng_state, Py_ssize_t n):
    """Testing helper: ``n`` consecutive uniforms and the advanced state."""
    cdef uint64_t state = <uint64_t>(int(rng_state) & 0xFFFFFFFFFFFFFFFF)
    out = np.empty(n)
    cdef double[::1] o = out
    cdef Py_ssize_t i, k
    for i in range(n):
        o[i] = <double>(_splitmix(&state) >> 11) * (1.0 / 9007199254740992.0)
    return out, int(state)
