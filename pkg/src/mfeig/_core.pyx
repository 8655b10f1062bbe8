# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: Philox4x32-10 draws and nested log-evidence loops.

Mirrors ``_pycore`` function for function.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, sqrt, pow, fabs, fmin, fmax, INFINITY
from libc.stdint cimport uint32_t, uint64_t, int64_t
from libc.stdlib cimport malloc, free
from scipy.special.cython_special cimport ndtri

cnp.import_array()

cdef extern from "_fastmath.h":
    double mfeig_fast_exp(double x) noexcept nogil
    double mfeig_fast_log(double x) noexcept nogil
    double mfeig_table_exp(double x) noexcept nogil
    void mfeig_sort_unit(double* u, Py_ssize_t n, double* tmp, Py_ssize_t* bucket) noexcept nogil

# terms more than this far below the running maximum contribute < 1e-26
# relative to the sum and are skipped
cdef double LSE_CUTOFF = 60.0
cdef double LOG_2PI = 1.8378770664093453
cdef enum:
    LANES = 4


cdef inline void philox_lanes(uint32_t key0, uint32_t key1, uint64_t block0, uint64_t row,
                              uint32_t* out) noexcept nogil:
    # LANES consecutive blocks computed in lockstep; out holds 4 words per lane
    cdef uint32_t c0[LANES]
    cdef uint32_t c1[LANES]
    cdef uint32_t c2[LANES]
    cdef uint32_t c3[LANES]
    cdef uint64_t p0, p1
    cdef uint32_t k0 = key0, k1 = key1
    cdef int r, l
    cdef uint64_t blk
    for l in range(LANES):
        blk = block0 + l
        c0[l] = <uint32_t>(blk & 0xFFFFFFFFu)
        c1[l] = <uint32_t>(blk >> 32)
        c2[l] = <uint32_t>(row & 0xFFFFFFFFu)
        c3[l] = <uint32_t>(row >> 32)
    for r in range(10):
        if r:
            k0 += 0x9E3779B9u
            k1 += 0xBB67AE85u
        for l in range(LANES):
            p0 = <uint64_t>0xD2511F53u * c0[l]
            p1 = <uint64_t>0xCD9E8D57u * c2[l]
            c0[l] = <uint32_t>(p1 >> 32) ^ c1[l] ^ k0
            c1[l] = <uint32_t>p1
            c2[l] = <uint32_t>(p0 >> 32) ^ c3[l] ^ k1
            c3[l] = <uint32_t>p0
    for l in range(LANES):
        out[4 * l] = c0[l]
        out[4 * l + 1] = c1[l]
        out[4 * l + 2] = c2[l]
        out[4 * l + 3] = c3[l]


cdef inline double open_unit(uint32_t hi, uint32_t lo) noexcept nogil:
    cdef uint64_t bits = (<uint64_t>(hi >> 5)) * 67108864u + (lo >> 6)
    return (<double>bits + 0.5) / 9007199254740992.0


cdef void fill_uniforms(uint32_t k0, uint32_t k1, uint64_t row, Py_ssize_t col0,
                        Py_ssize_t n, double* out) noexcept nogil:
    # uniform for column c comes from block c // 2, words (0, 1) or (2, 3)
    cdef uint32_t w[4 * LANES]
    cdef Py_ssize_t c = col0, end = col0 + n, blk, col, h
    cdef int l
    while c < end:
        blk = c // 2
        philox_lanes(k0, k1, <uint64_t>blk, row, w)
        for l in range(LANES):
            for h in range(2):
                col = 2 * (blk + l) + h
                if col >= c and col < end:
                    out[col - col0] = open_unit(w[4 * l + 2 * h], w[4 * l + 2 * h + 1])
        c = 2 * (blk + LANES)


cdef inline double fast_pow(double x, double p) noexcept nogil:
    if p == 1.0:
        return x
    if p == 2.0:
        return x * x
    if p == 3.0:
        return x * x * x
    if p == 0.5:
        return sqrt(x)
    if p == 2.5:
        return x * x * sqrt(x)
    if p == 1.5:
        return x * sqrt(x)
    if p == 4.0:
        return (x * x) * (x * x)
    return pow(x, p)


cdef inline (uint32_t, uint32_t) _key(key):
    return <uint32_t>(int(key[0]) & 0xFFFFFFFF), <uint32_t>(int(key[1]) & 0xFFFFFFFF)


def philox4x32(key, counters):
    cdef cnp.uint64_t[:, :] c = np.ascontiguousarray(counters, dtype=np.uint64)
    cdef Py_ssize_t n = c.shape[0], i
    out = np.empty((n, 4), dtype=np.uint64)
    cdef cnp.uint64_t[:, :] o = out
    cdef uint32_t w[4 * LANES]
    cdef uint32_t k0, k1
    k0, k1 = _key(key)
    cdef uint64_t blk, row
    for i in range(n):
        blk = (c[i, 0] & 0xFFFFFFFFu) | ((c[i, 1] & 0xFFFFFFFFu) << 32)
        row = (c[i, 2] & 0xFFFFFFFFu) | ((c[i, 3] & 0xFFFFFFFFu) << 32)
        philox_lanes(k0, k1, blk, row, w)
        o[i, 0] = w[0]
        o[i, 1] = w[1]
        o[i, 2] = w[2]
        o[i, 3] = w[3]
    return out


def philox_uniforms(key, rows, Py_ssize_t ncols, Py_ssize_t col0=0):
    cdef cnp.int64_t[:] r = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    cdef Py_ssize_t n = r.shape[0], i
    out = np.empty((n, ncols))
    cdef double[:, ::1] o = out
    cdef uint32_t k0, k1
    k0, k1 = _key(key)
    if n == 0 or ncols == 0:
        return out
    with nogil:
        for i in range(n):
            fill_uniforms(k0, k1, <uint64_t>r[i], col0, ncols, &o[i, 0])
    return out


def philox_normals(key, rows, Py_ssize_t ncols, Py_ssize_t col0=0):
    out = philox_uniforms(key, rows, ncols, col0)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(o.shape[0]):
            for j in range(o.shape[1]):
                o[i, j] = ndtri(o[i, j])
    return out


cdef void fill_prior(uint32_t k0, uint32_t k1, uint64_t row, Py_ssize_t n_draws,
                     Py_ssize_t nt, const int* kinds, const double* a, const double* b,
                     double* th, double* tmp=NULL, Py_ssize_t* bucket=NULL) noexcept nogil:
    # with tmp given (nt == 1 only) the draws come out sorted ascending
    cdef Py_ssize_t j, k, col
    fill_uniforms(k0, k1, row, 0, n_draws * nt, th)
    if tmp != NULL:
        mfeig_sort_unit(th, n_draws, tmp, bucket)
    for k in range(nt):
        if kinds[k] == 1:
            for j in range(n_draws):
                col = j * nt + k
                th[col] = a[k] + b[k] * ndtri(th[col])
        else:
            for j in range(n_draws):
                col = j * nt + k
                th[col] = a[k] + (b[k] - a[k]) * th[col]


def prior_draws(key, rows, Py_ssize_t n_draws, kinds, a, b):
    cdef cnp.int64_t[:] r = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    cdef int[:] kd = np.ascontiguousarray(kinds, dtype=np.intc)
    cdef double[:] av = np.ascontiguousarray(a, dtype=float)
    cdef double[:] bv = np.ascontiguousarray(b, dtype=float)
    cdef Py_ssize_t n = r.shape[0], nt = kd.shape[0], i
    out = np.empty((n, n_draws, nt))
    cdef double[:, :, ::1] o = out
    cdef uint32_t k0, k1
    k0, k1 = _key(key)
    if n == 0 or n_draws == 0 or nt == 0:
        return out
    with nogil:
        for i in range(n):
            fill_prior(k0, k1, <uint64_t>r[i], n_draws, nt, &kd[0], &av[0], &bv[0], &o[i, 0, 0])
    return out


cdef void fill_features(const double* th, Py_ssize_t N, Py_ssize_t nt, const double* p,
                        Py_ssize_t F, double* phi) noexcept nogil:
    # phi is feature-major: phi[f * N + j]
    cdef Py_ssize_t j, f, k
    cdef double e
    for f in range(F):
        for j in range(N):
            phi[f * N + j] = 1.0
        for k in range(nt):
            e = p[f * nt + k]
            if e != 0.0:
                for j in range(N):
                    phi[f * N + j] *= fast_pow(th[j * nt + k], e)


def monomial_features(theta, exponents):
    th = np.ascontiguousarray(theta, dtype=float)
    nd = th.ndim
    lead = th.shape[:nd - 1]
    cdef double[:, ::1] t = th.reshape(-1, th.shape[nd - 1])
    cdef double[:, ::1] p = np.ascontiguousarray(exponents, dtype=float)
    cdef Py_ssize_t n = t.shape[0], nt = t.shape[1], F = p.shape[0], f, j
    out = np.empty((n, F))
    cdef double[:, ::1] o = out
    if n == 0 or F == 0:
        return out.reshape(lead + (F,))
    cdef double* phi = <double*>malloc(n * F * sizeof(double))
    try:
        with nogil:
            fill_features(&t[0, 0], n, nt, &p[0, 0], F, phi)
            for f in range(F):
                for j in range(n):
                    o[j, f] = phi[f * n + j]
    finally:
        free(phi)
    return out.reshape(lead + (F,))


cdef int lse_segments(const double* terms, Py_ssize_t N, const int64_t* cps, Py_ssize_t K,
                      double* buf, double* out) noexcept nogil:
    # log-mean-exp over each checkpoint prefix. A segment's maximum is found
    # first; terms within LSE_CUTOFF of the running maximum are compacted
    # into buf and only those are exponentiated. Reductions use four
    # independent accumulators to break the dependency chain.
    cdef double run = -INFINITY, s = 0.0, seg, v, thr
    cdef double m0, m1, m2, m3, z0, z1, z2, z3, v0, v1, v2, v3, s0, s1, s2, s3
    cdef Py_ssize_t start = 0, end, j, c, cnt
    for c in range(K):
        end = cps[c]
        m0 = m1 = m2 = m3 = -INFINITY
        z0 = z1 = z2 = z3 = 0.0
        j = start
        while j + 4 <= end:
            v0 = terms[j]
            v1 = terms[j + 1]
            v2 = terms[j + 2]
            v3 = terms[j + 3]
            m0 = v0 if v0 > m0 else m0
            m1 = v1 if v1 > m1 else m1
            m2 = v2 if v2 > m2 else m2
            m3 = v3 if v3 > m3 else m3
            z0 += v0 * 0.0
            z1 += v1 * 0.0
            z2 += v2 * 0.0
            z3 += v3 * 0.0
            j += 4
        while j < end:
            v0 = terms[j]
            m0 = v0 if v0 > m0 else m0
            z0 += v0 * 0.0
            j += 1
        # any nan or inf term leaves a nan in the check sums
        if z0 + z1 + z2 + z3 != 0.0:
            return 1
        m0 = m0 if m0 > m1 else m1
        m2 = m2 if m2 > m3 else m3
        seg = m0 if m0 > m2 else m2
        if seg > run:
            s *= exp(run - seg)
            run = seg
        thr = run - LSE_CUTOFF
        cnt = 0
        for j in range(start, end):
            v = terms[j]
            buf[cnt] = v - run
            cnt += v > thr
        s0 = s1 = s2 = s3 = 0.0
        j = 0
        while j + 4 <= cnt:
            s0 += mfeig_fast_exp(buf[j])
            s1 += mfeig_fast_exp(buf[j + 1])
            s2 += mfeig_fast_exp(buf[j + 2])
            s3 += mfeig_fast_exp(buf[j + 3])
            j += 4
        while j < cnt:
            s0 += mfeig_fast_exp(buf[j])
            j += 1
        s += (s0 + s1) + (s2 + s3)
        out[c] = run + log(s) - log(<double>end)
        start = end
    return 0


cdef int fill_terms(const double* yv, const double* g, Py_ssize_t N, Py_ssize_t ny,
                    const double* inv_sig, bint scaled, double* terms) noexcept nogil:
    # g is component-major: g[k * N + j]; terms exclude the Gaussian constant
    cdef Py_ssize_t j, k
    cdef double r, gv, yk, isk
    cdef int zero = 0
    for j in range(N):
        terms[j] = 0.0
    for k in range(ny):
        yk = yv[k]
        isk = inv_sig[k]
        if scaled:
            for j in range(N):
                zero |= g[k * N + j] == 0.0
            if zero:
                return 2
            for j in range(N):
                gv = g[k * N + j]
                r = (yk - gv) * isk / gv
                terms[j] -= 0.5 * r * r + mfeig_fast_log(fabs(gv))
        else:
            for j in range(N):
                r = (yk - g[k * N + j]) * isk
                terms[j] -= 0.5 * r * r
    return 0


cdef inline double hval(const double* phi, const double* c, Py_ssize_t F, Py_ssize_t N,
                        Py_ssize_t j, double sgn) noexcept nogil:
    cdef double h = 0.0
    cdef Py_ssize_t f
    for f in range(F):
        h += c[f] * phi[f * N + j]
    return sgn * h


cdef inline Py_ssize_t lower_bound(const double* phi, const double* c, Py_ssize_t F,
                                   Py_ssize_t N, double sgn, double target) noexcept nogil:
    # first j with h_j >= target; h is nondecreasing in j
    cdef Py_ssize_t lo = 0, hi = N, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if hval(phi, c, F, N, mid, sgn) < target:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef inline double vterm(double h, double y, double isg, bint scaled) noexcept nogil:
    cdef double r
    if scaled:
        r = (y - h) * isg / h
        return -0.5 * r * r - mfeig_fast_log(h)
    r = (y - h) * isg
    return -0.5 * r * r


cdef double window_sum2(const double* phi, const double* c, Py_ssize_t F, Py_ssize_t N,
                        double sgn, double y, double isg, double M,
                        Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    # additive terms over [lo, hi) for at most two features, four accumulators
    cdef double a0 = sgn * c[0] * isg, a1 = 0.0, yi = y * isg
    cdef const double* p0 = phi
    cdef const double* p1 = phi
    cdef double r0, r1, r2, r3, s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t j = lo
    if F == 2:
        a1 = sgn * c[1] * isg
        p1 = phi + N
    while j + 4 <= hi:
        r0 = yi - a0 * p0[j] - a1 * p1[j]
        r1 = yi - a0 * p0[j + 1] - a1 * p1[j + 1]
        r2 = yi - a0 * p0[j + 2] - a1 * p1[j + 2]
        r3 = yi - a0 * p0[j + 3] - a1 * p1[j + 3]
        s0 += mfeig_table_exp(-0.5 * r0 * r0 - M)
        s1 += mfeig_table_exp(-0.5 * r1 * r1 - M)
        s2 += mfeig_table_exp(-0.5 * r2 * r2 - M)
        s3 += mfeig_table_exp(-0.5 * r3 * r3 - M)
        j += 4
    while j < hi:
        r0 = yi - a0 * p0[j] - a1 * p1[j]
        s0 += mfeig_table_exp(-0.5 * r0 * r0 - M)
        j += 1
    return (s0 + s1) + (s2 + s3)


cdef int window_lse(const double* phi, const double* c, Py_ssize_t F, Py_ssize_t N,
                    double sgn, double yv, double isg, bint scaled, double* out) noexcept nogil:
    """Log-mean-exp over inner draws when h = sgn * g is nondecreasing in j.

    The log-likelihood term is unimodal in h, so its maximum sits next to
    the peak location and the terms within the cutoff form one contiguous
    run. Returns 1 when the shortcut does not apply.
    """
    cdef double y = sgn * yv, h0, h1, hs, u, M, v, s = 0.0, delta
    cdef Py_ssize_t p, lo, hi, j
    h0 = hval(phi, c, F, N, 0, sgn)
    h1 = hval(phi, c, F, N, N - 1, sgn)
    if not (fabs(h0) < INFINITY and fabs(h1) < INFINITY and fabs(y) < INFINITY):
        return 1
    if scaled:
        if not h0 > 0.0:
            return 1
        if y == 0.0:
            hs = 0.0
        else:
            u = (y + fabs(y) * sqrt(1.0 + 4.0 / (isg * isg))) / (2.0 * y * y)
            hs = 1.0 / u
    else:
        hs = y
    p = lower_bound(phi, c, F, N, sgn, hs)
    M = -INFINITY
    if p > 0:
        M = vterm(hval(phi, c, F, N, p - 1, sgn), y, isg, scaled)
    if p < N:
        v = vterm(hval(phi, c, F, N, p, sgn), y, isg, scaled)
        if v > M:
            M = v
    if scaled:
        j = p - 1
        while j >= 0:
            v = vterm(hval(phi, c, F, N, j, sgn), y, isg, scaled)
            if not v > M - LSE_CUTOFF:
                break
            s += mfeig_table_exp(v - M)
            j -= 1
        j = p
        while j < N:
            v = vterm(hval(phi, c, F, N, j, sgn), y, isg, scaled)
            if not v > M - LSE_CUTOFF:
                break
            s += mfeig_table_exp(v - M)
            j += 1
    else:
        delta = sqrt(2.0 * (LSE_CUTOFF - M)) / isg
        lo = lower_bound(phi, c, F, N, sgn, y - delta)
        hi = lower_bound(phi, c, F, N, sgn, y + delta)
        if F <= 2:
            s = window_sum2(phi, c, F, N, sgn, y, isg, M, lo, hi)
        else:
            for j in range(lo, hi):
                v = vterm(hval(phi, c, F, N, j, sgn), y, isg, scaled)
                s += mfeig_table_exp(v - M)
    out[0] = M + log(s) - log(<double>N)
    return 0


cdef _raise(int status):
    if status == 2:
        raise FloatingPointError("scaled data model is not invertible: forward output is zero")
    raise FloatingPointError("non-finite inner-loop log-likelihood term")


def nested_log_evidence(y, gin, sigma, bint scaled, checkpoints):
    cdef double[:, :, ::1] yv = np.ascontiguousarray(y, dtype=float)
    # component-major copy so each (i, d, k) slice is contiguous over inner draws
    cdef double[:, :, :, ::1] g = np.ascontiguousarray(np.moveaxis(np.asarray(gin, dtype=float), 3, 2))
    sig = np.ascontiguousarray(sigma, dtype=float)
    cdef double[:, ::1] inv_sig = 1.0 / sig
    cdef double[:] const = -np.log(sig).sum(axis=1) - 0.5 * sig.shape[1] * LOG_2PI
    cdef cnp.int64_t[:] cps = np.ascontiguousarray(checkpoints, dtype=np.int64)
    cdef Py_ssize_t n = g.shape[0], D = g.shape[1], ny = g.shape[2], N = g.shape[3]
    cdef Py_ssize_t K = cps.shape[0], i, d, c
    out = np.empty((n, D, K))
    cdef double[:, :, ::1] o = out
    cdef int status = 0
    if n == 0 or D == 0:
        return out
    cdef double* terms = <double*>malloc(N * sizeof(double))
    cdef double* buf = <double*>malloc(N * sizeof(double))
    try:
        with nogil:
            for i in range(n):
                for d in range(D):
                    status = fill_terms(&yv[i, d, 0], &g[i, d, 0, 0], N, ny, &inv_sig[d, 0],
                                        scaled, terms)
                    if not status:
                        status = lse_segments(terms, N, <int64_t*>&cps[0], K, buf, &o[i, d, 0])
                    if status:
                        break
                    for c in range(K):
                        o[i, d, c] += const[d]
                if status:
                    break
    finally:
        free(terms)
        free(buf)
    if status:
        _raise(status)
    return out


def nested_log_evidence_monomial(y, key, rows, kinds, a, b, exponents, coef, sigma,
                                 bint scaled, checkpoints):
    cdef double[:, :, ::1] yv = np.ascontiguousarray(y, dtype=float)
    cdef cnp.int64_t[:] r = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1)
    cdef int[:] kd = np.ascontiguousarray(kinds, dtype=np.intc)
    cdef double[:] av = np.ascontiguousarray(a, dtype=float)
    cdef double[:] bv = np.ascontiguousarray(b, dtype=float)
    cdef double[:, ::1] p = np.ascontiguousarray(exponents, dtype=float)
    cdef double[:, :, ::1] cf = np.ascontiguousarray(coef, dtype=float)
    sig = np.ascontiguousarray(sigma, dtype=float)
    cdef double[:, ::1] inv_sig = 1.0 / sig
    cdef double[:] const = -np.log(sig).sum(axis=1) - 0.5 * sig.shape[1] * LOG_2PI
    cdef cnp.int64_t[:] cps = np.ascontiguousarray(checkpoints, dtype=np.int64)
    cdef Py_ssize_t n = r.shape[0], nt = kd.shape[0], F = p.shape[0]
    cdef Py_ssize_t D = cf.shape[0], ny = cf.shape[2], K = cps.shape[0]
    cdef Py_ssize_t N = cps[K - 1]
    cdef Py_ssize_t i, j, d, f, k, c
    cdef uint32_t k0, k1
    k0, k1 = _key(key)
    cdef double cv, y0, is0, c0, c1, rr
    cdef int status = 0
    out = np.empty((n, D, K))
    cdef double[:, :, ::1] o = out
    if n == 0 or D == 0:
        return out
    # Sorted-window shortcut: one parameter, one output and one inner size.
    # A design qualifies when every feature it uses is monotone in theta and
    # all its nonzero coefficients share a sign, making g monotone in theta.
    cdef bint window = K == 1 and nt == 1 and ny == 1
    sgn_arr = np.zeros(D)
    if window:
        pe = np.asarray(exponents, dtype=float)[:, 0]
        nonneg = int(np.asarray(kinds).reshape(-1)[0]) == 0 and float(np.asarray(a).reshape(-1)[0]) >= 0.0
        mono = (pe == 0.0) | (pe == 1.0) | ((pe >= 0.0) & nonneg)
        cvals = np.asarray(coef, dtype=float)[:, :, 0]
        used = cvals != 0.0
        ok = ~np.any(used & ~mono[None, :], axis=1)
        pos = np.all((cvals > 0.0) | ~used, axis=1)
        neg = np.all((cvals < 0.0) | ~used, axis=1)
        sgn_arr = np.where(ok & pos, 1.0, np.where(ok & neg, -1.0, 0.0))
        window = bool(np.any(sgn_arr != 0.0))
    cdef double[:] sgn = sgn_arr
    cdef double* th = <double*>malloc(N * nt * sizeof(double))
    cdef double* phi = <double*>malloc(N * F * sizeof(double))
    cdef double* g = <double*>malloc(N * ny * sizeof(double))
    cdef double* terms = <double*>malloc(N * sizeof(double))
    cdef double* buf = <double*>malloc(N * sizeof(double))
    cdef Py_ssize_t* bucket = <Py_ssize_t*>malloc((N + 1) * sizeof(Py_ssize_t))
    try:
        with nogil:
            for i in range(n):
                if window:
                    fill_prior(k0, k1, <uint64_t>r[i], N, nt, &kd[0], &av[0], &bv[0], th, buf, bucket)
                else:
                    fill_prior(k0, k1, <uint64_t>r[i], N, nt, &kd[0], &av[0], &bv[0], th)
                fill_features(th, N, nt, &p[0, 0], F, phi)
                for d in range(D):
                    if window and sgn[d] != 0.0:
                        if not window_lse(phi, &cf[d, 0, 0], F, N, sgn[d], yv[i, d, 0],
                                          inv_sig[d, 0], scaled, &o[i, d, 0]):
                            o[i, d, 0] += const[d]
                            continue
                    if ny == 1 and not scaled and F <= 2:
                        # fused forward model and log-likelihood for the common case
                        y0 = yv[i, d, 0]
                        is0 = inv_sig[d, 0]
                        c0 = cf[d, 0, 0]
                        if F == 1:
                            for j in range(N):
                                rr = (y0 - c0 * phi[j]) * is0
                                terms[j] = -0.5 * rr * rr
                        else:
                            c1 = cf[d, 1, 0]
                            for j in range(N):
                                rr = (y0 - c0 * phi[j] - c1 * phi[N + j]) * is0
                                terms[j] = -0.5 * rr * rr
                    else:
                        for k in range(ny):
                            for j in range(N):
                                g[k * N + j] = 0.0
                            for f in range(F):
                                cv = cf[d, f, k]
                                for j in range(N):
                                    g[k * N + j] += cv * phi[f * N + j]
                        status = fill_terms(&yv[i, d, 0], g, N, ny, &inv_sig[d, 0], scaled, terms)
                    if not status:
                        status = lse_segments(terms, N, <int64_t*>&cps[0], K, buf, &o[i, d, 0])
                    if status:
                        break
                    for c in range(K):
                        o[i, d, c] += const[d]
                if status:
                    break
    finally:
        free(th)
        free(phi)
        free(g)
        free(terms)
        free(buf)
        free(bucket)
    if status:
        _raise(status)
    return out


# ---------------------------------------------------------------- relaxed allocation

cdef double REL_BIG = 1e300


cdef double relaxed_eval(const double* x, Py_ssize_t M, const double* Cbig, const double* D,
                         bint gmf, const double* wE, const double* fixed, double* grad,
                         double* work) noexcept nogil:
    # log(Var * Cost) at log blocks x (block 0 fixed at 1) and its gradient
    cdef Py_ssize_t S = 2 * M + 1, K = M + 1, i, j, k, m, l, p, piv
    cdef double* b = work
    cdef double* inter = b + K
    cdef double* n = inter + S * S
    cdef double* cov = n + S
    cdef double* A = cov + S * S
    cdef double* rhs = A + M * M
    cdef double* a = rhs + M
    cdef double* rowsum = a + S
    cdef double* colsum = rowsum + S
    cdef double* wsum = colsum + S
    cdef double v, cost, t, wij, best, tmp, dv
    b[0] = 1.0
    for k in range(1, K):
        b[k] = exp(x[k - 1])
    if gmf:
        for i in range(S):
            n[i] = 0.0
            for k in range(K):
                n[i] += D[i * K + k] * b[k]
        for i in range(S):
            for j in range(S):
                inter[i * S + j] = n[i] if n[i] <= n[j] else n[j]
    else:
        for i in range(S):
            for j in range(S):
                t = 0.0
                for k in range(K):
                    t += D[i * K + k] * D[j * K + k] * b[k]
                inter[i * S + j] = t
        for i in range(S):
            n[i] = inter[i * S + i]
    for i in range(S):
        if not n[i] > 0.0:
            return REL_BIG
    for i in range(S):
        for j in range(S):
            cov[i * S + j] = Cbig[i * S + j] * inter[i * S + j] / (n[i] * n[j])
    a[0] = 1.0
    if fixed != NULL:
        for m in range(M):
            a[2 * m + 1] = fixed[m]
            a[2 * m + 2] = -fixed[m]
    else:
        for m in range(M):
            rhs[m] = -(cov[(2 * m + 1) * S] - cov[(2 * m + 2) * S])
            for l in range(M):
                A[m * M + l] = (cov[(2 * m + 1) * S + 2 * l + 1] - cov[(2 * m + 1) * S + 2 * l + 2]
                                - cov[(2 * m + 2) * S + 2 * l + 1] + cov[(2 * m + 2) * S + 2 * l + 2])
        # Gaussian elimination with partial pivoting
        for p in range(M):
            piv = p
            best = fabs(A[p * M + p])
            for i in range(p + 1, M):
                if fabs(A[i * M + p]) > best:
                    best = fabs(A[i * M + p])
                    piv = i
            if not best > 0.0:
                return REL_BIG
            if piv != p:
                for j in range(M):
                    tmp = A[p * M + j]
                    A[p * M + j] = A[piv * M + j]
                    A[piv * M + j] = tmp
                tmp = rhs[p]
                rhs[p] = rhs[piv]
                rhs[piv] = tmp
            for i in range(p + 1, M):
                t = A[i * M + p] / A[p * M + p]
                for j in range(p, M):
                    A[i * M + j] -= t * A[p * M + j]
                rhs[i] -= t * rhs[p]
        for p in range(M - 1, -1, -1):
            t = rhs[p]
            for j in range(p + 1, M):
                t -= A[p * M + j] * rhs[j]
            rhs[p] = t / A[p * M + p]
        for m in range(M):
            a[2 * m + 1] = rhs[m]
            a[2 * m + 2] = -rhs[m]
    v = 0.0
    for i in range(S):
        for j in range(S):
            v += a[i] * a[j] * cov[i * S + j]
    cost = 0.0
    for k in range(K):
        cost += wE[k] * b[k]
    if not (v > 0.0 and v < INFINITY and cost > 0.0):
        return REL_BIG
    for i in range(S):
        rowsum[i] = 0.0
        colsum[i] = 0.0
        wsum[i] = 0.0
    for k in range(1, K):
        grad[k - 1] = 0.0
    for i in range(S):
        for j in range(S):
            wij = a[i] * a[j] * Cbig[i * S + j] / (n[i] * n[j])
            wsum[i] += wij * inter[i * S + j]
            if gmf:
                if n[i] <= n[j]:
                    rowsum[i] += wij
                else:
                    colsum[j] += wij
            else:
                for k in range(1, K):
                    grad[k - 1] += wij * D[i * K + k] * D[j * K + k]
    for k in range(1, K):
        dv = grad[k - 1] if not gmf else 0.0
        for i in range(S):
            if gmf:
                dv += D[i * K + k] * (rowsum[i] + colsum[i])
            dv -= 2.0 * D[i * K + k] * wsum[i] / n[i]
        grad[k - 1] = b[k] * (dv / v + wE[k] / cost)
    return log(v) + log(cost)


cdef double relaxed_bfgs(double* x, Py_ssize_t M, const double* Cbig, const double* D, bint gmf,
                         const double* wE, const double* fixed, double bound, int max_iter,
                         double* work) noexcept nogil:
    # box-projected BFGS with Armijo backtracking; x is updated in place
    cdef double* g = work
    cdef double* gn = g + M
    cdef double* xn = gn + M
    cdef double* d = xn + M
    cdef double* s = d + M
    cdef double* y = s + M
    cdef double* H = y + M
    cdef double* Hy = H + M * M
    cdef double* ework = Hy + M
    cdef double f, fn, t, slope, sy, yHy, pg, gmax
    cdef Py_ssize_t i, j, it, ls
    for i in range(M):
        x[i] = fmin(fmax(x[i], -bound), bound)
    f = relaxed_eval(x, M, Cbig, D, gmf, wE, fixed, g, ework)
    if f >= REL_BIG:
        return f
    for i in range(M):
        for j in range(M):
            H[i * M + j] = 1.0 if i == j else 0.0
    for it in range(max_iter):
        gmax = 0.0
        for i in range(M):
            pg = g[i]
            if (x[i] <= -bound and pg > 0.0) or (x[i] >= bound and pg < 0.0):
                pg = 0.0
            gmax = fmax(gmax, fabs(pg))
        if gmax < 1e-10:
            break
        slope = 0.0
        for i in range(M):
            d[i] = 0.0
            for j in range(M):
                d[i] -= H[i * M + j] * g[j]
            slope += d[i] * g[i]
        if not slope < 0.0:
            # not a descent direction: restart from steepest descent
            for i in range(M):
                for j in range(M):
                    H[i * M + j] = 1.0 if i == j else 0.0
                d[i] = -g[i]
        t = 1.0
        fn = REL_BIG
        for ls in range(60):
            slope = 0.0
            for i in range(M):
                xn[i] = fmin(fmax(x[i] + t * d[i], -bound), bound)
                slope += g[i] * (xn[i] - x[i])
            fn = relaxed_eval(xn, M, Cbig, D, gmf, wE, fixed, gn, ework)
            if fn < REL_BIG and fn <= f + 1e-4 * slope:
                break
            t *= 0.5
        if not (fn < REL_BIG and fn <= f + 1e-4 * slope) or f - fn <= 1e-15 * fabs(f) and t < 1e-12:
            break
        sy = 0.0
        for i in range(M):
            s[i] = xn[i] - x[i]
            y[i] = gn[i] - g[i]
            sy += s[i] * y[i]
        if sy > 1e-14:
            yHy = 0.0
            for i in range(M):
                Hy[i] = 0.0
                for j in range(M):
                    Hy[i] += H[i * M + j] * y[j]
                yHy += y[i] * Hy[i]
            for i in range(M):
                for j in range(M):
                    H[i * M + j] += ((sy + yHy) * s[i] * s[j] / (sy * sy)
                                     - (Hy[i] * s[j] + s[i] * Hy[j]) / sy)
        for i in range(M):
            x[i] = xn[i]
            g[i] = gn[i]
        if f - fn <= 1e-15 * fabs(f):
            f = fn
            break
        f = fn
    return f


def relaxed_minimize(Cbig, D, bint gmf, wE, fixed, starts, double bound=25.0, int max_iter=500):
    """Minimize log(Var * Cost) over log block sizes from each start.

    Returns the best ``(x, f)``.
    """
    cdef double[:, ::1] Cv = np.ascontiguousarray(Cbig, dtype=float)
    cdef double[:, ::1] Dv = np.ascontiguousarray(D, dtype=float)
    cdef double[::1] wv = np.ascontiguousarray(wE, dtype=float)
    cdef Py_ssize_t S = Cv.shape[0], M = (S - 1) // 2
    fx = None if fixed is None else np.ascontiguousarray(fixed, dtype=float)
    cdef double[::1] fv
    cdef const double* fp = NULL
    if fx is not None:
        fv = fx
        if M > 0:
            fp = &fv[0]
    work = np.empty(8 * M + 2 * M * M + 3 * S * S + 8 * S + 4 * M + 16)
    cdef double[::1] wk = work
    best_x, best_f = None, REL_BIG
    cdef double[::1] xv
    cdef double f
    for x0 in starts:
        x = np.array(x0, dtype=float).reshape(M)
        xv = x
        if M == 0:
            break
        with nogil:
            f = relaxed_bfgs(&xv[0], M, &Cv[0, 0], &Dv[0, 0], gmf, &wv[0], fp, bound, max_iter, &wk[0])
        if best_x is None or f < best_f:
            best_x, best_f = x, f
    return best_x, best_f
