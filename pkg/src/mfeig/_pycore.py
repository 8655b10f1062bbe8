"""Pure-numpy implementations of the hot kernels.

Selected automatically when the compiled ``_core`` extension is missing, or
forced with ``MFEIG_PURE_PYTHON=1``. Every function here has the same
signature and semantics as its counterpart in ``_core.pyx``; uniform draws are
bit-identical between the two, transcendental results agree to rounding.
"""

import numpy as np
from scipy.special import logsumexp, ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

LOG_2PI = float(np.log(2.0 * np.pi))


def philox4x32(key, counters):
    """Philox4x32-10 block function.

    ``key`` is a pair of 32-bit words; ``counters`` is an (n, 4) array of
    32-bit words. Returns an (n, 4) uint64 array holding 32-bit outputs.
    """
    c = np.asarray(counters, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (c[:, 0].copy(), c[:, 1].copy(), c[:, 2].copy(), c[:, 3].copy())
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for r in range(10):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def _uniform_columns(key, rows, ncols, col0):
    # column c of a row comes from Philox block c // 2, words (0, 1) or (2, 3)
    rows = np.asarray(rows, dtype=np.int64).astype(np.uint64)
    cols = np.arange(col0, col0 + ncols, dtype=np.uint64)
    blocks = cols >> np.uint64(1)
    rr = np.repeat(rows, ncols)
    bb = np.tile(blocks, rows.size)
    ctr = np.stack([bb & _MASK32, bb >> _SHIFT32, rr & _MASK32, rr >> _SHIFT32], axis=1)
    w = philox4x32(key, ctr)
    half = np.tile((cols & np.uint64(1)).astype(bool), rows.size)
    hi = np.where(half, w[:, 2], w[:, 0])
    lo = np.where(half, w[:, 3], w[:, 1])
    return _to_open_unit(hi, lo)


def _to_open_unit(hi, lo):
    # 53 random bits, shifted by half an ulp so the result lies in (0, 1)
    bits = (hi >> np.uint64(5)) * np.uint64(67108864) + (lo >> np.uint64(6))
    return (bits.astype(np.float64) + 0.5) / 9007199254740992.0


def philox_uniforms(key, rows, ncols, col0=0):
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if rows.size == 0 or ncols == 0:
        return np.empty((rows.size, ncols))
    return _uniform_columns(key, rows, ncols, col0).reshape(rows.size, ncols)


def philox_normals(key, rows, ncols, col0=0):
    return ndtri(philox_uniforms(key, rows, ncols, col0))


def prior_draws(key, rows, n_draws, kinds, a, b):
    """Inner-loop prior draws: (len(rows), n_draws, n_theta).

    Component ``k`` of draw ``j`` for row ``i`` is a transform of uniform
    column ``j*n_theta+k`` of that row. ``kinds`` is 0 for uniform(a, b) and 1
    for normal(mean=a, std=b) via the inverse normal CDF.
    """
    kinds = np.asarray(kinds)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    nt = kinds.size
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    u = philox_uniforms(key, rows, n_draws * nt).reshape(rows.size, n_draws, nt)
    out = a + (b - a) * u
    if np.any(kinds == 1):
        out = np.where(kinds == 1, a + b * ndtri(u), out)
    return out


def monomial_features(theta, exponents):
    """Products prod_k theta_k**p_fk for every feature row f of ``exponents``."""
    theta = np.asarray(theta, dtype=float)
    exponents = np.asarray(exponents, dtype=float)
    out = np.ones(theta.shape[:-1] + (exponents.shape[0],))
    for f in range(exponents.shape[0]):
        for k in range(exponents.shape[1]):
            p = exponents[f, k]
            if p != 0.0:
                out[..., f] *= theta[..., k] ** p
    return out


def nested_log_evidence(y, gin, sigma, scaled, checkpoints):
    """Log of the inner-loop mean of p(eps_tilde) |J^-1| for each prefix size.

    y: (n, D, ny) observations; gin: (n, D, N, ny) forward outputs at the
    inner draws; sigma: (D, ny). Returns (n, D, K) for K checkpoints.
    """
    y = np.asarray(y, dtype=float)
    gin = np.asarray(gin, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    n, D, N, ny = gin.shape
    const = -np.log(sigma).sum(axis=1) - 0.5 * ny * LOG_2PI  # (D,)
    diff = y[:, :, None, :] - gin
    if scaled:
        if np.any(gin == 0.0):
            raise FloatingPointError("scaled data model is not invertible: forward output is zero")
        r = diff / (gin * sigma[None, :, None, :])
        terms = -0.5 * np.sum(r * r, axis=-1) - np.sum(np.log(np.abs(gin)), axis=-1)
    else:
        r = diff / sigma[None, :, None, :]
        terms = -0.5 * np.sum(r * r, axis=-1)
    if not np.all(np.isfinite(terms)):
        raise FloatingPointError("non-finite inner-loop log-likelihood term")
    out = np.empty((n, D, checkpoints.size))
    for c, m in enumerate(checkpoints):
        out[:, :, c] = logsumexp(terms[:, :, :m], axis=-1) - np.log(m)
    return out + const[None, :, None]


def nested_log_evidence_monomial(y, key, rows, kinds, a, b, exponents, coef, sigma, scaled, checkpoints):
    """Fused variant for models g(theta, xi) = coef(xi) . features(theta).

    Inner draws are generated from ``key`` and ``rows`` exactly as
    :func:`prior_draws` does. coef: (D, F, ny).
    """
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    n_in = int(checkpoints[-1])
    rows = np.asarray(rows, dtype=np.int64)
    coef = np.asarray(coef, dtype=float)
    D = coef.shape[0]
    ny = coef.shape[2]
    out = np.empty((rows.size, D, checkpoints.size))
    chunk = max(1, 2_000_000 // max(1, n_in * D * ny))
    for s in range(0, rows.size, chunk):
        sl = slice(s, s + chunk)
        th = prior_draws(key, rows[sl], n_in, kinds, a, b)
        phi = monomial_features(th, exponents)  # (n, N, F)
        gin = np.einsum("njf,dfk->ndjk", phi, coef)
        out[sl] = nested_log_evidence(np.asarray(y)[sl], gin, sigma, scaled, checkpoints)
    return out


_REL_BIG = 1e300


def relaxed_eval(x, Cbig, D, gmf, wE, fixed):
    """``log(Var * Cost)`` at log block sizes ``x`` and its gradient.

    The set-mean covariance is ``Cbig * I / (n n^T)`` with ``I`` the set
    intersections and ``n = diag(I)``. With ``a = e0 + L^T alpha`` the
    variance is ``a^T Cov a``; it is stationary in optimal ``alpha`` (and
    ``alpha`` is constant when fixed), so its gradient is ``a^T dCov a``.
    """
    M = x.size
    b = np.exp(np.concatenate([[0.0], x]))
    if gmf:
        n = D @ b
        inter = np.minimum.outer(n, n)
    else:
        inter = (D * b) @ D.T
        n = np.diag(inter).copy()
    if not np.all(n > 0):
        return _REL_BIG, np.zeros(M)
    nn = np.outer(n, n)
    cov = Cbig * inter / nn
    S1 = 2 * np.arange(M) + 1
    S2 = S1 + 1
    if fixed is not None:
        alpha = np.asarray(fixed, dtype=float)
    else:
        cov_dd = cov[np.ix_(S1, S1)] - cov[np.ix_(S1, S2)] - cov[np.ix_(S2, S1)] + cov[np.ix_(S2, S2)]
        cov_d0 = cov[S1, 0] - cov[S2, 0]
        try:
            alpha = -np.linalg.solve(cov_dd, cov_d0)
        except np.linalg.LinAlgError:
            return _REL_BIG, np.zeros(M)
    a = np.zeros(2 * M + 1)
    a[0] = 1.0
    a[S1] = alpha
    a[S2] = -alpha
    v = a @ cov @ a
    cost = wE @ b
    if not (np.isfinite(v) and v > 0 and cost > 0):
        return _REL_BIG, np.zeros(M)
    W = np.outer(a, a) * Cbig / nn
    if gmf:
        P = n[:, None] <= n[None, :]
        first = D.T @ (np.where(P, W, 0.0).sum(axis=1) + np.where(P, 0.0, W).sum(axis=0))
    else:
        first = np.einsum("ik,ij,jk->k", D, W, D)
    dv = first - 2.0 * D.T @ ((W * inter).sum(axis=1) / n)
    g = b * (dv / v + wE / cost)
    return float(np.log(v) + np.log(cost)), g[1:]


def _relaxed_bfgs(x, Cbig, D, gmf, wE, fixed, bound, max_iter):
    # box-projected BFGS with Armijo backtracking
    M = x.size
    x = np.clip(x, -bound, bound)
    f, g = relaxed_eval(x, Cbig, D, gmf, wE, fixed)
    if f >= _REL_BIG:
        return x, f
    H = np.eye(M)
    for _ in range(max_iter):
        pg = np.where(((x <= -bound) & (g > 0)) | ((x >= bound) & (g < 0)), 0.0, g)
        if np.max(np.abs(pg)) < 1e-10:
            break
        d = -H @ g
        if not d @ g < 0:
            H = np.eye(M)
            d = -g
        t = 1.0
        fn, gn, xn, slope = _REL_BIG, g, x, 0.0
        for _ls in range(60):
            xn = np.clip(x + t * d, -bound, bound)
            slope = g @ (xn - x)
            fn, gn = relaxed_eval(xn, Cbig, D, gmf, wE, fixed)
            if fn < _REL_BIG and fn <= f + 1e-4 * slope:
                break
            t *= 0.5
        if not (fn < _REL_BIG and fn <= f + 1e-4 * slope) or (f - fn <= 1e-15 * abs(f) and t < 1e-12):
            break
        s, y = xn - x, gn - g
        sy = s @ y
        if sy > 1e-14:
            Hy = H @ y
            H = H + ((sy + y @ Hy) * np.outer(s, s) / sy**2) - (np.outer(Hy, s) + np.outer(s, Hy)) / sy
        done = f - fn <= 1e-15 * abs(f)
        x, g, f = xn, gn, fn
        if done:
            break
    return x, f


def relaxed_minimize(Cbig, D, gmf, wE, fixed, starts, bound=25.0, max_iter=500):
    """Minimize log(Var * Cost) over log block sizes from each start.

    Returns the best ``(x, f)``.
    """
    Cbig = np.asarray(Cbig, dtype=float)
    D = np.asarray(D, dtype=float)
    wE = np.asarray(wE, dtype=float)
    M = (Cbig.shape[0] - 1) // 2
    best_x, best_f = None, _REL_BIG
    if M == 0:
        return best_x, best_f
    for x0 in starts:
        x, f = _relaxed_bfgs(np.array(x0, dtype=float).reshape(M), Cbig, D, bool(gmf), wE, fixed, bound, max_iter)
        if best_x is None or f < best_f:
            best_x, best_f = x, f
    return best_x, best_f
