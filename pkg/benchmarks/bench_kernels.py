"""Time the compiled kernels against the pure-Python fallback.

Run with ``python benchmarks/bench_kernels.py``; pass ``--quick`` for smaller
problem sizes.
"""

import argparse
import time

import numpy as np

from mfeig import _pycore
from mfeig.acv import family_candidates
from mfeig.design import _set_derivatives, _set_models

try:
    from mfeig import _core
except ImportError:
    _core = None


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(quick):
    n_out, n_in = (20, 500) if quick else (100, 2500)
    designs = np.linspace(0.0, 1.0, 41)
    key = (31, 41)
    rows = np.arange(n_out)
    exps = np.array([[3.0], [1.0]])
    coef = np.stack([designs**2, np.exp(-np.abs(0.2 - designs))], axis=1)[:, :, None]
    sigma = np.full((designs.size, 1), 0.01)
    gen = np.random.default_rng(0)
    th = gen.uniform(size=(n_out, 1, 1))
    g = np.einsum("njf,dfk->ndk", _pycore.monomial_features(th, exps), coef)
    y = g + sigma[None] * gen.normal(size=g.shape)
    mono = (y, key, rows, np.array([0]), np.array([0.0]), np.array([1.0]), exps, coef, sigma, False, np.array([n_in]))

    gin = gen.uniform(0.5, 2.0, size=(n_out // 4, 8, n_in, 1))
    ygen = gin[:, :, 0, :]
    nested = (ygen, gin, np.full((8, 1), 0.05), False, np.array([n_in]))

    M = 2
    q, _ = np.linalg.qr(gen.normal(size=(M + 1, M + 1)))
    C = (q * np.array([1.0, 5.0, 25.0])) @ q.T
    w = np.array([1.0, 0.05, 0.002])
    mods = _set_models(M)
    relaxed = []
    for _, struct, fixed in family_candidates(M):
        relaxed.append((C[np.ix_(mods, mods)], _set_derivatives(struct), struct.kind == "GMF", w @ struct.eval_matrix, fixed))

    return [
        ("philox_normals", lambda m: m.philox_normals(key, np.arange(200_000), 4)),
        ("monomial_features", lambda m: m.monomial_features(gen.uniform(size=(n_out, n_in, 1)), exps)),
        ("nested_log_evidence", lambda m: m.nested_log_evidence(*nested)),
        ("nested_log_evidence_monomial", lambda m: m.nested_log_evidence_monomial(*mono)),
        ("relaxed_minimize (all families, M=2)", lambda m: [m.relaxed_minimize(*a, [np.zeros(M)]) for a in relaxed]),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    print(f"{'kernel':40s} {'python [s]':>12s} {'compiled [s]':>13s} {'speedup':>9s}")
    for name, fn in _cases(args.quick):
        tp = _best_of(lambda: fn(_pycore), args.repeat)
        if _core is None:
            print(f"{name:40s} {tp:12.4f} {'n/a':>13s} {'n/a':>9s}")
            continue
        tc = _best_of(lambda: fn(_core), args.repeat)
        print(f"{name:40s} {tp:12.4f} {tc:13.4f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
