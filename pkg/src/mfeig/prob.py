"""Random streams, prior and noise distributions.

Streams are counter based: a stream is addressed by ``(master_seed, path)``
and draws are a pure function of ``(key, row, column)``, so any sample of any
stream can be regenerated without serial state. Rows index samples and
columns index the variates that belong to one sample.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels

LOG_2PI = float(np.log(2.0 * np.pi))

# stream labels for the parts of an outer sample
PURPOSE_PRIOR = 0
PURPOSE_NOISE = 1
PURPOSE_INNER = 2

_KIND_CODES = {"uniform": 0, "normal": 1}


@dataclass(frozen=True)
class RngStream:
    """Addressable random stream.

    Parameters
    ----------
    master_seed : int
        Unsigned 64-bit seed shared by a whole experiment.
    stream_path : tuple of int
        Labels identifying this stream, e.g. ``(trial, purpose)``.

    Notes
    -----
    The Philox key is derived from ``SeedSequence(master_seed, path)``, so
    distinct paths give unrelated keys and no counter is shared between
    streams.
    """

    master_seed: int
    stream_path: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        path = tuple(int(p) for p in self.stream_path)
        if any(not 0 <= p < 2**64 for p in path):
            raise ValueError("stream labels must be unsigned 64-bit integers")
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "stream_path", path)

    @cached_property
    def key(self):
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=self.stream_path)
        k = seq.generate_state(2, np.uint32)
        return (int(k[0]), int(k[1]))

    def uniforms(self, n, ncols=1, start=0):
        """Uniforms on (0, 1) for rows ``start .. start+n-1``, shape (n, ncols)."""
        return kernels.philox_uniforms(self.key, np.arange(start, start + n), ncols)

    def normals(self, n, ncols=1, start=0):
        """Standard normals for rows ``start .. start+n-1``, shape (n, ncols)."""
        return kernels.philox_normals(self.key, np.arange(start, start + n), ncols)

    def uniforms_at(self, rows, ncols=1, col0=0):
        return kernels.philox_uniforms(self.key, np.asarray(rows, dtype=np.int64), ncols, col0)

    def normals_at(self, rows, ncols=1, col0=0):
        return kernels.philox_normals(self.key, np.asarray(rows, dtype=np.int64), ncols, col0)


def derive_stream(parent, label):
    """Child stream with ``label`` appended to the parent's path."""
    return RngStream(parent.master_seed, parent.stream_path + (int(label),))


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Independent per-component prior, or an empirical pool of rows.

    ``kinds[k]`` is ``"uniform"`` (``a`` = lower, ``b`` = upper) or
    ``"normal"`` (``a`` = mean, ``b`` = standard deviation). When ``pool`` is
    given the prior is uniform over its rows; this is how tabulated models,
    which can only be evaluated at stored parameter samples, get a prior.
    """

    kinds: tuple
    a: np.ndarray
    b: np.ndarray
    pool: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pool is not None:
            pool = np.asarray(self.pool, dtype=float)
            if pool.ndim == 1:
                pool = pool[:, None]
            if pool.shape[0] < 1 or not np.all(np.isfinite(pool)):
                raise ValueError("empirical prior pool must be nonempty and finite")
            object.__setattr__(self, "pool", pool)
            object.__setattr__(self, "kinds", ("empirical",) * pool.shape[1])
            object.__setattr__(self, "a", np.zeros(pool.shape[1]))
            object.__setattr__(self, "b", np.ones(pool.shape[1]))
            return
        kinds = tuple(str(k) for k in self.kinds)
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if not (len(kinds) == a.size == b.size) or not kinds:
            raise ValueError("prior needs one (kind, a, b) triple per component")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("prior parameters must be finite")
        for k, lo, hi in zip(kinds, a, b):
            if k not in _KIND_CODES:
                raise ValueError(f"unknown prior kind {k!r}")
            if k == "uniform" and not lo < hi:
                raise ValueError("uniform prior needs lower < upper")
            if k == "normal" and not hi > 0:
                raise ValueError("normal prior needs std > 0")
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @classmethod
    def uniform(cls, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        return cls(("uniform",) * lower.size, lower, upper)

    @classmethod
    def normal(cls, mean, std):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(("normal",) * mean.size, mean, std)

    @classmethod
    def empirical(cls, pool):
        return cls((), np.zeros(0), np.zeros(0), pool=pool)

    @property
    def n_theta(self):
        return len(self.kinds)

    @property
    def is_empirical(self):
        return self.pool is not None

    @property
    def kind_codes(self):
        return np.array([_KIND_CODES[k] for k in self.kinds], dtype=np.int64)

    def draw(self, key, rows, n_draws):
        """Draws for each row: shape (len(rows), n_draws, n_theta).

        Draw ``j`` of row ``i`` depends only on ``(key, i, j)``, so the first
        ``n`` draws do not change when ``n_draws`` grows.
        """
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        if self.is_empirical:
            u = kernels.philox_uniforms(key, rows, n_draws)
            idx = np.minimum((u * self.pool.shape[0]).astype(np.int64), self.pool.shape[0] - 1)
            return self.pool[idx]
        return kernels.prior_draws(key, rows, n_draws, self.kind_codes, self.a, self.b)

    def to_config(self):
        if self.is_empirical:
            return {"kind": "empirical", "n_samples": int(self.pool.shape[0])}
        out = []
        for k, a, b in zip(self.kinds, self.a, self.b):
            if k == "uniform":
                out.append({"kind": "uniform", "lower": float(a), "upper": float(b)})
            else:
                out.append({"kind": "normal", "mean": float(a), "std": float(b)})
        return out

    @classmethod
    def from_config(cls, items):
        """Build from a list of ``{lower, upper}`` or ``{kind: normal, mean, std}``."""
        if not isinstance(items, list) or not items:
            raise ValueError("prior must be a nonempty list of components")
        kinds, a, b = [], [], []
        for it in items:
            kind = it.get("kind", "uniform")
            if kind == "uniform":
                kinds.append(kind)
                a.append(it["lower"])
                b.append(it["upper"])
            elif kind == "normal":
                kinds.append(kind)
                a.append(it["mean"])
                b.append(it["std"])
            else:
                raise ValueError(f"unknown prior kind {kind!r}")
        return cls(tuple(kinds), a, b)


def _design_key(xi):
    return tuple(float(v) for v in np.atleast_1d(np.asarray(xi, dtype=float)))


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Zero-mean Gaussian noise with diagonal covariance.

    ``sigma`` is the default standard deviation vector; ``per_design`` maps a
    design (as a tuple of floats) to its own sigma vector.
    """

    sigma: np.ndarray
    per_design: dict = field(default_factory=dict)

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if sigma.ndim != 1 or not np.all(np.isfinite(sigma)) or not np.all(sigma > 0):
            raise ValueError("noise sigma must be a finite positive vector")
        table = {}
        for k, v in dict(self.per_design).items():
            v = np.atleast_1d(np.asarray(v, dtype=float))
            if v.shape != sigma.shape or not np.all(np.isfinite(v)) or not np.all(v > 0):
                raise ValueError("per-design sigma must match n_y and be positive")
            table[_design_key(k)] = v
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "per_design", table)

    @property
    def n_y(self):
        return self.sigma.size

    def sigma_at(self, designs):
        """Sigma for each design row: shape (D, n_y)."""
        designs = as_designs(designs)
        out = np.empty((designs.shape[0], self.n_y))
        for d, xi in enumerate(designs):
            out[d] = self.per_design.get(_design_key(xi), self.sigma)
        return out

    def to_config(self):
        cfg = {"kind": "gaussian", "sigma": self.sigma.tolist()}
        if self.per_design:
            cfg["per_design"] = [{"design": list(k), "sigma": v.tolist()} for k, v in self.per_design.items()]
        return cfg

    @classmethod
    def from_config(cls, cfg):
        if cfg.get("kind", "gaussian") != "gaussian":
            raise ValueError("only gaussian noise is supported")
        table = {_design_key(e["design"]): e["sigma"] for e in cfg.get("per_design", [])}
        return cls(cfg["sigma"], table)


def as_designs(designs):
    """Normalize designs to a (D, n_xi) float array.

    A scalar is one scalar design and a 1-D array is a list of scalar designs.
    """
    x = np.asarray(designs, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    if x.ndim != 2:
        raise ValueError("designs must be a scalar, a 1-D or a 2-D array")
    return x


def sample_prior(prior, rng, n):
    """``n`` i.i.d. prior draws from stream ``rng``: shape (n, n_theta)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return prior.draw(rng.key, np.arange(n), 1)[:, 0, :]


def sample_noise(noise, xi, rng, n):
    """``n`` i.i.d. noise draws at design ``xi``: shape (n, n_y)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return noise.sigma_at(xi)[0] * rng.normals(n, noise.n_y)


def log_density_noise(noise, xi, eps):
    """Gaussian log-density of the noise vector ``eps`` at design ``xi``."""
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    if eps.shape[-1] != noise.n_y:
        raise ValueError("eps has the wrong dimension")
    if not np.all(np.isfinite(eps)):
        raise ValueError("eps must be finite")
    sigma = noise.sigma_at(xi)[0]
    r = eps / sigma
    return float(np.sum(-0.5 * r * r - np.log(sigma) - 0.5 * LOG_2PI))
