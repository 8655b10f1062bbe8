"""Nested Monte Carlo utility models.

The utility of fidelity ``m`` at an outer sample ``(eps, theta)`` is the log
likelihood-to-evidence ratio computed with model ``m``'s data model, with the
evidence estimated from ``N_in`` inner prior draws:

    u_m = log p(eps) + log|J_m^-1|(theta)
          - log( mean_j p(eps_j) |J_m^-1|(theta_j) ),
    eps_j = h_m^-1(h_m(eps; theta); theta_j).

Everything is evaluated in log space.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .models import MonomialModel, NoiseForm, apply_noise, forward_eval, invert_noise
from .prob import LOG_2PI, PURPOSE_INNER, PURPOSE_NOISE, PURPOSE_PRIOR, as_designs, derive_stream, log_density_noise

# upper bound on floats materialized at once by the generic inner loop
_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class UtilityModelSpec:
    """One NMC-style utility model: forward model, noise form and inner size."""

    model: object
    form: NoiseForm
    n_in: int
    reuse_inner: bool = False

    def __post_init__(self):
        if int(self.n_in) < 1:
            raise ValueError("n_in must be at least 1")
        object.__setattr__(self, "n_in", int(self.n_in))
        object.__setattr__(self, "form", NoiseForm(self.form))

    @property
    def cost(self):
        """Cost of one utility evaluation, ``(n_in + 1) * w_g``."""
        return (self.n_in + 1) * self.model.cost


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Outer samples ``(theta, eps)`` with their global sample indices.

    The noise is stored standardized (``eta``); the noise at design ``xi`` is
    ``sigma(xi) * eta``, so one batch serves every design.
    """

    theta: np.ndarray
    eta: np.ndarray
    rows: np.ndarray
    stream_path: tuple = ()

    def __len__(self):
        return self.theta.shape[0]

    def eps(self, noise, designs):
        """Noise at each design: shape (n, D, n_y)."""
        return self.eta[:, None, :] * noise.sigma_at(designs)[None, :, :]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SampleBatch(self.theta[idx], self.eta[idx], self.rows[idx], self.stream_path)


def draw_batch(prior, noise, rng, n, start=0):
    """Outer samples with global indices ``start .. start+n-1`` from ``rng``.

    Sample ``i`` depends only on ``(rng, i)``; parameters and noise come from
    separate child streams.
    """
    rows = np.arange(start, start + n, dtype=np.int64)
    p = derive_stream(rng, PURPOSE_PRIOR)
    e = derive_stream(rng, PURPOSE_NOISE)
    theta = prior.draw(p.key, rows, 1)[:, 0, :]
    eta = e.normals_at(rows, noise.n_y) if n else np.empty((0, noise.n_y))
    return SampleBatch(theta, eta, rows, rng.stream_path)


@dataclass(frozen=True)
class InnerDraws:
    """Inner prior draws addressed by outer-sample index.

    Row ``i`` of the stream holds the draws for outer sample ``i``. Under
    reuse every utility model reads the same rows, model ``m`` consuming the
    first ``N_in,m`` draws.
    """

    rng: object
    prior: object

    def draws(self, rows, n_in):
        return self.prior.draw(self.rng.key, rows, n_in)


def inner_stream(rng, model_id, reuse):
    """Inner-draw stream of model ``model_id`` under trial stream ``rng``."""
    s = derive_stream(rng, PURPOSE_INNER)
    return s if reuse else derive_stream(s, model_id)


def utility_values(model, form, prior, noise, designs, batch, inner, n_in):
    """Utility values for several inner sizes from one pass.

    Parameters
    ----------
    inner : InnerDraws
    n_in : int or sequence of int
        Inner sizes; each value uses the leading draws of the largest.

    Returns
    -------
    u : array (n, D, K)
        ``u[i, d, k]`` is the utility of outer sample ``i`` at design ``d``
        with ``n_in[k]`` inner draws.
    """
    designs = as_designs(designs)
    cps = np.atleast_1d(np.asarray(n_in, dtype=np.int64))
    if cps.size == 0 or cps.min() < 1:
        raise ValueError("inner sizes must be at least 1")
    order = np.argsort(cps, kind="stable")
    sorted_cps = cps[order]
    n = len(batch)
    D = designs.shape[0]
    if n == 0:
        return np.empty((0, D, cps.size))
    form = NoiseForm(form)
    scaled = form is NoiseForm.SCALED
    sigma = noise.sigma_at(designs)

    eps = batch.eps(noise, designs)
    g = model.evaluate(batch.theta, designs)
    y = apply_noise(g, eps, form)
    _, logdet = invert_noise(g, y, form)
    r = eps / sigma[None]
    num = np.sum(-0.5 * r * r, axis=-1) - np.log(sigma).sum(axis=1) - 0.5 * noise.n_y * LOG_2PI + logdet

    n_max = int(sorted_cps[-1])
    if isinstance(model, MonomialModel) and not inner.prior.is_empirical:
        log_ev = kernels.nested_log_evidence_monomial(
            y,
            inner.rng.key,
            batch.rows,
            inner.prior.kind_codes,
            inner.prior.a,
            inner.prior.b,
            model.exponents,
            model.coefficients(designs),
            sigma,
            scaled,
            sorted_cps,
        )
    else:
        log_ev = np.empty((n, D, cps.size))
        chunk = max(1, _CHUNK_ELEMENTS // max(1, n_max * D * model.n_y))
        for s in range(0, n, chunk):
            sl = slice(s, s + chunk)
            th = inner.draws(batch.rows[sl], n_max)
            gin = np.moveaxis(model.evaluate(th, designs), 2, 1)
            log_ev[sl] = kernels.nested_log_evidence(y[sl], gin, sigma, scaled, sorted_cps)
    u = np.empty_like(log_ev)
    u[:, :, order] = num[:, :, None] - log_ev
    return u


def eval_utility_batch(spec, designs, batch, rng, prior, noise, shared_inner=None):
    """Utility values of ``spec`` for every sample of ``batch``: (n, D).

    Inner draws for outer sample ``i`` are row ``i`` of ``rng``; pass the same
    ``shared_inner`` to several specs to reuse draws across models.
    """
    inner = shared_inner if shared_inner is not None else InnerDraws(rng, prior)
    return utility_values(spec.model, spec.form, prior, noise, designs, batch, inner, [spec.n_in])[:, :, 0]


def nmc_utility(spec, xi, outer, inner_theta, noise):
    """Reference evaluation of one utility value.

    Parameters
    ----------
    outer : tuple
        ``(eps, theta)`` of one outer sample.
    inner_theta : array (N_in, n_theta)
    """
    eps, theta = (np.atleast_1d(np.asarray(v, dtype=float)) for v in outer)
    inner_theta = np.atleast_2d(np.asarray(inner_theta, dtype=float))
    if inner_theta.shape[0] != spec.n_in:
        raise ValueError(f"expected {spec.n_in} inner draws, got {inner_theta.shape[0]}")
    g = forward_eval(spec.model, theta, xi)
    y = apply_noise(g, eps, spec.form)
    _, logdet = invert_noise(g, y, spec.form)
    num = log_density_noise(noise, xi, eps) + float(logdet)

    sigma = noise.sigma_at(xi)[0]
    gt = spec.model.evaluate(inner_theta, as_designs(xi)[:1])[:, 0, :]
    et, logdet_t = invert_noise(gt, y, spec.form)
    r = et / sigma
    terms = np.sum(-0.5 * r * r - np.log(sigma) - 0.5 * LOG_2PI, axis=-1) + logdet_t
    if not np.any(np.isfinite(terms)):
        raise FloatingPointError("all inner log-likelihood terms are -inf")
    return float(num - logsumexp(terms) + np.log(spec.n_in))


def nmc_estimator(spec, designs, n_out, rng, prior, noise):
    """Single-fidelity nested Monte Carlo EIG estimate at each design.

    Returns
    -------
    estimates : array (D,)
    u : array (n_out, D)
    """
    if n_out < 1:
        raise ValueError("n_out must be at least 1")
    batch = draw_batch(prior, noise, rng, n_out)
    inner = InnerDraws(inner_stream(rng, spec.model.model_id, True), prior)
    u = eval_utility_batch(spec, designs, batch, rng, prior, noise, shared_inner=inner)
    return u.mean(axis=0), u


def analytic_eig_linear_gaussian(sigma_prior, xi, sigma_noise):
    """EIG of ``y = theta * xi + eps`` with Gaussian prior and noise."""
    if not (sigma_prior > 0 and sigma_noise > 0):
        raise ValueError("standard deviations must be positive")
    return 0.5 * np.log1p((sigma_prior * np.asarray(xi, dtype=float) / sigma_noise) ** 2)


def nmc_bias_linear_gaussian(sigma_prior, xi, sigma_noise, n_in):
    """Leading-order positive bias ``a / (2 N_in)`` of NMC for the linear-Gaussian model.

    ``a = (sigma_prior * xi / sigma_noise)**2`` is the chi-square divergence
    term ``E[Var(p(y|theta)) / p(y)^2]``, which is exact for Gaussians.
    """
    a = (sigma_prior * np.asarray(xi, dtype=float) / sigma_noise) ** 2
    return a / (2.0 * n_in)
