"""Forward models and the additive / scaled data-model transforms."""

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .prob import as_designs


class NoiseForm(str, Enum):
    """How noise enters the data model.

    additive: ``y = g + eps`` with ``log|J^-1| = 0``.
    scaled: ``y = g * (1 + eps)`` with ``log|J^-1| = -sum(log|g|)``.
    """

    ADDITIVE = "additive"
    SCALED = "scaled"


class ForwardModel:
    """Base class for a forward model ``g_m(theta, xi)``.

    Subclasses implement :meth:`evaluate`, which maps parameters of shape
    (..., n_theta) and designs (D, n_xi) to outputs (..., D, n_y).
    """

    def __init__(self, model_id, cost, n_theta, n_y, name=""):
        if int(model_id) < 0:
            raise ValueError("model id must be nonnegative")
        if not float(cost) > 0:
            raise ValueError("model cost must be positive")
        self.model_id = int(model_id)
        self.cost = float(cost)
        self.n_theta = int(n_theta)
        self.n_y = int(n_y)
        self.name = name or f"model{self.model_id}"

    def evaluate(self, theta, designs):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(id={self.model_id}, name={self.name!r}, cost={self.cost})"


class MonomialModel(ForwardModel):
    """``g_k(theta, xi) = sum_f coef_fk(xi) * prod_j theta_j ** p_fj``.

    This separable form covers the benchmark models and lets the compiled
    kernel fuse prior sampling with model evaluation.

    Parameters
    ----------
    exponents : array (F, n_theta)
    coef_fn : callable
        Maps designs (D, n_xi) to coefficients (D, F, n_y).
    """

    def __init__(self, model_id, cost, exponents, coef_fn, n_y=1, name=""):
        self.exponents = np.atleast_2d(np.asarray(exponents, dtype=float))
        self.coef_fn = coef_fn
        super().__init__(model_id, cost, self.exponents.shape[1], n_y, name)

    def coefficients(self, designs):
        return np.asarray(self.coef_fn(as_designs(designs)), dtype=float)

    def evaluate(self, theta, designs):
        theta = _check_theta(theta, self.n_theta)
        phi = np.ones(theta.shape[:-1] + (self.exponents.shape[0],))
        for f, row in enumerate(self.exponents):
            for k, p in enumerate(row):
                if p != 0.0:
                    phi[..., f] *= theta[..., k] ** p
        return np.einsum("...f,dfk->...dk", phi, self.coefficients(designs))


class CallableModel(ForwardModel):
    """Wraps ``fn(theta, designs) -> (..., D, n_y)``."""

    def __init__(self, model_id, cost, fn, n_theta, n_y, name=""):
        super().__init__(model_id, cost, n_theta, n_y, name)
        self.fn = fn

    def evaluate(self, theta, designs):
        theta = _check_theta(theta, self.n_theta)
        return np.asarray(self.fn(theta, as_designs(designs)), dtype=float)


def _check_theta(theta, n_theta):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0 or theta.shape[-1] != n_theta:
        raise ValueError(f"theta must have trailing dimension {n_theta}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return theta


def _shared_term(x):
    return np.exp(-np.abs(0.2 - x[:, 0]))


def nonlinear_benchmark_models(costs=(1.0, 0.1, 0.01)):
    """The three-model nonlinear benchmark ensemble.

    g0 = t^3 x^2 + t exp(-|0.2 - x|)
    g1 = 0.5^0.5 t^2.5 x^1.75 + t exp(-|0.2 - x|)
    g2 = 0.5 t^2 x^1.5 + t exp(-|0.2 - x|)
    """

    def make(scale, p_theta, p_xi):
        def coef(x):
            return np.stack([scale * x[:, 0] ** p_xi, _shared_term(x)], axis=1)[:, :, None]

        return p_theta, coef

    specs = [make(1.0, 3.0, 2.0), make(0.5**0.5, 2.5, 1.75), make(0.5, 2.0, 1.5)]
    return [
        MonomialModel(m, costs[m], [[p], [1.0]], coef, name=f"benchmark_g{m}")
        for m, (p, coef) in enumerate(specs)
    ]


def linear_model(model_id=0, cost=1.0, slope=1.0, quad=0.0):
    """``g = slope * theta * xi + quad * theta^2 * xi`` (scalar theta and xi).

    With ``quad = 0`` and a normal prior this is the linear-Gaussian model
    whose information gain is known in closed form; a nonzero ``quad`` gives a
    deliberately coarsened companion model.
    """

    def coef(x):
        return np.stack([slope * x[:, 0], quad * x[:, 0]], axis=1)[:, :, None]

    return MonomialModel(model_id, cost, [[1.0], [2.0]], coef, name=f"linear{model_id}")


def forward_eval(model, theta, xi):
    """Evaluate one model at one parameter vector and one design: (n_y,)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return model.evaluate(theta, as_designs(xi)[:1])[0]


def apply_noise(g, eps, form):
    """Observations from forward outputs ``g`` and noise ``eps``."""
    if NoiseForm(form) is NoiseForm.ADDITIVE:
        return g + eps
    if np.any(g == 0.0):
        raise FloatingPointError("scaled data model is not invertible: forward output is zero")
    return g * (1.0 + eps)


def invert_noise(g, y, form):
    """Recovered noise and ``log|J^-1|`` (summed over the last axis)."""
    if NoiseForm(form) is NoiseForm.ADDITIVE:
        return y - g, np.zeros(np.shape(g)[:-1])
    if np.any(g == 0.0):
        raise FloatingPointError("scaled data model is not invertible: forward output is zero")
    return (y - g) / g, -np.sum(np.log(np.abs(g)), axis=-1)


def simulate_data(model, form, theta, xi, eps):
    """``y = h(eps; theta, xi)`` for one sample."""
    return apply_noise(forward_eval(model, theta, xi), np.asarray(eps, dtype=float), form)


def inverse_noise(model, form, y, theta, xi):
    """``(eps_tilde, log|J^-1|)`` of observation ``y`` under parameters ``theta``."""
    eps, logdet = invert_noise(forward_eval(model, theta, xi), np.asarray(y, dtype=float), form)
    return eps, float(logdet)


class TabulatedModel(ForwardModel):
    """Forward model backed by precomputed outputs.

    Parameters
    ----------
    thetas : array (S, n_theta)
        Parameter samples the model was evaluated at.
    designs : array (D, n_xi)
    values : array (S, D, n_y)

    Lookup is exact: parameters are matched bitwise against ``thetas`` and
    designs against ``designs``. Anything not in the table raises
    ``LookupError``.
    """

    def __init__(self, model_id, cost, thetas, designs, values, name=""):
        thetas = np.ascontiguousarray(np.atleast_2d(np.asarray(thetas, dtype=float)))
        values = np.asarray(values, dtype=float)
        designs = as_designs(designs)
        if values.shape[:2] != (thetas.shape[0], designs.shape[0]):
            raise ValueError("values must have shape (n_samples, n_designs, n_y)")
        super().__init__(model_id, cost, thetas.shape[1], values.shape[2], name)
        self.thetas = thetas
        self.designs = designs
        self.values = values
        self._theta_index = _RowIndex(thetas)
        if len(self._theta_index.order) != len(np.unique(self._theta_index.keys)):
            raise ValueError("tabulated parameter samples must be distinct")
        self._design_lookup = {tuple(x): d for d, x in enumerate(designs.tolist())}

    @property
    def n_samples(self):
        return self.thetas.shape[0]

    def design_indices(self, designs):
        out = []
        for x in as_designs(designs).tolist():
            d = self._design_lookup.get(tuple(x))
            if d is None:
                raise LookupError(f"design {x} is not in the table")
            out.append(d)
        return np.array(out, dtype=np.int64)

    def sample_indices(self, theta):
        theta = _check_theta(theta, self.n_theta)
        return self._theta_index.find(theta.reshape(-1, self.n_theta)).reshape(theta.shape[:-1])

    def lookup(self, sample_index, design_index):
        s, d = int(sample_index), int(design_index)
        if not (0 <= s < self.n_samples and 0 <= d < self.designs.shape[0]):
            raise LookupError(f"no entry for sample {s}, design {d}")
        return self.values[s, d]

    def evaluate(self, theta, designs):
        d = self.design_indices(designs)
        s = self.sample_indices(theta)
        return self.values[s][..., d, :]


class _RowIndex:
    """Exact row lookup for a float matrix via sorted byte keys."""

    def __init__(self, rows):
        rows = np.ascontiguousarray(rows, dtype=float)
        self.dtype = np.dtype((np.void, rows.dtype.itemsize * rows.shape[1]))
        keys = rows.view(self.dtype).ravel()
        self.order = np.argsort(keys, kind="stable")
        self.keys = keys[self.order]

    def find(self, rows):
        rows = np.ascontiguousarray(rows, dtype=float)
        q = rows.view(self.dtype).ravel()
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, self.keys.size - 1)
        ok = self.keys[pos] == q
        if not np.all(ok):
            bad = rows[np.argmin(ok)]
            raise LookupError(f"parameter sample {bad.tolist()} is not in the table")
        return self.order[pos]


@dataclass
class TableManifest:
    """Schema of a tabulated model file."""

    n_theta: int
    n_y: int
    designs: np.ndarray
    cost: float
    model_id: int = 0
    name: str = ""


def load_tabulated_model(path, manifest):
    """Read a tabulated model CSV.

    The header must be ``sample_index,design_index,theta_0..,y_0..`` and the
    file must hold exactly one finite row per (sample, design) pair, with
    samples numbered ``0..S-1`` and designs ``0..D-1`` for the ``D`` designs
    of the manifest.
    """
    designs = as_designs(manifest.designs)
    n_designs = designs.shape[0]
    expected = (
        ["sample_index", "design_index"]
        + [f"theta_{k}" for k in range(manifest.n_theta)]
        + [f"y_{k}" for k in range(manifest.n_y)]
    )
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: no rows")
        header = [h.strip() for h in header]
        if header != expected:
            raise ValueError(f"{path}: malformed header {header}, expected {expected}")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no rows")

    n_col = len(expected)
    keys = np.empty((len(rows), 2), dtype=np.int64)
    data = np.empty((len(rows), n_col - 2))
    for i, r in enumerate(rows):
        if len(r) != n_col:
            raise ValueError(f"{path}: row {i + 2} has {len(r)} fields, expected {n_col}")
        try:
            keys[i] = [int(r[0]), int(r[1])]
            data[i] = [float(v) for v in r[2:]]
        except ValueError as exc:
            raise ValueError(f"{path}: row {i + 2}: {exc}") from None
    if not np.all(np.isfinite(data)):
        i = int(np.argmin(np.all(np.isfinite(data), axis=1)))
        raise ValueError(f"{path}: NaN or infinite entry in row {i + 2}")
    if keys.min() < 0:
        raise ValueError(f"{path}: negative index")
    if keys[:, 1].max() >= n_designs:
        raise ValueError(f"{path}: design index beyond the {n_designs} manifest designs")

    n_samples = int(keys[:, 0].max()) + 1
    seen = np.zeros((n_samples, n_designs), dtype=np.int64)
    np.add.at(seen, (keys[:, 0], keys[:, 1]), 1)
    dup = np.argwhere(seen > 1)
    if dup.size:
        raise ValueError(f"{path}: duplicate keys (sample, design): {[tuple(x) for x in dup[:10].tolist()]}")
    gaps = np.argwhere(seen == 0)
    if gaps.size:
        raise ValueError(f"{path}: missing rows (sample, design): {[tuple(x) for x in gaps[:10].tolist()]}")

    thetas = np.empty((n_samples, manifest.n_theta))
    values = np.empty((n_samples, n_designs, manifest.n_y))
    th = data[:, : manifest.n_theta]
    thetas[keys[:, 0]] = th
    if not np.array_equal(thetas[keys[:, 0]], th):
        raise ValueError(f"{path}: theta values differ between designs of the same sample")
    values[keys[:, 0], keys[:, 1]] = data[:, manifest.n_theta :]
    return TabulatedModel(manifest.model_id, manifest.cost, thetas, designs, values, manifest.name)


def write_tabulated_model(path, thetas, values):
    """Write outputs ``values`` (S, D, n_y) at ``thetas`` (S, n_theta) as CSV."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    values = np.asarray(values, dtype=float)
    n_theta, n_y = thetas.shape[1], values.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["sample_index", "design_index"] + [f"theta_{k}" for k in range(n_theta)] + [f"y_{k}" for k in range(n_y)]
        )
        for s in range(values.shape[0]):
            for d in range(values.shape[1]):
                w.writerow([s, d] + [repr(float(v)) for v in thetas[s]] + [repr(float(v)) for v in values[s, d]])
