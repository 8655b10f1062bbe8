"""Pilot sampling, allocation optimization and inner-loop size search."""

import itertools
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import direct

from .acv import (
    ALL_FAMILIES,
    AllocationMatrix,
    EstimatorDesign,
    SingularCovarianceError,
    estimator_variance,
    family_candidates,
    weights_for,
)
from . import kernels
from .prob import as_designs
from .utility import InnerDraws, draw_batch, inner_stream, utility_values

_LOG_BOUND = 25.0
_TIE_RTOL = 1e-12


class InfeasibleBudgetError(ValueError):
    """The budget cannot pay for a single high-fidelity utility evaluation."""


@dataclass
class BudgetSpec:
    """Budget and inner-size search settings.

    ``search_box`` holds one ``(low, high)`` integer interval per low-fidelity
    model; ``grid_points`` is the number of lattice values per interval,
    unless ``grid_step`` is set, in which case the lattice is
    ``low, low + step, ...`` up to ``high``.
    """

    w_budget: float
    n_in_0: int
    search_box: list = field(default_factory=list)
    strategy: str = "grid"
    grid_points: int = 50
    grid_step: int = None


def sample_covariance(u):
    """Unbiased covariance of the columns of ``u`` (n, k) with mean centering."""
    u = np.asarray(u, dtype=float)
    if u.shape[0] < 2:
        raise ValueError("need at least two samples")
    d = u - u.mean(axis=0)
    return d.T @ d / (u.shape[0] - 1)


@dataclass(eq=False)
class PilotResult:
    """Pilot covariance estimates.

    Attributes
    ----------
    designs : array (D, n_xi)
    n_in : array (M+1,)
        Inner sizes the headline covariances refer to.
    sigma_per_design : array (D, M+1, M+1)
    sigma_bar : array (M+1, M+1)
        Mean of ``sigma_per_design`` over designs.
    costs : array (M+1,)
        Cost per utility evaluation at ``n_in``.
    model_costs : array (M+1,)
        Cost per forward-model evaluation.
    n_pilot : int
    checkpoints : list of arrays
        Inner sizes at which each model was recorded.
    tables : dict
        ``tables[(m, n)]`` is the design-averaged covariance between model
        ``m`` at each of its checkpoints and model ``n`` at each of its
        checkpoints, shape (K_m, K_n), for ``m <= n``.
    degenerate : list of int
        Designs where some utility model had zero pilot variance.
    """

    designs: np.ndarray
    n_in: np.ndarray
    sigma_per_design: np.ndarray
    sigma_bar: np.ndarray
    costs: np.ndarray
    model_costs: np.ndarray
    n_pilot: int
    checkpoints: list
    tables: dict
    degenerate: list = field(default_factory=list)
    reuse_inner: bool = False

    @property
    def n_models(self):
        return self.sigma_bar.shape[0]

    def _index(self, m, n_in):
        cps = self.checkpoints[m]
        k = np.searchsorted(cps, n_in)
        if k >= cps.size or cps[k] != n_in:
            raise KeyError(f"inner size {n_in} of model {m} was not recorded by the pilot")
        return int(k)

    def sigma_bar_at(self, n_in):
        """Design-averaged covariance for inner sizes ``n_in`` (M+1,)."""
        n_in = np.asarray(n_in, dtype=np.int64)
        k = [self._index(m, n_in[m]) for m in range(self.n_models)]
        C = np.empty((self.n_models, self.n_models))
        for m in range(self.n_models):
            for n in range(m, self.n_models):
                C[m, n] = C[n, m] = self.tables[(m, n)][k[m], k[n]]
        return C

    def costs_at(self, n_in):
        return (np.asarray(n_in, dtype=float) + 1.0) * self.model_costs

    def correlation_to_hf(self):
        s = np.sqrt(np.diag(self.sigma_bar))
        return self.sigma_bar[0] / (s[0] * s)

    def to_dict(self):
        keys = sorted(self.tables)
        return {
            "designs": self.designs.tolist(),
            "n_pilot": int(self.n_pilot),
            "n_in": [int(v) for v in self.n_in],
            "reuse_inner": self.reuse_inner,
            "sigma_bar": self.sigma_bar.tolist(),
            "sigma_per_design": self.sigma_per_design.tolist(),
            "costs": self.costs.tolist(),
            "model_costs": self.model_costs.tolist(),
            "degenerate_designs": list(self.degenerate),
            "checkpoints": [[int(v) for v in c] for c in self.checkpoints],
            "tables": [{"models": [m, n], "cov": self.tables[(m, n)].tolist()} for m, n in keys],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        tables = {tuple(t["models"]): np.array(t["cov"], dtype=float) for t in d["tables"]}
        return cls(
            designs=np.array(d["designs"], dtype=float),
            n_in=np.array(d["n_in"], dtype=np.int64),
            sigma_per_design=np.array(d["sigma_per_design"], dtype=float),
            sigma_bar=np.array(d["sigma_bar"], dtype=float),
            costs=np.array(d["costs"], dtype=float),
            model_costs=np.array(d["model_costs"], dtype=float),
            n_pilot=int(d["n_pilot"]),
            checkpoints=[np.array(c, dtype=np.int64) for c in d["checkpoints"]],
            tables=tables,
            degenerate=list(d.get("degenerate_designs", [])),
            reuse_inner=bool(d.get("reuse_inner", False)),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def pilot_covariances(u_list):
    """Per-design and averaged covariances from pilot utilities.

    ``u_list[m]`` has shape (n, D, K_m). Returns the ``tables`` described in
    :class:`PilotResult`.
    """
    n = u_list[0].shape[0]
    D = u_list[0].shape[1]
    centered = [u - u.mean(axis=0) for u in u_list]
    tables = {}
    for m in range(len(u_list)):
        for k in range(m, len(u_list)):
            tables[(m, k)] = np.einsum("idk,idl->kl", centered[m], centered[k]) / ((n - 1) * D)
    return tables


def run_pilot(specs, designs, n_pilot, rng, prior, noise, extra_n_in=None, timings=None):
    """Pilot evaluation of all utility models on one shared sample batch.

    Parameters
    ----------
    specs : list of UtilityModelSpec
        Model ``m`` is ``specs[m]``; their ``n_in`` give the headline sizes.
    designs : array
        Pilot designs; the same outer samples serve every design.
    extra_n_in : sequence of int, optional
        Additional inner sizes recorded for the low-fidelity models, for the
        inner-size search. Draws are made once at the largest size and the
        smaller sizes use their leading draws.
    timings : dict, optional
        Filled with wall-clock seconds spent per model.
    """
    designs = as_designs(designs)
    M1 = len(specs)
    if n_pilot < M1 + 1:
        raise ValueError(f"n_pilot must be at least M+2 = {M1 + 1}")
    reuse = bool(specs[0].reuse_inner)
    batch = draw_batch(prior, noise, rng, n_pilot)
    u_list, checkpoints = [], []
    for m, spec in enumerate(specs):
        cps = {spec.n_in}
        if m > 0 and extra_n_in is not None:
            cps.update(int(v) for v in extra_n_in)
        cps = np.array(sorted(cps), dtype=np.int64)
        inner = InnerDraws(inner_stream(rng, m, reuse), prior)
        t0 = time.perf_counter()
        u_list.append(utility_values(spec.model, spec.form, prior, noise, designs, batch, inner, cps))
        if timings is not None:
            timings[m] = time.perf_counter() - t0
        checkpoints.append(cps)

    base = [int(np.searchsorted(checkpoints[m], specs[m].n_in)) for m in range(M1)]
    ub = np.stack([u_list[m][:, :, base[m]] for m in range(M1)], axis=2)  # (n, D, M+1)
    d = ub - ub.mean(axis=0)
    per_design = np.einsum("idm,idk->dmk", d, d) / (n_pilot - 1)
    # variance at rounding level relative to the values counts as zero
    floor = (1e-12 * (1.0 + np.abs(ub).mean(axis=0))) ** 2  # (D, M+1)
    degenerate = [int(i) for i in np.flatnonzero(np.any(np.diagonal(per_design, axis1=1, axis2=2) <= floor, axis=1))]
    if degenerate:
        warnings.warn(f"zero pilot variance at designs {degenerate}", RuntimeWarning, stacklevel=2)
    model_costs = np.array([s.model.cost for s in specs])
    n_in = np.array([s.n_in for s in specs], dtype=np.int64)
    return PilotResult(
        designs=designs,
        n_in=n_in,
        sigma_per_design=per_design,
        sigma_bar=per_design.mean(axis=0),
        costs=(n_in + 1.0) * model_costs,
        model_costs=model_costs,
        n_pilot=int(n_pilot),
        checkpoints=checkpoints,
        tables=pilot_covariances(u_list),
        degenerate=degenerate,
        reuse_inner=reuse,
    )


def estimator_cost(w, A):
    """Total cost: each model pays for the distinct samples it evaluates."""
    return float(np.dot(np.asarray(w, dtype=float), A.samples_per_model()))


def _embed(A_sub, models, M):
    # place a sub-ensemble allocation into the full set of M low-fidelity models
    zstar = np.zeros((A_sub.n_groups, M), dtype=bool)
    z = np.zeros((A_sub.n_groups, M), dtype=bool)
    for j, m in enumerate(models):
        zstar[:, m - 1] = A_sub.zstar[:, j]
        z[:, m - 1] = A_sub.z[:, j]
    return AllocationMatrix(A_sub.sizes, A_sub.z0, zstar, z)


def _set_models(M):
    # model behind each set z0, z*_1, z_1, ..., z*_M, z_M
    return np.concatenate([[0], np.repeat(np.arange(1, M + 1), 2)])


def _set_derivatives(struct):
    """d(prefix length)/d(block) per set for GMF, or the 0/1 set-block incidence."""
    if struct.kind == "GMF":
        E = struct.eval_matrix
        rows = [E[0]]
        for m in range(1, struct.n_low + 1):
            rows += [E[struct.tree[m - 1]], E[m]]
        return np.array(rows)
    return struct.block_sets


def _relaxed_blocks(C, w, struct, fixed):
    """Continuous block sizes minimizing variance times cost (scale free)."""
    M = struct.n_low
    mods = _set_models(M)
    starts = [np.zeros(M), 0.5 * np.log(w[0] / w[1:])]
    x, f = kernels.relaxed_minimize(
        C[np.ix_(mods, mods)], _set_derivatives(struct), struct.kind == "GMF", w @ struct.eval_matrix, fixed, starts, _LOG_BOUND
    )
    if x is None or not f < 1e300:
        raise SingularCovarianceError("no feasible relaxed allocation")
    return np.exp(np.concatenate([[0.0], x]))


def _integer_blocks(b, w, struct, budget):
    cost_per_block = w @ struct.eval_matrix
    scale = budget / (cost_per_block @ b)
    blocks = np.maximum(np.floor(scale * b), 1.0)
    while cost_per_block @ blocks > budget:
        free = np.flatnonzero(blocks > 1)
        if free.size == 0:
            return None
        j = free[np.argmax(blocks[free])]
        blocks[j] -= 1.0
    return blocks.astype(np.int64)


def optimize_allocation(C, w, budget, families=ALL_FAMILIES, n_in=None, exclude_models=True, reuse_inner=False):
    """Minimum-variance allocation within a budget.

    For each family (and, for M <= 4, each subset of low-fidelity models) the
    continuous block sizes are optimized, scaled to the budget and rounded
    down; the rounded allocation with the smallest variance wins, ties going
    to the lower cost and then to fewer models. Plain Monte Carlo is always a
    candidate.

    Parameters
    ----------
    C : array (M+1, M+1)
    w : array (M+1,)
        Cost of one utility evaluation per model.
    budget : float
    """
    C = np.atleast_2d(np.asarray(getattr(C, "matrix", C), dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    M = C.shape[0] - 1
    if w.size != M + 1:
        raise ValueError("need one cost per model")
    if np.any(w <= 0):
        raise ValueError("costs must be positive")
    if budget < w[0]:
        raise InfeasibleBudgetError(f"budget {budget} cannot afford one high-fidelity evaluation (cost {w[0]})")
    n_in = np.zeros(M + 1, dtype=np.int64) if n_in is None else np.asarray(n_in, dtype=np.int64)

    n0 = int(np.floor(budget / w[0]))
    mc_alloc = AllocationMatrix([n0], [True], np.zeros((1, M), dtype=bool), np.zeros((1, M), dtype=bool))
    best = (C[0, 0] / n0, n0 * w[0], 0, "MC", (), mc_alloc, np.zeros(M), False)

    if M > 0 and (set(families) - {"MC"}):
        if exclude_models and M <= 4:
            subsets = [s for r in range(1, M + 1) for s in itertools.combinations(range(1, M + 1), r)]
        else:
            subsets = [tuple(range(1, M + 1))]
        for models in subsets:
            idx = [0] + list(models)
            Cs = C[np.ix_(idx, idx)]
            ws = w[idx]
            for label, struct, fixed in family_candidates(len(models), families):
                try:
                    b = _relaxed_blocks(Cs, ws, struct, fixed)
                    blocks = _integer_blocks(b, ws, struct, budget)
                    if blocks is None:
                        continue
                    A_sub = struct.allocation(blocks)
                    A_sub.validate()
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        var = estimator_variance(Cs, A_sub, fixed)
                except (SingularCovarianceError, ValueError, np.linalg.LinAlgError):
                    continue
                if not np.isfinite(var):
                    continue
                A = _embed(A_sub, models, M)
                cost = estimator_cost(w, A)
                tree = tuple(idx[p] for p in struct.tree)
                if fixed is not None:
                    alpha = np.zeros(M)
                    alpha[[m - 1 for m in models]] = fixed
                else:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        alpha = weights_for(C, A)
                cand = (var, cost, len(models), label, tree, A, alpha, fixed is not None)
                if _better(cand, best):
                    best = cand

    var, cost, _, label, tree, A, alpha, fixed = best
    return EstimatorDesign(
        allocation=A,
        alpha=alpha,
        n_in=n_in,
        projected_variance=float(var),
        family=label,
        costs=w.copy(),
        covariance=C.copy(),
        tree=tree,
        fixed_alpha=fixed,
        reuse_inner=reuse_inner,
        budget=float(budget),
    )


def _better(a, b):
    va, vb = a[0], b[0]
    if va < vb * (1 - _TIE_RTOL):
        return True
    if va > vb * (1 + _TIE_RTOL):
        return False
    return (a[1], a[2]) < (b[1], b[2])


def grid_values(low, high, points, step=None):
    """Integer lattice on [low, high].

    With ``step`` the lattice is ``low, low + step, ...`` (never past
    ``high``); otherwise ``points`` evenly spaced values rounded to integers.
    """
    if step is not None:
        if int(step) < 1:
            raise ValueError("grid step must be at least 1")
        return np.arange(int(low), int(high) + 1, int(step), dtype=np.int64)
    if points <= 1 or low == high:
        return np.array([int(round(low))], dtype=np.int64)
    return np.unique(np.round(np.linspace(low, high, int(points))).astype(np.int64))


def optimize_inner_sizes(pilot_fn, budget, search, strategy="grid", families=ALL_FAMILIES, n_in_0=None, grid_points=50, max_evals=400, reuse_inner=False, grid_step=None):
    """Search low-fidelity inner sizes for the smallest projected variance.

    Parameters
    ----------
    pilot_fn : callable
        Maps a full inner-size vector (M+1,) to ``(C, w)``.
    budget : float
    search : sequence of (low, high)
        Integer interval per low-fidelity model.
    strategy : {"grid", "coarse-to-fine"}
        ``grid`` enumerates the lattice of ``grid_points`` values per axis
        (or of spacing ``grid_step`` when given).
        ``coarse-to-fine`` runs a DIRECT rectangle-division search on the
        relaxed box, snapping each point to that lattice.
    n_in_0 : int
        Fixed high-fidelity inner size.

    Returns
    -------
    n_in : array (M+1,)
    design : EstimatorDesign
    """
    search = [(int(lo), int(hi)) for lo, hi in search]
    if not search:
        raise ValueError("search box is empty")
    for lo, hi in search:
        if lo < 1 or hi < lo:
            raise ValueError("search intervals must satisfy 1 <= low <= high")
    lattices = [grid_values(lo, hi, grid_points, grid_step) for lo, hi in search]
    cache = {}

    def evaluate(point):
        point = tuple(int(p) for p in point)
        if point not in cache:
            n_in = np.array((n_in_0,) + point, dtype=np.int64)
            C, w = pilot_fn(n_in)
            try:
                cache[point] = optimize_allocation(C, w, budget, families, n_in=n_in, reuse_inner=reuse_inner)
            except InfeasibleBudgetError:
                cache[point] = None
        return cache[point]

    if strategy == "grid":
        for point in itertools.product(*lattices):
            evaluate(point)
    elif strategy == "coarse-to-fine":

        def snap(x):
            return tuple(int(lat[np.argmin(np.abs(lat - v))]) for lat, v in zip(lattices, x))

        def f(x):
            d = evaluate(snap(x))
            return np.log(d.projected_variance) if d is not None else 1e300

        direct(f, [(lo, hi) for lo, hi in search], maxfun=max_evals, locally_biased=True)
    else:
        raise ValueError(f"unknown search strategy {strategy!r}")

    feasible = [(d.projected_variance, p) for p, d in cache.items() if d is not None]
    if not feasible:
        raise InfeasibleBudgetError("no feasible inner sizes in the search box")
    best_var = min(v for v, _ in feasible)
    point = min(p for v, p in feasible if v <= best_var)
    return np.array((n_in_0,) + point, dtype=np.int64), cache[point]
