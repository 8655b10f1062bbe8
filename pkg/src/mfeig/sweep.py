"""Design sweeps over repeated trials, single-fidelity baselines and reports.

Every trial draws its outer samples from its own stream; within a trial all
designs share those samples (common random numbers), so estimates at nearby
designs are strongly correlated and the EIG curve is smooth.
"""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .acv import evaluate_acv
from .prob import as_designs, derive_stream
from .utility import InnerDraws, UtilityModelSpec, draw_batch, inner_stream, utility_values

# child labels of the master stream
STREAM_PILOT = 10
STREAM_SWEEP = 11
STREAM_BASELINE = 12


def worker_count(workers=None):
    """Worker threads: explicit value, else ``MFEIG_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get("MFEIG_WORKERS", "").strip()
        workers = int(env) if env else 1
    workers = int(workers)
    if workers < 1:
        raise ValueError("worker count must be at least 1")
    return workers


def _map_trials(fn, n_trials, workers):
    # trials are independent pure functions of their stream, so the thread
    # count never changes the results
    if workers == 1 or n_trials == 1:
        return [fn(t) for t in range(n_trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_trials)))


@dataclass(eq=False)
class SweepResult:
    """Per-trial estimates of one estimator over a design grid.

    Attributes
    ----------
    designs : array (D, n_xi)
    estimates : array (T, D)
    label : str
    """

    designs: np.ndarray
    estimates: np.ndarray
    label: str = "mf"

    @property
    def n_trials(self):
        return self.estimates.shape[0]

    @property
    def mean(self):
        return self.estimates.mean(axis=0)

    @property
    def variance(self):
        """Unbiased variance over trials, or None with a single trial."""
        if self.n_trials < 2:
            return None
        return self.estimates.var(axis=0, ddof=1)

    @property
    def band(self):
        """``(mean - 2 std, mean + 2 std)``, or None with a single trial."""
        var = self.variance
        if var is None:
            return None
        sd = np.sqrt(var)
        return self.mean - 2.0 * sd, self.mean + 2.0 * sd

    def to_csv(self, path):
        nx = self.designs.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["design_index"] + [f"design_value{k}" if nx > 1 else "design_value" for k in range(nx)] + ["trial", "estimate"])
            for d in range(self.designs.shape[0]):
                for t in range(self.n_trials):
                    w.writerow([d] + [repr(float(v)) for v in self.designs[d]] + [t, repr(float(self.estimates[t, d]))])

    @classmethod
    def from_csv(cls, path, label="mf"):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, body = rows[0], rows[1:]
        nx = len(head) - 3
        D = 1 + max(int(r[0]) for r in body)
        T = 1 + max(int(r[nx + 1]) for r in body)
        designs = np.empty((D, nx))
        est = np.empty((T, D))
        for r in body:
            d, t = int(r[0]), int(r[nx + 1])
            designs[d] = [float(v) for v in r[1 : nx + 1]]
            est[t, d] = float(r[nx + 2])
        return cls(designs, est, label)


@dataclass(eq=False)
class ReductionReport:
    """Variance reduction of a multi-fidelity sweep against a baseline.

    Per-design ratios are ``inf`` where the MF variance is zero; those designs
    are left out of the averaged variances. The averaged ratio is the ratio
    of the averaged variances.
    """

    designs: np.ndarray
    baseline_var: np.ndarray
    mf_var: np.ndarray
    ratio: np.ndarray
    baseline_var_avg: float
    mf_var_avg: float
    ratio_avg: float
    argmax_index: int

    @property
    def argmax(self):
        return self.designs[self.argmax_index]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["design_index", "baseline_var", "mf_var", "ratio"])
            for d in range(self.designs.shape[0]):
                w.writerow([d, repr(float(self.baseline_var[d])), repr(float(self.mf_var[d])), repr(float(self.ratio[d]))])

    def to_dict(self):
        return {
            "argmax_index": int(self.argmax_index),
            "argmax_design": [float(v) for v in self.argmax],
            "baseline_var_avg": _finite_or_none(self.baseline_var_avg),
            "mf_var_avg": _finite_or_none(self.mf_var_avg),
            "ratio_avg": _finite_or_none(self.ratio_avg),
            "n_excluded": int(np.sum(~np.isfinite(self.ratio))),
        }


def _finite_or_none(x):
    x = float(x)
    return x if np.isfinite(x) else None


def _per_model_rows(A):
    """Contiguous global row ranges of each group, in group order."""
    ends = np.cumsum(A.sizes)
    return [np.arange(e - s, e, dtype=np.int64) for s, e in zip(A.sizes, ends)]


def mf_trial(est_design, specs, designs, trial_rng, prior, noise):
    """One multi-fidelity estimate at every design from one trial stream.

    Group ``g`` takes the next ``sizes[g]`` outer samples of the trial stream;
    each model evaluates the union of its groups for all designs at once.
    """
    A = est_design.allocation
    group_rows = _per_model_rows(A)
    n_total = int(A.sizes.sum())
    batch = draw_batch(prior, noise, trial_rng, n_total)
    reuse = bool(est_design.reuse_inner)
    active = [0] + [m for m in A.active_models() if est_design.alpha[m - 1] != 0.0]
    u_values = [[None] * A.n_groups for _ in range(A.n_low + 1)]
    for m in active:
        mask = A.evaluated_groups(m) & (A.sizes > 0)
        groups = np.flatnonzero(mask)
        rows = np.concatenate([group_rows[g] for g in groups])
        spec = specs[m]
        inner = InnerDraws(inner_stream(trial_rng, m, reuse), prior)
        u = utility_values(spec.model, spec.form, prior, noise, designs, batch.take(rows), inner, [spec.n_in])[:, :, 0]
        start = 0
        for g in groups:
            u_values[m][g] = u[start : start + A.sizes[g]]
            start += A.sizes[g]
    return evaluate_acv(u_values, est_design.alpha, A)


def run_sweep(designs, est_design, specs, n_trials, rng, prior, noise, workers=None):
    """Repeated multi-fidelity estimation over a design grid.

    Parameters
    ----------
    designs : array
    est_design : EstimatorDesign
    specs : list of UtilityModelSpec
        ``specs[m].n_in`` must match ``est_design.n_in[m]``.
    n_trials : int
    rng : RngStream
        Master stream; trial ``t`` uses child ``[STREAM_SWEEP, t]``.
    """
    designs = as_designs(designs)
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if len(specs) != est_design.n_models:
        raise ValueError(f"expected {est_design.n_models} utility models, got {len(specs)}")
    for m, spec in enumerate(specs):
        if spec.n_in != int(est_design.n_in[m]):
            raise ValueError(f"model {m}: inner size {spec.n_in} does not match the design's {int(est_design.n_in[m])}")
    base = derive_stream(rng, STREAM_SWEEP)

    def trial(t):
        return mf_trial(est_design, specs, designs, derive_stream(base, t), prior, noise)

    est = np.array(_map_trials(trial, n_trials, worker_count(workers)), dtype=float).reshape(n_trials, designs.shape[0])
    return SweepResult(designs, est, "mf")


def run_baseline_nmc(designs, n_out, n_in, spec0, n_trials, rng, prior, noise, workers=None):
    """Repeated single-fidelity nested Monte Carlo over a design grid.

    Trial ``t`` uses child ``[STREAM_BASELINE, t]`` of ``rng``.
    """
    designs = as_designs(designs)
    if n_trials < 1 or n_out < 1:
        raise ValueError("n_trials and n_out must be at least 1")
    spec = UtilityModelSpec(spec0.model, spec0.form, n_in, spec0.reuse_inner)
    base = derive_stream(rng, STREAM_BASELINE)

    def trial(t):
        trng = derive_stream(base, t)
        batch = draw_batch(prior, noise, trng, n_out)
        inner = InnerDraws(inner_stream(trng, 0, True), prior)
        u = utility_values(spec.model, spec.form, prior, noise, designs, batch, inner, [n_in])[:, :, 0]
        return u.mean(axis=0)

    est = np.array(_map_trials(trial, n_trials, worker_count(workers)), dtype=float).reshape(n_trials, designs.shape[0])
    return SweepResult(designs, est, "baseline")


def argmax_design(sweep):
    """Index and value of the design with the largest empirical mean.

    Ties go to the lowest index.
    """
    if sweep.estimates.size == 0:
        raise ValueError("empty sweep")
    i = int(np.argmax(sweep.mean))
    return i, sweep.designs[i]


def reduction_report(baseline, mf):
    """Per-design and design-averaged variance reduction of ``mf``."""
    if baseline.designs.shape != mf.designs.shape or not np.array_equal(baseline.designs, mf.designs):
        raise ValueError("sweeps use different design grids")
    bv, mv = baseline.variance, mf.variance
    if bv is None or mv is None:
        raise ValueError("variance needs at least two trials in both sweeps")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mv > 0, bv / np.where(mv > 0, mv, 1.0), np.inf)
    keep = np.isfinite(ratio)
    b_avg = float(bv[keep].mean()) if keep.any() else float("nan")
    m_avg = float(mv[keep].mean()) if keep.any() else float("nan")
    return ReductionReport(
        designs=mf.designs,
        baseline_var=bv,
        mf_var=mv,
        ratio=ratio,
        baseline_var_avg=b_avg,
        mf_var_avg=m_avg,
        ratio_avg=b_avg / m_avg if keep.any() else float("nan"),
        argmax_index=argmax_design(mf)[0],
    )


def sweep_summary(mf, baseline=None, report=None):
    """Summary dictionary for the JSON output; null variances with one trial."""
    idx, xi = argmax_design(mf)
    var = mf.variance
    out = {
        "n_designs": int(mf.designs.shape[0]),
        "n_trials": int(mf.n_trials),
        "argmax_index": idx,
        "argmax_design": [float(v) for v in xi],
        "mf_mean": [float(v) for v in mf.mean],
        "mf_var": None if var is None else [float(v) for v in var],
        "mf_var_avg": None if var is None else float(var.mean()),
    }
    if baseline is not None:
        bvar = baseline.variance
        out["baseline_mean"] = [float(v) for v in baseline.mean]
        out["baseline_var"] = None if bvar is None else [float(v) for v in bvar]
        out["baseline_var_avg"] = None if bvar is None else float(bvar.mean())
    if report is not None:
        out["report"] = report.to_dict()
    return out


def write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=False)
