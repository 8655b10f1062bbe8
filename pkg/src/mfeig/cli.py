"""Command-line entry point: pilot, design, sweep and the bundled benchmark.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical or
runtime failure.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .acv import ALL_FAMILIES, EstimatorDesign
from .design import BudgetSpec, InfeasibleBudgetError, PilotResult, grid_values, optimize_allocation, optimize_inner_sizes, run_pilot
from .models import NoiseForm, TableManifest, linear_model, load_tabulated_model, nonlinear_benchmark_models
from .prob import NoiseSpec, PriorSpec, RngStream, as_designs, derive_stream
from .sweep import STREAM_PILOT, reduction_report, run_baseline_nmc, run_sweep, sweep_summary, write_summary
from .utility import UtilityModelSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

BENCHMARK_LEVELS = (0, 1, 2)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """Parsed run configuration."""

    master_seed: int
    prior: PriorSpec
    noise: NoiseSpec
    form: NoiseForm
    models: list
    designs: np.ndarray
    budget: BudgetSpec
    n_in: np.ndarray
    families: tuple
    n_pilot: int
    pilot_designs: np.ndarray
    n_trials: int
    baseline: bool
    n_out_baseline: int
    reuse_inner: bool
    output: str = "out"
    measured_costs: list = field(default_factory=list)

    @property
    def n_models(self):
        return len(self.models)

    def rng(self):
        return RngStream(self.master_seed, ())

    def specs(self, n_in=None):
        n_in = self.n_in if n_in is None else n_in
        return [UtilityModelSpec(m, self.form, int(n), self.reuse_inner) for m, n in zip(self.models, n_in)]


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _count(d, key, default=None, minimum=1):
    v = d.get(key, default)
    _require(v is not None, f"missing '{key}'")
    _require(isinstance(v, (int, float)) and not isinstance(v, bool) and float(v) == int(v), f"'{key}' must be an integer")
    _require(int(v) >= minimum, f"'{key}' must be at least {minimum}")
    return int(v)


def _designs(spec):
    if isinstance(spec, dict):
        lin = spec.get("linspace")
        _require(isinstance(lin, list) and len(lin) == 3, "designs.linspace must be [start, stop, count]")
        _require(int(lin[2]) >= 1, "design count must be at least 1")
        return as_designs(np.linspace(float(lin[0]), float(lin[1]), int(lin[2])))
    _require(isinstance(spec, list) and len(spec) >= 1, "designs must be a nonempty list or a linspace spec")
    return as_designs(np.array(spec, dtype=float))


def _model(entry, designs, base_dir):
    _require(isinstance(entry, dict), "each model must be an object")
    mid = _count(entry, "id", minimum=0)
    kind = entry.get("kind", "benchmark")
    cost = entry.get("cost", None)
    measured = cost == "measured"
    if kind == "table":
        _require(not measured, f"model {mid}: tabulated models need a numeric cost")
    w = 1.0 if measured else cost
    _require(isinstance(w, (int, float)) and not isinstance(w, bool) and w > 0, f"model {mid}: cost must be a positive number or \"measured\"")
    if kind == "benchmark":
        level = entry.get("level", mid)
        _require(level in BENCHMARK_LEVELS, f"model {mid}: benchmark level must be one of {BENCHMARK_LEVELS}")
        model = nonlinear_benchmark_models()[level]
        model.model_id, model.cost = mid, float(w)
    elif kind == "linear":
        model = linear_model(mid, float(w), float(entry.get("slope", 1.0)), float(entry.get("quad", 0.0)))
    elif kind == "table":
        path = entry.get("path")
        _require(isinstance(path, str), f"model {mid}: table path missing")
        path = path if os.path.isabs(path) else os.path.join(base_dir, path)
        _require(os.path.isfile(path), f"model {mid}: table file {path} does not exist")
        manifest = TableManifest(
            n_theta=_count(entry, "n_theta"),
            n_y=_count(entry, "n_y", default=1),
            designs=designs,
            cost=float(w),
            model_id=mid,
        )
        try:
            model = load_tabulated_model(path, manifest)
        except (ValueError, LookupError) as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"model {mid}: unknown kind {kind!r}")
    return mid, model, measured


def parse_config(cfg, base_dir="."):
    """Validate a configuration dictionary and build a :class:`RunConfig`."""
    _require(isinstance(cfg, dict), "configuration must be a JSON object")
    seed = _count(cfg, "master_seed", default=0, minimum=0)
    _require(seed < 2**64, "master_seed must fit in 64 bits")
    designs = _designs(cfg.get("designs"))

    raw = cfg.get("models")
    _require(isinstance(raw, list) and raw, "models must be a nonempty list")
    parsed = [_model(e, designs, base_dir) for e in raw]
    ids = sorted(p[0] for p in parsed)
    _require(ids.count(0) == 1, "exactly one model must have id 0")
    _require(ids == list(range(len(ids))), "model ids must be 0..M without gaps")
    parsed.sort(key=lambda p: p[0])
    models = [p[1] for p in parsed]
    measured = [p[0] for p in parsed if p[2]]

    noise_cfg = cfg.get("noise")
    _require(isinstance(noise_cfg, dict), "noise must be an object")
    try:
        form = NoiseForm(noise_cfg.get("form", "additive"))
        noise = NoiseSpec.from_config(noise_cfg)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid noise: {exc}") from exc
    for m in models:
        _require(m.n_y == noise.n_y, f"model {m.model_id} has {m.n_y} outputs, noise has {noise.n_y}")

    prior_cfg = cfg.get("prior")
    try:
        if isinstance(prior_cfg, dict) and prior_cfg.get("kind") == "empirical":
            src = models[_count(prior_cfg, "model", minimum=0)] if "model" in prior_cfg else models[0]
            _require(hasattr(src, "thetas"), "an empirical prior needs a tabulated model")
            prior = PriorSpec.empirical(src.thetas)
        else:
            prior = PriorSpec.from_config(prior_cfg)
    except (ValueError, TypeError, KeyError, IndexError) as exc:
        raise ConfigError(f"invalid prior: {exc}") from exc
    for m in models:
        _require(m.n_theta == prior.n_theta, f"model {m.model_id} takes {m.n_theta} parameters, prior has {prior.n_theta}")

    b = cfg.get("budget")
    _require(isinstance(b, dict), "budget must be an object")
    w_budget = b.get("w_budget")
    _require(isinstance(w_budget, (int, float)) and w_budget > 0, "budget.w_budget must be positive")
    n_in_0 = _count(b, "n_in_0")
    M = len(models) - 1
    n_in_low = b.get("n_in", [n_in_0] * M)
    _require(isinstance(n_in_low, list) and len(n_in_low) == M, f"budget.n_in needs {M} entries")
    n_in = np.array([n_in_0] + [_count({"n_in": v}, "n_in") for v in n_in_low], dtype=np.int64)
    box = b.get("n_in_search_box")
    if box is not None:
        _require(isinstance(box, list) and len(box) == M, f"n_in_search_box needs {M} intervals")
        for iv in box:
            _require(isinstance(iv, list) and len(iv) == 2 and 1 <= int(iv[0]) <= int(iv[1]), "search intervals must satisfy 1 <= low <= high")
        box = [(int(lo), int(hi)) for lo, hi in box]
    strategy = b.get("strategy", "grid" if M <= 2 else "coarse-to-fine")
    _require(strategy in ("grid", "coarse-to-fine"), f"unknown strategy {strategy!r}")
    families = tuple(b.get("families", ALL_FAMILIES))
    _require(all(f in ALL_FAMILIES for f in families) and families, f"families must be drawn from {ALL_FAMILIES}")
    grid_step = _count(b, "grid_step") if b.get("grid_step") is not None else None
    budget = BudgetSpec(float(w_budget), n_in_0, box or [], strategy, _count(b, "grid_points", default=50), grid_step)

    p = cfg.get("pilot", {})
    _require(isinstance(p, dict), "pilot must be an object")
    n_pilot = _count(p, "n_pilot", default=500)
    _require(n_pilot >= M + 2, f"pilot.n_pilot must be at least M+2 = {M + 2}")
    pilot_designs = _designs(p["designs"]) if "designs" in p else designs

    s = cfg.get("sweep", {})
    _require(isinstance(s, dict), "sweep must be an object")
    n_trials = _count(s, "n_trials", default=50)
    w0 = (n_in_0 + 1) * models[0].cost
    n_out = _count(s, "n_out_baseline", default=max(1, math.ceil(w_budget / w0 - 1e-9)))

    reuse = cfg.get("reuse_inner", False)
    _require(isinstance(reuse, bool), "reuse_inner must be true or false")
    return RunConfig(
        master_seed=seed,
        prior=prior,
        noise=noise,
        form=form,
        models=models,
        designs=designs,
        budget=budget,
        n_in=n_in,
        families=families,
        n_pilot=n_pilot,
        pilot_designs=pilot_designs,
        n_trials=n_trials,
        baseline=bool(s.get("baseline", True)),
        n_out_baseline=n_out,
        reuse_inner=reuse,
        output=str(cfg.get("output", "out")),
        measured_costs=measured,
    )


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(cfg, os.path.dirname(os.path.abspath(path)))


def _search_points(config):
    box = config.budget.search_box
    if not box:
        return None
    vals = set()
    for lo, hi in box:
        vals.update(int(v) for v in grid_values(lo, hi, config.budget.grid_points, config.budget.grid_step))
    return sorted(vals)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _mc_outer(config, costs):
    # single-fidelity baseline sample size, rounded up as in the reference setup
    return max(1, math.ceil(config.budget.w_budget / costs[0] - 1e-9))


def cmd_pilot(config, out_dir, echo=print):
    """Run the pilot and write ``pilot.json``."""
    timings = {}
    specs = config.specs()
    pilot = run_pilot(
        specs,
        config.pilot_designs,
        config.n_pilot,
        derive_stream(config.rng(), STREAM_PILOT),
        config.prior,
        config.noise,
        extra_n_in=_search_points(config),
        timings=timings,
    )
    if config.measured_costs:
        # seconds per forward evaluation; pilot checkpoints share one pass at the largest size
        D = pilot.designs.shape[0]
        for m in config.measured_costs:
            evals = config.n_pilot * D * (int(pilot.checkpoints[m][-1]) + 1)
            pilot.model_costs[m] = timings[m] / evals
            config.models[m].cost = float(pilot.model_costs[m])
        pilot.costs = pilot.costs_at(pilot.n_in)
    _write(os.path.join(out_dir, "pilot.json"), pilot.to_json())
    rho = pilot.correlation_to_hf()
    echo(f"{'model':>5} {'w_g':>10} {'n_in':>6} {'w_m':>12} {'corr_to_u0':>11}")
    for m in range(pilot.n_models):
        echo(f"{m:>5} {pilot.model_costs[m]:>10.4g} {int(pilot.n_in[m]):>6} {pilot.costs[m]:>12.5g} {rho[m]:>11.6f}")
    if pilot.degenerate:
        echo(f"zero pilot variance at designs {pilot.degenerate}")
    return pilot


def cmd_design(config, pilot, out_dir, echo=print):
    """Optimize the estimator from a pilot and write ``design.json``."""
    budget = config.budget
    if budget.search_box:

        def pilot_fn(n_in):
            return pilot.sigma_bar_at(n_in), pilot.costs_at(n_in)

        n_in, design = optimize_inner_sizes(
            pilot_fn,
            budget.w_budget,
            budget.search_box,
            budget.strategy,
            config.families,
            n_in_0=budget.n_in_0,
            grid_points=budget.grid_points,
            grid_step=budget.grid_step,
            reuse_inner=config.reuse_inner,
        )
    else:
        n_in = config.n_in
        design = optimize_allocation(
            pilot.sigma_bar_at(n_in), pilot.costs_at(n_in), budget.w_budget, config.families, n_in=n_in, reuse_inner=config.reuse_inner
        )
    _write(os.path.join(out_dir, "design.json"), design.to_json())
    C0 = pilot.sigma_bar_at(n_in)[0, 0]
    mc_var = C0 / _mc_outer(config, pilot.costs_at(n_in))
    echo(f"family {design.family}  n_in {[int(v) for v in design.n_in]}  cost {design.cost:.6g} / {budget.w_budget:.6g}")
    echo(f"projected variance {design.projected_variance:.4g}  MC {mc_var:.4g}  ratio {mc_var / design.projected_variance:.4g}")
    return design, mc_var


def cmd_sweep(config, design, out_dir, echo=print):
    """Run the repeated-trial sweep and write CSVs plus ``summary.json``."""
    os.makedirs(out_dir, exist_ok=True)
    specs = config.specs(design.n_in)
    rng = config.rng()
    mf = run_sweep(config.designs, design, specs, config.n_trials, rng, config.prior, config.noise)
    mf.to_csv(os.path.join(out_dir, "sweep_mf.csv"))
    baseline = report = None
    if config.baseline:
        baseline = run_baseline_nmc(config.designs, config.n_out_baseline, config.budget.n_in_0, specs[0], config.n_trials, rng, config.prior, config.noise)
        baseline.to_csv(os.path.join(out_dir, "sweep_baseline.csv"))
        if config.n_trials >= 2:
            report = reduction_report(baseline, mf)
            report.to_csv(os.path.join(out_dir, "report.csv"))
    summary = sweep_summary(mf, baseline, report)
    summary["projected_variance"] = float(design.projected_variance)
    summary["n_out_baseline"] = int(config.n_out_baseline)
    write_summary(os.path.join(out_dir, "summary.json"), summary)
    echo(f"argmax design {summary['argmax_design']}")
    if report is not None:
        echo(f"design-averaged variance: baseline {report.baseline_var_avg:.4g}  MF {report.mf_var_avg:.4g}  ratio {report.ratio_avg:.4g}")
    return mf, baseline, report


def benchmark_config(variant="additive", mode="naive", reuse=False, n_trials=50, seed=20240601, n_pilot=500, designs=None, output="out"):
    """Configuration dictionary of the bundled one-dimensional benchmark."""
    if variant not in ("additive", "scaled"):
        raise ConfigError(f"unknown variant {variant!r}")
    if mode not in ("naive", "optimal"):
        raise ConfigError(f"unknown mode {mode!r}")
    cfg = {
        "master_seed": seed,
        "prior": [{"lower": 0.0, "upper": 1.0}],
        "noise": {"form": variant, "kind": "gaussian", "sigma": [0.01]},
        "models": [
            {"id": 0, "kind": "benchmark", "level": 0, "cost": 1.0},
            {"id": 1, "kind": "benchmark", "level": 1, "cost": 0.1},
            {"id": 2, "kind": "benchmark", "level": 2, "cost": 0.01},
        ],
        "designs": {"linspace": [0.0, 1.0, 41]} if designs is None else list(designs),
        "budget": {"w_budget": 2.5e6, "n_in_0": 2500, "n_in": [2500, 2500], "strategy": "grid", "grid_points": 50},
        "pilot": {"n_pilot": n_pilot},
        "sweep": {"n_trials": n_trials, "baseline": True},
        "reuse_inner": bool(reuse),
        "output": output,
    }
    if mode == "optimal":
        cfg["budget"]["n_in_search_box"] = [[25, 4000], [25, 4000]]
        cfg["budget"]["grid_step"] = 75
    return cfg


def cmd_benchmark(variant, mode, reuse, out_dir, n_trials=50, seed=20240601, echo=print):
    """Full pilot, design and sweep run of the bundled benchmark."""
    config = parse_config(benchmark_config(variant, mode, reuse, n_trials, seed, output=out_dir))
    echo(f"benchmark: {variant} noise, {mode} inner sizes, {'with' if reuse else 'no'} reuse, {n_trials} trials")
    pilot = cmd_pilot(config, out_dir, echo)
    design, mc_var = cmd_design(config, pilot, out_dir, echo)
    mf, baseline, report = cmd_sweep(config, design, out_dir, echo)
    if report is not None:
        echo("")
        echo(f"{'':>22} {'NMC':>10} {'MF-EIG':>10}")
        echo(f"{'variance (projected)':>22} {mc_var:>10.3e} {design.projected_variance:>10.3e}")
        echo(f"{'variance (empirical)':>22} {report.baseline_var_avg:>10.3e} {report.mf_var_avg:>10.3e}")
        echo(f"{'ratio (projected)':>22} {'':>10} {mc_var / design.projected_variance:>10.2f}")
        echo(f"{'ratio (empirical)':>22} {'':>10} {report.ratio_avg:>10.2f}")
    return pilot, design, mf, baseline, report


def build_parser():
    parser = argparse.ArgumentParser(prog="mfeig", description="Multi-fidelity expected information gain estimation.")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (overrides MFEIG_WORKERS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pilot", help="run pilot sampling")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--out", default=None)

    d = sub.add_parser("design", help="optimize the estimator from a pilot file")
    d.add_argument("-c", "--config", required=True)
    d.add_argument("-p", "--pilot", required=True)
    d.add_argument("-o", "--out", default=None)

    s = sub.add_parser("sweep", help="repeated estimation over the design grid")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("-d", "--design", required=True)
    s.add_argument("-o", "--out", default=None)

    b = sub.add_parser("benchmark", help="run the bundled one-dimensional benchmark")
    b.add_argument("--variant", choices=("additive", "scaled"), default="additive")
    b.add_argument("--mode", choices=("naive", "optimal"), default="naive")
    b.add_argument("--reuse", action="store_true")
    b.add_argument("--trials", type=int, default=50)
    b.add_argument("--seed", type=int, default=20240601)
    b.add_argument("-o", "--out", default="out")
    return parser


def _read_json_file(path, loader, what):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            return loader(fh.read())
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid {what} file: {exc}") from exc


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers must be at least 1")
            os.environ["MFEIG_WORKERS"] = str(args.workers)
        elif os.environ.get("MFEIG_WORKERS", "").strip():
            env = os.environ["MFEIG_WORKERS"].strip()
            if not env.isdigit() or int(env) < 1:
                raise ConfigError("MFEIG_WORKERS must be a positive integer")
        if args.command == "benchmark":
            if args.trials < 1:
                raise ConfigError("--trials must be at least 1")
            cmd_benchmark(args.variant, args.mode, args.reuse, args.out, args.trials, args.seed)
            return EXIT_OK
        config = load_config(args.config)
        out = args.out or config.output
        if args.command == "pilot":
            cmd_pilot(config, out)
        elif args.command == "design":
            pilot = _read_json_file(args.pilot, PilotResult.from_json, "pilot")
            if pilot.n_models != config.n_models:
                raise ConfigError("pilot file and config disagree on the number of models")
            cmd_design(config, pilot, out)
        elif args.command == "sweep":
            design = _read_json_file(args.design, EstimatorDesign.from_json, "design")
            if design.n_models != config.n_models:
                raise ConfigError("design file and config disagree on the number of models")
            cmd_sweep(config, design, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleBudgetError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError, LookupError, ValueError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
