import numpy as np
import pytest

from mfeig import (
    AllocationMatrix,
    EstimatorDesign,
    NoiseSpec,
    PriorSpec,
    RngStream,
    UtilityModelSpec,
    analytic_eig_linear_gaussian,
    linear_model,
    optimize_allocation,
    run_pilot,
)
from mfeig.prob import derive_stream
from mfeig.sweep import (
    STREAM_BASELINE,
    ReductionReport,
    SweepResult,
    argmax_design,
    reduction_report,
    run_baseline_nmc,
    run_sweep,
    sweep_summary,
    worker_count,
)
from mfeig.utility import InnerDraws, draw_batch, inner_stream, nmc_bias_linear_gaussian, utility_values

PRIOR = PriorSpec.normal([0.0], [1.0])
NOISE = NoiseSpec([0.5])
DESIGNS = np.array([0.2, 0.5, 1.0, 1.5, 2.0])


def _linear_ensemble(n_in=(200, 200)):
    hf = linear_model(0, 1.0)
    lf = linear_model(1, 0.02, slope=0.9, quad=0.1)
    return [UtilityModelSpec(hf, "additive", n_in[0]), UtilityModelSpec(lf, "additive", n_in[1])]


def _mc_design(n0, n_in=200):
    A = AllocationMatrix([n0], [True], np.zeros((1, 1), bool), np.zeros((1, 1), bool))
    return EstimatorDesign(A, np.zeros(1), np.array([n_in, n_in]), 0.0, "MC", np.ones(2), np.eye(2))


def _mf_design(budget=2e4):
    specs = _linear_ensemble()
    pilot = run_pilot(specs, DESIGNS, 300, RngStream(7), PRIOR, NOISE)
    return optimize_allocation(pilot.sigma_bar, pilot.costs, budget, n_in=pilot.n_in), specs


def test_identical_trials_have_zero_variance():
    s = SweepResult(np.array([[0.0], [1.0]]), np.array([[1.0, 2.0], [1.0, 2.0]]))
    np.testing.assert_array_equal(s.variance, 0.0)
    lo, hi = s.band
    np.testing.assert_array_equal(lo, hi)


def test_single_trial_has_no_variance():
    s = SweepResult(np.array([[0.0]]), np.array([[1.0]]))
    assert s.variance is None and s.band is None
    summary = sweep_summary(s)
    assert summary["mf_var"] is None and summary["mf_mean"] == [1.0]


def test_mc_allocation_sweep_variance():
    specs = _linear_ensemble()
    n0 = 400
    rng = RngStream(3)
    sweep = run_sweep([1.0], _mc_design(n0), specs, 50, rng, PRIOR, NOISE)
    batch = draw_batch(PRIOR, NOISE, RngStream(4), 20_000)
    u = utility_values(specs[0].model, "additive", PRIOR, NOISE, [1.0], batch, InnerDraws(RngStream(5), PRIOR), [200])
    assert sweep.variance[0] == pytest.approx(u.var() / n0, rel=0.5)


def test_baseline_single_outer_sample():
    specs = _linear_ensemble()
    rng = RngStream(8)
    base = run_baseline_nmc([0.5, 1.0], 1, 200, specs[0], 3, rng, PRIOR, NOISE)
    trng = derive_stream(derive_stream(rng, STREAM_BASELINE), 2)
    batch = draw_batch(PRIOR, NOISE, trng, 1)
    inner = InnerDraws(inner_stream(trng, 0, True), PRIOR)
    u = utility_values(specs[0].model, "additive", PRIOR, NOISE, [0.5, 1.0], batch, inner, [200])
    np.testing.assert_array_equal(base.estimates[2], u[0, :, 0])


def test_baseline_recovers_linear_gaussian():
    specs = _linear_ensemble((1000, 1000))
    base = run_baseline_nmc(DESIGNS, 200, 1000, specs[0], 20, RngStream(9), PRIOR, NOISE)
    se = np.sqrt(base.variance / base.n_trials)
    exact = analytic_eig_linear_gaussian(1.0, DESIGNS, 0.5)
    assert np.all(np.abs(base.mean - exact) <= 3 * se + nmc_bias_linear_gaussian(1.0, DESIGNS, 0.5, 1000))


def test_report_against_itself():
    gen = np.random.default_rng(0)
    s = SweepResult(np.array([[0.0], [1.0], [2.0]]), gen.normal(size=(5, 3)))
    r = reduction_report(s, s)
    np.testing.assert_array_equal(r.ratio, 1.0)
    assert r.ratio_avg == 1.0


def test_report_zero_mf_variance():
    designs = np.array([[0.0], [1.0]])
    base = SweepResult(designs, np.array([[1.0, 1.0], [3.0, 2.0]]))
    mf = SweepResult(designs, np.array([[1.0, 5.0], [1.0, 6.0]]))
    r = reduction_report(base, mf)
    assert np.isinf(r.ratio[0]) and r.ratio[1] == pytest.approx(1.0)
    assert r.baseline_var_avg == pytest.approx(0.5) and r.mf_var_avg == pytest.approx(0.5)
    assert r.to_dict()["n_excluded"] == 1


def test_report_rejects_mismatched_grids():
    a = SweepResult(np.array([[0.0]]), np.zeros((2, 1)))
    b = SweepResult(np.array([[1.0]]), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        reduction_report(a, b)


def test_report_consistency():
    gen = np.random.default_rng(1)
    designs = np.linspace(0, 1, 4)[:, None]
    base = SweepResult(designs, gen.normal(size=(10, 4)) * 3)
    mf = SweepResult(designs, gen.normal(size=(10, 4)))
    r = reduction_report(base, mf)
    assert r.ratio_avg == pytest.approx(base.variance.mean() / mf.variance.mean(), rel=1e-15)
    np.testing.assert_allclose(r.ratio, base.variance / mf.variance)


def test_argmax_design():
    one = SweepResult(np.array([[0.3]]), np.array([[5.0]]))
    assert argmax_design(one)[0] == 0 and argmax_design(one)[1][0] == 0.3
    planted = SweepResult(np.array([[0.0], [1.0], [2.0]]), np.array([[0.0, 1.0, 0.5]]))
    assert argmax_design(planted)[0] == 1
    tied = SweepResult(np.array([[0.0], [1.0], [2.0]]), np.array([[0.0, 1.0, 1.0]]))
    assert argmax_design(tied)[0] == 1


def test_sweep_csv_round_trip(tmp_path):
    gen = np.random.default_rng(2)
    s = SweepResult(np.linspace(0, 1, 3)[:, None], gen.normal(size=(4, 3)))
    s.to_csv(tmp_path / "s.csv")
    t = SweepResult.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(t.designs, s.designs)
    np.testing.assert_array_equal(t.estimates, s.estimates)
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "design_index,design_value,trial,estimate"


def test_report_csv(tmp_path):
    designs = np.array([[0.0], [1.0]])
    r = reduction_report(SweepResult(designs, np.eye(2) * 2), SweepResult(designs, np.eye(2)))
    r.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "design_index,baseline_var,mf_var,ratio"
    assert float(lines[1].split(",")[3]) == pytest.approx(4.0)
    assert isinstance(r, ReductionReport)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("MFEIG_WORKERS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MFEIG_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
    with pytest.raises(ValueError):
        worker_count(0)


def test_results_do_not_depend_on_worker_count():
    design, specs = _mf_design(5e3)
    a = run_sweep(DESIGNS, design, specs, 4, RngStream(11), PRIOR, NOISE, workers=1)
    b = run_sweep(DESIGNS, design, specs, 4, RngStream(11), PRIOR, NOISE, workers=3)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_trials_are_independent_of_trial_count():
    design, specs = _mf_design(5e3)
    a = run_sweep(DESIGNS, design, specs, 2, RngStream(11), PRIOR, NOISE)
    b = run_sweep(DESIGNS, design, specs, 3, RngStream(11), PRIOR, NOISE)
    np.testing.assert_array_equal(a.estimates, b.estimates[:2])


def test_run_sweep_validation():
    design, specs = _mf_design(5e3)
    with pytest.raises(ValueError, match="inner size"):
        run_sweep(DESIGNS, design, _linear_ensemble((200, 300)), 2, RngStream(1), PRIOR, NOISE)
    with pytest.raises(ValueError):
        run_sweep(DESIGNS, design, specs[:1], 2, RngStream(1), PRIOR, NOISE)
    with pytest.raises(ValueError):
        run_sweep(DESIGNS, design, specs, 0, RngStream(1), PRIOR, NOISE)


def test_common_random_numbers_correlate_designs():
    design, specs = _mf_design(5e3)
    s = run_sweep(np.array([0.9, 1.0]), design, specs, 40, RngStream(12), PRIOR, NOISE)
    e = s.estimates
    within = np.corrcoef(e[:, 0], e[:, 1])[0, 1]
    across = np.corrcoef(e[:-1, 0], e[1:, 1])[0, 1]
    assert within > across
    assert within > 0.9


@pytest.mark.slow
def test_mf_and_baseline_agree_in_mean():
    design, specs = _mf_design(2e4)
    assert design.family != "MC"
    n_trials = 200
    mf = run_sweep(DESIGNS, design, specs, n_trials, RngStream(13), PRIOR, NOISE)
    n_out = int(np.ceil(2e4 / design.costs[0]))
    base = run_baseline_nmc(DESIGNS, n_out, int(design.n_in[0]), specs[0], n_trials, RngStream(13), PRIOR, NOISE)
    se = np.sqrt(mf.variance / n_trials + base.variance / n_trials)
    assert np.all(np.abs(mf.mean - base.mean) <= 4 * se)
