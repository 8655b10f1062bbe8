import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfeig import (
    InnerDraws,
    NoiseSpec,
    PriorSpec,
    UtilityModelSpec,
    analytic_eig_linear_gaussian,
    eval_utility_batch,
    linear_model,
    nmc_estimator,
    nmc_utility,
    nonlinear_benchmark_models,
)
from mfeig.models import CallableModel
from mfeig.prob import derive_stream
from mfeig.utility import draw_batch, inner_stream, nmc_bias_linear_gaussian, utility_values

G0, G1, G2 = nonlinear_benchmark_models()


def test_spec_cost_counts_numerator():
    assert UtilityModelSpec(G1, "additive", 2500).cost == pytest.approx(250.1)
    with pytest.raises(ValueError):
        UtilityModelSpec(G0, "additive", 0)


@pytest.mark.parametrize("form", ["additive", "scaled"])
def test_single_inner_draw_at_theta_gives_zero(form):
    spec = UtilityModelSpec(G0, form, 1)
    u = nmc_utility(spec, 0.6, ([0.003], [0.4]), [[0.4]], NoiseSpec([0.01]))
    assert u == pytest.approx(0.0, abs=1e-12)


def test_two_draw_hand_example():
    # g(theta) = theta * xi at xi = 1; outer theta = 0, inner draws give g = 0 and 1
    spec = UtilityModelSpec(linear_model(), "additive", 2)
    u = nmc_utility(spec, 1.0, ([0.0], [0.0]), [[0.0], [1.0]], NoiseSpec([1.0]))
    assert u == pytest.approx(-np.log((1 + np.exp(-0.5)) / 2), rel=1e-12)
    assert u == pytest.approx(0.2190701963798386, abs=1e-12)


def test_nmc_utility_checks_inner_count():
    spec = UtilityModelSpec(G0, "additive", 3)
    with pytest.raises(ValueError):
        nmc_utility(spec, 0.5, ([0.0], [0.5]), [[0.1], [0.2]], NoiseSpec([0.1]))


def test_empty_batch(rng, unit_prior, noise_1pct):
    spec = UtilityModelSpec(G0, "additive", 10)
    batch = draw_batch(unit_prior, noise_1pct, rng, 0)
    assert eval_utility_batch(spec, [0.1, 0.5], batch, rng, unit_prior, noise_1pct).shape == (0, 2)


def test_batch_is_deterministic(rng, unit_prior, noise_1pct):
    spec = UtilityModelSpec(G1, "additive", 50)
    batch = draw_batch(unit_prior, noise_1pct, rng, 30)
    a = eval_utility_batch(spec, [0.2, 0.9], batch, derive_stream(rng, 7), unit_prior, noise_1pct)
    b = eval_utility_batch(spec, [0.2, 0.9], batch, derive_stream(rng, 7), unit_prior, noise_1pct)
    np.testing.assert_array_equal(a, b)


def test_reuse_shares_inner_rows(rng, unit_prior):
    a = InnerDraws(inner_stream(rng, 1, True), unit_prior)
    b = InnerDraws(inner_stream(rng, 2, True), unit_prior)
    np.testing.assert_array_equal(a.draws([3, 4], 20), b.draws([3, 4], 20))
    np.testing.assert_array_equal(a.draws([3, 4], 20)[:, :5], a.draws([3, 4], 5))
    c = InnerDraws(inner_stream(rng, 1, False), unit_prior)
    d = InnerDraws(inner_stream(rng, 2, False), unit_prior)
    assert not np.array_equal(c.draws([3], 20), d.draws([3], 20))


def test_outer_samples_do_not_depend_on_batch_size(rng, unit_prior, noise_1pct):
    small = draw_batch(unit_prior, noise_1pct, rng, 5)
    big = draw_batch(unit_prior, noise_1pct, rng, 50)
    np.testing.assert_array_equal(small.theta, big.theta[:5])
    np.testing.assert_array_equal(small.eta, big.eta[:5])
    spec = UtilityModelSpec(G0, "additive", 40)
    inner = InnerDraws(derive_stream(rng, 2), unit_prior)
    u_small = eval_utility_batch(spec, [0.4], small, None, unit_prior, noise_1pct, inner)
    u_big = eval_utility_batch(spec, [0.4], big, None, unit_prior, noise_1pct, inner)
    np.testing.assert_array_equal(u_small, u_big[:5])


@pytest.mark.parametrize("form", ["additive", "scaled"])
@pytest.mark.parametrize("model", [G0, G1, G2])
def test_batch_matches_reference(rng, unit_prior, model, form):
    noise = NoiseSpec([0.05])
    designs = np.array([0.0, 0.35, 1.0])
    n_in = 64
    batch = draw_batch(unit_prior, noise, rng, 12)
    inner = InnerDraws(derive_stream(rng, 9), unit_prior)
    u = eval_utility_batch(UtilityModelSpec(model, form, n_in), designs, batch, None, unit_prior, noise, inner)
    th = inner.draws(batch.rows, n_in)
    eps = batch.eps(noise, designs)
    spec = UtilityModelSpec(model, form, n_in)
    for i in range(len(batch)):
        for d, xi in enumerate(designs):
            ref = nmc_utility(spec, xi, (eps[i, d], batch.theta[i]), th[i], noise)
            assert u[i, d] == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_generic_path_matches_fused_path(rng, unit_prior, noise_1pct):
    wrapped = CallableModel(0, 1.0, G1.evaluate, 1, 1)
    batch = draw_batch(unit_prior, noise_1pct, rng, 25)
    inner = InnerDraws(derive_stream(rng, 2), unit_prior)
    designs = [0.1, 0.6]
    fused = utility_values(G1, "scaled", unit_prior, noise_1pct, designs, batch, inner, [10, 200])
    generic = utility_values(wrapped, "scaled", unit_prior, noise_1pct, designs, batch, inner, [10, 200])
    np.testing.assert_allclose(fused, generic, rtol=1e-10, atol=1e-10)


def test_inner_sizes_are_prefixes(rng, unit_prior, noise_1pct):
    batch = draw_batch(unit_prior, noise_1pct, rng, 10)
    inner = InnerDraws(derive_stream(rng, 2), unit_prior)
    multi = utility_values(G0, "additive", unit_prior, noise_1pct, [0.5], batch, inner, [300, 20, 100])
    for k, n in enumerate([300, 20, 100]):
        single = utility_values(G0, "additive", unit_prior, noise_1pct, [0.5], batch, inner, [n])
        np.testing.assert_allclose(multi[:, :, k], single[:, :, 0], rtol=1e-12, atol=1e-12)


def test_uninformative_design_gives_zero(rng, std_normal_prior):
    # at xi = 0 the linear model output does not depend on theta
    spec = UtilityModelSpec(linear_model(), "additive", 500)
    est, u = nmc_estimator(spec, [0.0], 2000, rng, std_normal_prior, NoiseSpec([0.5]))
    assert abs(est[0]) <= 3 * u.std() / np.sqrt(2000) + 1e-12
    assert np.all(u <= np.log(500) + 1e-9)


def test_nmc_recovers_linear_gaussian_eig(rng, std_normal_prior):
    noise = NoiseSpec([0.5])
    spec = UtilityModelSpec(linear_model(), "additive", 2000)
    designs = np.array([0.25, 0.5, 1.0, 2.0])
    est, u = nmc_estimator(spec, designs, 2000, rng, std_normal_prior, noise)
    se = u.std(axis=0, ddof=1) / np.sqrt(2000)
    exact = analytic_eig_linear_gaussian(1.0, designs, 0.5)
    bias = nmc_bias_linear_gaussian(1.0, designs, 0.5, 2000)
    assert np.all(np.abs(est - exact) <= 3 * se + bias)


def test_case1_nmc_positive(rng, unit_prior, noise_1pct):
    est, _ = nmc_estimator(UtilityModelSpec(G0, "additive", 2500), [0.2], 1000, rng, unit_prior, noise_1pct)
    assert est[0] > 0


def test_analytic_eig_values():
    assert analytic_eig_linear_gaussian(1.0, 0.0, 0.3) == 0.0
    assert analytic_eig_linear_gaussian(0.7, 1.0, 0.7) == pytest.approx(0.5 * np.log(2.0))
    with pytest.raises(ValueError):
        analytic_eig_linear_gaussian(0.0, 1.0, 1.0)


@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0, 5), st.floats(0, 5))
def test_analytic_eig_monotone_in_design(sp, sn, a, b):
    lo, hi = sorted((abs(a), abs(b)))
    assert analytic_eig_linear_gaussian(sp, lo, sn) <= analytic_eig_linear_gaussian(sp, hi, sn)


def test_underflow_safety(rng, unit_prior):
    noise = NoiseSpec([1e-6])
    batch = draw_batch(unit_prior, noise, rng, 4)
    inner = InnerDraws(derive_stream(rng, 2), unit_prior)
    for form in ("additive", "scaled"):
        u = utility_values(G0, form, unit_prior, noise, [0.0, 0.2, 1.0], batch, inner, [100_000])
        assert np.all(np.isfinite(u))


@given(st.floats(-50, 50))
def test_additive_shift_invariance(c):
    prior = PriorSpec.uniform([0.0], [1.0])
    noise = NoiseSpec([0.02])
    stream = derive_stream(derive_stream(prior_seed(), 1), 2)
    batch = draw_batch(prior, noise, stream, 6)
    inner = InnerDraws(derive_stream(stream, 2), prior)
    shifted = CallableModel(0, 1.0, lambda th, xs: G0.evaluate(th, xs) + c, 1, 1)
    plain = CallableModel(0, 1.0, G0.evaluate, 1, 1)
    a = utility_values(plain, "additive", prior, noise, [0.3, 0.9], batch, inner, [50])
    b = utility_values(shifted, "additive", prior, noise, [0.3, 0.9], batch, inner, [50])
    # residuals y - g lose at most a few ulps of |c| relative to sigma
    tol = 64 * np.spacing(abs(c) + 2.0) / 0.02**2 + 1e-12
    np.testing.assert_allclose(a, b, rtol=0, atol=tol)


def prior_seed():
    from mfeig import RngStream

    return RngStream(99)


def test_linear_gaussian_mean_is_nonnegative(rng, std_normal_prior):
    noise = NoiseSpec([1.0])
    spec = UtilityModelSpec(linear_model(), "additive", 200)
    _, u = nmc_estimator(spec, [0.3], 10_000, rng, std_normal_prior, noise)
    assert u.mean() >= -3 * u.std() / np.sqrt(u.size)


@pytest.mark.slow
def test_positive_bias_decreases_with_inner_size(rng, std_normal_prior):
    noise = NoiseSpec([0.5])
    n = 100_000
    batch = draw_batch(std_normal_prior, noise, rng, n)
    inner = InnerDraws(derive_stream(rng, 2), std_normal_prior)
    u = utility_values(linear_model(), "additive", std_normal_prior, noise, [1.0], batch, inner, [10, 100, 1000])[:, 0, :]
    means = u.mean(axis=0)
    se = u.std(axis=0, ddof=1) / np.sqrt(n)
    exact = analytic_eig_linear_gaussian(1.0, 1.0, 0.5)
    assert means[0] >= means[1] >= means[2]
    assert np.all(means >= exact - 3 * se)
