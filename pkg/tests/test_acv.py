import warnings

import numpy as np
import pytest
from conftest import random_spd
from hypothesis import given
from hypothesis import strategies as st

from mfeig import (
    AllocationMatrix,
    CovarianceEstimate,
    EstimatorDesign,
    SingularCovarianceError,
    component_covariances,
    estimator_variance,
    evaluate_acv,
    optimal_weights,
    special_case_allocation,
)
from mfeig.acv import ALL_FAMILIES, family_candidates, valid_trees, weights_for


def random_allocation(gen, M, max_groups=5, max_size=12):
    """Random valid allocation on M low-fidelity models."""
    while True:
        G = int(gen.integers(2, max_groups + 1))
        sizes = gen.integers(1, max_size + 1, size=G)
        z0 = gen.random(G) < 0.5
        zs = gen.random((G, M)) < 0.5
        z = gen.random((G, M)) < 0.5
        A = AllocationMatrix(sizes, z0, zs, z)
        try:
            A.validate(models=range(1, M + 1))
        except ValueError:
            continue
        return A


def simulate_components(C, A, n_rep, gen):
    """Replicates of (Q0(z0), Delta_1..Delta_M) for jointly Gaussian utilities."""
    L = np.linalg.cholesky(C)
    M = A.n_low
    out = np.empty((n_rep, M + 1))
    values = [[None] * A.n_groups for _ in range(M + 1)]
    for g, n in enumerate(A.sizes):
        u = gen.standard_normal((n, n_rep, M + 1)) @ L.T
        for m in range(M + 1):
            values[m][g] = u[:, :, m]
    out[:, 0] = evaluate_acv(values, np.zeros(M), A)
    for m in range(1, M + 1):
        alpha = np.zeros(M)
        alpha[m - 1] = 1.0
        out[:, m] = evaluate_acv(values, alpha, A) - out[:, 0]
    return out, values


def test_disjoint_sets():
    # groups: z0, z*_1, z_1, z*_2, z_2 each on its own group
    C = np.array([[2.0, 0.5, 0.3], [0.5, 1.5, 0.2], [0.3, 0.2, 1.0]])
    sizes = [4, 5, 6, 7, 8]
    eye = np.eye(5, dtype=bool)
    A = AllocationMatrix(sizes, eye[:, 0], eye[:, [1, 3]], eye[:, [2, 4]])
    dd, d0, v0 = component_covariances(C, A)
    np.testing.assert_allclose(d0, 0.0)
    np.testing.assert_allclose(dd, np.diag([1.5 * (1 / 5 + 1 / 6), 1.0 * (1 / 7 + 1 / 8)]))
    assert v0 == pytest.approx(2.0 / 4)


def test_full_overlap_with_z0():
    C = np.array([[2.0, 0.7], [0.7, 1.1]])
    N, r = 10, 3
    A = AllocationMatrix([N, r * N], [True, False], [[True], [False]], [[False], [True]])
    dd, d0, _ = component_covariances(C, A)
    assert d0[0] == pytest.approx(0.7 / N)
    assert dd[0, 0] == pytest.approx(1.1 * (1 / N + 1 / (r * N)))


def test_component_covariances_brute_force():
    gen = np.random.default_rng(11)
    C = np.array([[1.0, 0.8, 0.6], [0.8, 1.2, 0.5], [0.6, 0.5, 0.9]])
    A = AllocationMatrix([3, 4, 5], [True, True, False], [[True, False], [True, True], [False, False]], [[False, True], [True, False], [True, True]])
    A.validate()
    dd, d0, v0 = component_covariances(C, A)
    comp, _ = simulate_components(C, A, 1_000_000, gen)
    c = comp - comp.mean(axis=0)
    analytic = np.block([[np.array([[v0]]), d0[None, :]], [d0[:, None], dd]])
    for i in range(3):
        for j in range(3):
            prod = c[:, i] * c[:, j]
            se = prod.std() / np.sqrt(prod.size)
            assert abs(prod.mean() - analytic[i, j]) <= 3 * se


def test_component_covariances_requires_nonempty_sets():
    C = np.eye(2)
    with pytest.raises(ValueError, match="z0"):
        component_covariances(C, AllocationMatrix([5], [False], [[True]], [[False]]))
    with pytest.raises(ValueError, match="identical"):
        component_covariances(C, AllocationMatrix([5, 5], [True, False], [[True], [False]], [[True], [False]]))
    with pytest.raises(ValueError, match="z_1 is empty"):
        component_covariances(C, AllocationMatrix([5, 5], [True, False], [[True], [False]], [[False], [False]]))


def test_optimal_weights_scalar():
    assert optimal_weights([[2.0]], [0.5])[0] == pytest.approx(-0.25)
    np.testing.assert_array_equal(optimal_weights(np.eye(3), np.zeros(3)), 0.0)


def test_optimal_weights_residual():
    gen = np.random.default_rng(5)
    for _ in range(20):
        S = random_spd(gen, 3, cond=1e4)
        b = gen.normal(size=3)
        a = optimal_weights(S, b)
        assert np.linalg.norm(S @ a + b) <= 1e-10 * np.linalg.norm(b)


def test_optimal_weights_first_order():
    gen = np.random.default_rng(6)
    S = random_spd(gen, 3)
    b = gen.normal(size=3)
    a = optimal_weights(S, b)

    def q(x):
        return 2 * x @ b + x @ S @ x

    for k in range(3):
        for h in (-1e-3, 1e-3):
            e = a.copy()
            e[k] += h
            assert q(e) >= q(a)


def test_optimal_weights_singular():
    with pytest.warns(RuntimeWarning):
        a = optimal_weights([[1.0, 1.0], [1.0, 1.0 + 1e-14]], [0.1, 0.2])
    assert np.all(np.isfinite(a))
    with pytest.raises(SingularCovarianceError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        optimal_weights(np.zeros((2, 2)), [0.1, 0.2])


def test_estimator_variance_plain_mc():
    A = AllocationMatrix([40], [True], np.zeros((1, 0)), np.zeros((1, 0)))
    assert estimator_variance([[3.0]], A) == pytest.approx(3.0 / 40)


def test_estimator_variance_correlated_model_helps():
    C = np.array([[1.0, 1.0], [1.0, 1.0]])
    A = AllocationMatrix([10, 90], [True, False], [[True], [False]], [[False], [True]])
    v = estimator_variance(C, A)
    assert v < 1.0 / 10


def test_estimator_variance_bounded_by_mc():
    gen = np.random.default_rng(8)
    for _ in range(20):
        M = int(gen.integers(1, 4))
        C = random_spd(gen, M + 1)
        A = random_allocation(gen, M)
        _, _, v0 = component_covariances(C, A)
        assert estimator_variance(C, A) <= v0 * (1 + 1e-12)


def test_estimator_variance_uncorrelated_equals_mc():
    C = np.diag([2.0, 1.0])
    A = AllocationMatrix([10, 90], [True, False], [[True], [False]], [[False], [True]])
    assert estimator_variance(C, A) == pytest.approx(0.2)


def test_evaluate_acv_planted_values():
    A = AllocationMatrix([2, 2], [True, False], [[True], [False]], [[True], [True]])
    u0 = [np.array([1.0, 3.0]), None]
    u1 = [np.array([1.0, 3.0]), np.array([5.0, 7.0])]
    assert evaluate_acv([u0, u1], [0.0], A) == 2.0
    # u0 = u1 on z0, alpha = -1: the estimate telescopes to the mean of u1 over z1
    assert evaluate_acv([u0, u1], [-1.0], A) == pytest.approx(4.0)
    same = [np.array([2.0, 2.0]), np.array([2.0, 2.0])]
    assert evaluate_acv([u0, same], [0.7], A) == 2.0


def test_evaluate_acv_missing_group():
    A = AllocationMatrix([2, 2], [True, False], [[True], [False]], [[True], [True]])
    with pytest.raises(ValueError, match="missing"):
        evaluate_acv([[np.ones(2), None], [np.ones(2), None]], [0.5], A)
    with pytest.raises(ValueError, match="expected 2"):
        evaluate_acv([[np.ones(3), None], [np.ones(2), np.ones(2)]], [0.5], A)


def test_evaluate_acv_broadcasts_trailing_axes():
    A = AllocationMatrix([2, 3], [True, False], [[True], [False]], [[True], [True]])
    gen = np.random.default_rng(0)
    u0 = [gen.normal(size=(2, 4)), None]
    u1 = [gen.normal(size=(2, 4)), gen.normal(size=(3, 4))]
    full = evaluate_acv([u0, u1], [0.3], A)
    for d in range(4):
        one = evaluate_acv([[u0[0][:, d], None], [u1[0][:, d], u1[1][:, d]]], [0.3], A)
        assert full[d] == pytest.approx(one)


def test_mfmc_special_case():
    A, alpha = special_case_allocation("MFMC", [10, 100])
    assert alpha is None
    assert A.to_groups() == [
        {"size": 10, "z0": True, "zstar": [True], "z": [True]},
        {"size": 90, "z0": False, "zstar": [False], "z": [True]},
    ]
    with pytest.raises(ValueError):
        special_case_allocation("MFMC", [10, 10])


def test_mlmc_special_case_telescopes():
    A, alpha = special_case_allocation("MLMC", [10, 40])
    np.testing.assert_array_equal(alpha, [-1.0])
    assert A.n_groups == 2 and not np.any(A.z0 & A.z[:, 0])
    gen = np.random.default_rng(1)
    f0, f1, c1 = gen.normal(size=10), gen.normal(size=10), gen.normal(size=40)
    est = evaluate_acv([[f0, None], [f1, c1]], alpha, A)
    assert est == pytest.approx(f0.mean() - f1.mean() + c1.mean())


def test_mlmc_variance_formula():
    C = np.array([[1.0, 0.9], [0.9, 1.2]])
    A, alpha = special_case_allocation("MLMC", [10, 40])
    want = (C[0, 0] - 2 * C[0, 1] + C[1, 1]) / 10 + C[1, 1] / 40
    assert estimator_variance(C, A, alpha) == pytest.approx(want, rel=1e-14)


def test_family_allocations_are_valid():
    gen = np.random.default_rng(2)
    for M in (1, 2, 3):
        for label, struct, fixed in family_candidates(M):
            blocks = gen.integers(1, 20, size=M + 1)
            A = struct.allocation(blocks)
            A.validate()
            np.testing.assert_array_equal(A.intersections(), struct.intersections(blocks))
            np.testing.assert_array_equal(A.samples_per_model(), struct.eval_counts(blocks))


def test_family_superset_names():
    labels = {lab for lab, _, _ in family_candidates(2, ALL_FAMILIES)}
    assert {"MFMC", "MLMC", "ACVMF", "ACVIS"} <= labels
    assert len(valid_trees(2)) == 3
    assert len(valid_trees(3)) == 16


@pytest.mark.parametrize("seed", range(5))
def test_unbiasedness_random_allocations(seed):
    gen = np.random.default_rng(100 + seed)
    M = 2
    C = random_spd(gen, M + 1)
    mean = gen.normal(size=M + 1)
    A = random_allocation(gen, M)
    alpha = gen.normal(size=M)
    comp, _ = simulate_components(C, A, 1000, gen)
    est = mean[0] + comp[:, 0] + comp[:, 1:] @ alpha
    assert abs(est.mean() - mean[0]) <= 4 * est.std(ddof=1) / np.sqrt(est.size)


def test_alpha_star_is_optimal():
    gen = np.random.default_rng(21)
    for _ in range(20):
        M = int(gen.integers(1, 4))
        C = random_spd(gen, M + 1)
        A = random_allocation(gen, M)
        a = weights_for(C, A)
        best = estimator_variance(C, A, a)
        for _ in range(100):
            assert estimator_variance(C, A, a + gen.normal(scale=0.1, size=M)) >= best * (1 - 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_variance_formula_matches_simulation(seed):
    gen = np.random.default_rng(200 + seed)
    M = int(gen.integers(1, 4))
    C = random_spd(gen, M + 1)
    A = random_allocation(gen, M)
    alpha = weights_for(C, A)
    comp, _ = simulate_components(C, A, 10_000, gen)
    est = comp[:, 0] + comp[:, 1:] @ alpha
    assert est.var(ddof=1) == pytest.approx(estimator_variance(C, A), rel=0.10)


def test_uncorrelated_extra_model_changes_nothing():
    C2 = np.array([[1.0, 0.8], [0.8, 1.0]])
    C3 = np.zeros((3, 3))
    C3[:2, :2] = C2
    C3[2, 2] = 0.7
    A2 = AllocationMatrix([10, 30], [True, False], [[True], [False]], [[True], [True]])
    A3 = AllocationMatrix([10, 30, 20], [True, False, False], [[True, True], [False, False], [False, False]], [[True, False], [True, False], [False, True]])
    assert estimator_variance(C3, A3) == pytest.approx(estimator_variance(C2, A2), rel=1e-12)


def test_covariance_estimate_checks():
    with pytest.raises(ValueError):
        CovarianceEstimate([[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError):
        CovarianceEstimate([[-1.0]])
    r = CovarianceEstimate([[4.0, 2.0], [2.0, 4.0]]).correlation()
    assert r[0, 1] == pytest.approx(0.5)


@given(st.integers(0, 2**32 - 1))
def test_design_json_round_trip(seed):
    gen = np.random.default_rng(seed)
    M = int(gen.integers(1, 4))
    C = random_spd(gen, M + 1)
    A = random_allocation(gen, M)
    d = EstimatorDesign(
        allocation=A,
        alpha=weights_for(C, A),
        n_in=gen.integers(1, 5000, size=M + 1),
        projected_variance=estimator_variance(C, A),
        family="GIS",
        costs=gen.uniform(0.1, 10, size=M + 1),
        covariance=C,
        tree=(0,) * M,
        budget=float(gen.uniform(10, 1e6)),
    )
    e = EstimatorDesign.from_json(d.to_json())
    np.testing.assert_array_equal(e.alpha, d.alpha)
    np.testing.assert_array_equal(e.covariance, d.covariance)
    np.testing.assert_array_equal(e.allocation.sizes, A.sizes)
    assert e.projected_variance == d.projected_variance and e.budget == d.budget
    assert e.recompute_variance() == pytest.approx(d.projected_variance, rel=1e-12)
