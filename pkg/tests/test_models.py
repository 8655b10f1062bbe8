import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfeig import (
    NoiseForm,
    TableManifest,
    TabulatedModel,
    forward_eval,
    inverse_noise,
    linear_model,
    load_tabulated_model,
    nonlinear_benchmark_models,
    simulate_data,
)
from mfeig.models import CallableModel, write_tabulated_model

G0, G1, G2 = nonlinear_benchmark_models()


def _mp_benchmark(m, t, x):
    # independent high-precision evaluation of the benchmark ensemble
    t, x = mpmath.mpf(t), mpmath.mpf(x)
    shared = t * mpmath.exp(-abs(mpmath.mpf("0.2") - x))
    first = [t**3 * x**2, mpmath.sqrt(mpmath.mpf("0.5")) * t ** mpmath.mpf("2.5") * x ** mpmath.mpf("1.75"), mpmath.mpf("0.5") * t**2 * x ** mpmath.mpf("1.5")]
    return float(first[m] + shared)


def test_g0_vanishes_at_zero_theta():
    assert forward_eval(G0, 0.0, 0.7)[0] == 0.0


def test_g0_at_one_one():
    # 1 + exp(-0.8)
    assert forward_eval(G0, 1.0, 1.0)[0] == pytest.approx(1.4493289641172216, rel=1e-14)
    assert forward_eval(G0, 1.0, 1.0)[0] == pytest.approx(1.4493290, abs=5e-8)


def test_g2_at_one_point_two():
    assert forward_eval(G2, 1.0, 0.2)[0] == pytest.approx(1.0447213595499958, rel=1e-14)


@given(st.integers(0, 2), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_benchmark_matches_high_precision(m, t, x):
    got = forward_eval(nonlinear_benchmark_models()[m], t, x)[0]
    assert got == pytest.approx(_mp_benchmark(m, t, x), rel=1e-13, abs=1e-300)


def test_vectorized_evaluate_shape():
    theta = np.linspace(0, 1, 6).reshape(3, 2, 1)
    out = G1.evaluate(theta, [0.1, 0.5, 0.9, 1.0])
    assert out.shape == (3, 2, 4, 1)
    assert out[2, 1, 3, 0] == pytest.approx(_mp_benchmark(1, 1.0, 1.0), rel=1e-14)


def test_forward_rejects_nonfinite_theta():
    with pytest.raises(ValueError):
        forward_eval(G0, np.nan, 0.5)


def test_simulate_zero_noise():
    for form in NoiseForm:
        g = forward_eval(G0, 0.4, 0.6)
        np.testing.assert_array_equal(simulate_data(G0, form, 0.4, 0.6, [0.0]), g)


def test_scaled_simulate_and_invert_scalar():
    two = CallableModel(0, 1.0, lambda t, x: np.full(t.shape[:-1] + (x.shape[0], 1), 2.0), 1, 1)
    assert simulate_data(two, "scaled", 0.3, 0.0, [0.5])[0] == 3.0
    y = simulate_data(two, "scaled", 0.3, 0.0, [0.3])
    assert y[0] == pytest.approx(2.6)
    eps, logdet = inverse_noise(two, "scaled", y, 0.3, 0.0)
    assert eps[0] == pytest.approx(0.3, rel=1e-12)
    assert logdet == pytest.approx(-np.log(2.0))


def test_inverse_at_exact_match():
    g = forward_eval(G0, 0.8, 0.3)
    eps, logdet = inverse_noise(G0, "additive", g, 0.8, 0.3)
    assert eps[0] == 0.0 and logdet == 0.0
    five = CallableModel(0, 1.0, lambda t, x: np.full(t.shape[:-1] + (x.shape[0], 1), 5.0), 1, 1)
    eps, logdet = inverse_noise(five, "scaled", [5.0], 0.1, 0.0)
    assert eps[0] == 0.0 and logdet == pytest.approx(-np.log(5.0), rel=1e-15)


def test_scaled_zero_output_is_an_error():
    with pytest.raises(FloatingPointError):
        simulate_data(G0, "scaled", 0.0, 0.5, [0.1])
    with pytest.raises(FloatingPointError):
        inverse_noise(G0, "scaled", [1.0], 0.0, 0.5)


@given(st.sampled_from(list(NoiseForm)), st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.floats(-0.5, 0.5))
def test_round_trip(form, t, x, e):
    y = simulate_data(G0, form, t, x, [e])
    eps, logdet = inverse_noise(G0, form, y, t, x)
    assert eps[0] == pytest.approx(e, rel=1e-12, abs=1e-15)
    g = forward_eval(G0, t, x)[0]
    assert logdet == (0.0 if form is NoiseForm.ADDITIVE else pytest.approx(-np.log(abs(g)), rel=1e-14))


def test_scaled_jacobian_matches_finite_difference():
    gen = np.random.default_rng(3)
    for _ in range(10):
        t, x, e = gen.uniform(0.05, 1.0), gen.uniform(0.0, 1.0), gen.normal(0.0, 0.1)
        h = 1e-6
        dy = (simulate_data(G0, "scaled", t, x, [e + h])[0] - simulate_data(G0, "scaled", t, x, [e - h])[0]) / (2 * h)
        _, logdet = inverse_noise(G0, "scaled", simulate_data(G0, "scaled", t, x, [e]), t, x)
        assert logdet == pytest.approx(-np.log(abs(dy)), rel=1e-6)


@given(st.floats(-10, 10), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_additive_inverse_is_shift_invariant(c, t, tt, x):
    shifted = CallableModel(0, 1.0, lambda th, xs: G0.evaluate(th, xs) + c, 1, 1)
    y = simulate_data(G0, "additive", t, x, [0.01])
    a, _ = inverse_noise(G0, "additive", y, tt, x)
    b, _ = inverse_noise(shifted, "additive", y + c, tt, x)
    assert b[0] == pytest.approx(a[0], abs=4 * np.spacing(max(1.0, abs(c) + 2.0)))


def test_linear_model_values():
    lin = linear_model(0, 1.0, slope=2.0, quad=0.5)
    assert forward_eval(lin, 3.0, 0.5)[0] == pytest.approx(2.0 * 3.0 * 0.5 + 0.5 * 9.0 * 0.5)


def test_model_rejects_bad_cost():
    with pytest.raises(ValueError):
        linear_model(0, cost=0.0)


def _table_file(tmp_path, rows, header="sample_index,design_index,theta_0,y_0"):
    p = tmp_path / "table.csv"
    p.write_text("\n".join([header] + rows) + "\n")
    return p


def _manifest(designs=(0.0, 1.0)):
    return TableManifest(n_theta=1, n_y=1, designs=np.array(designs), cost=0.5)


def test_tabulated_lookup(tmp_path):
    rows = [f"{s},{d},{0.1 * (s + 1)},{10 * s + d}" for s in range(3) for d in range(2)]
    model = load_tabulated_model(_table_file(tmp_path, rows), _manifest())
    assert model.n_samples == 3 and model.cost == 0.5
    assert model.lookup(2, 1)[0] == 21.0
    assert forward_eval(model, 0.30000000000000004, 1.0)[0] == 21.0
    with pytest.raises(LookupError):
        forward_eval(model, 0.25, 1.0)
    with pytest.raises(LookupError):
        forward_eval(model, 0.1, 0.5)
    with pytest.raises(LookupError):
        model.lookup(3, 0)


def test_tabulated_missing_row(tmp_path):
    rows = [f"{s},{d},{0.1 * (s + 1)},{s}" for s in range(3) for d in range(2) if (s, d) != (2, 1)]
    with pytest.raises(ValueError, match=r"missing rows.*\(2, 1\)"):
        load_tabulated_model(_table_file(tmp_path, rows), _manifest())


def test_tabulated_empty_and_malformed(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ValueError, match="no rows"):
        load_tabulated_model(p, _manifest())
    with pytest.raises(ValueError, match="no rows"):
        load_tabulated_model(_table_file(tmp_path, []), _manifest())
    with pytest.raises(ValueError, match="malformed header"):
        load_tabulated_model(_table_file(tmp_path, ["0,0,0.1,1"], header="s,d,t,y"), _manifest((0.0,)))


def test_tabulated_duplicates_and_nan(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        load_tabulated_model(_table_file(tmp_path, ["0,0,0.1,1", "0,0,0.1,2"]), _manifest((0.0,)))
    with pytest.raises(ValueError, match="NaN"):
        load_tabulated_model(_table_file(tmp_path, ["0,0,0.1,nan"]), _manifest((0.0,)))


def test_tabulated_write_read_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    thetas = gen.uniform(size=(5, 2))
    values = gen.normal(size=(5, 3, 2))
    path = tmp_path / "t.csv"
    write_tabulated_model(path, thetas, values)
    m = load_tabulated_model(path, TableManifest(2, 2, np.array([0.0, 0.5, 1.0]), 1.0))
    np.testing.assert_array_equal(m.thetas, thetas)
    np.testing.assert_array_equal(m.values, values)
    np.testing.assert_array_equal(m.evaluate(thetas[[4, 1]], [1.0, 0.0]), values[[4, 1]][:, [2, 0]])


def test_tabulated_rejects_duplicate_parameters():
    with pytest.raises(ValueError):
        TabulatedModel(0, 1.0, [[0.1], [0.1]], [0.0], np.zeros((2, 1, 1)))
