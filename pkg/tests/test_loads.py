import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from windsteer.loads import (
    MINIMUM_SAMPLE_SPEC, DelWindow, OracleCoefficients, SampleSpec, SurrogateNet,
    SurrogateTrainingError, constraint_delta, del_oracle, estimate_del, max_relative_error,
    rainflow_cycles, rainflow_del, relative_rmse, sample_features, train_surrogate,
    turning_points, window_features,
)
from windsteer.nncore import max_relative_error as grad_rel_error, numerical_grad


def features(u=(10.0, 10.0, 10.0, 10.0), ti=0.05, yaw=0.0):
    return np.array([*u, ti, ti, ti, ti, yaw])


# --- oracle ---------------------------------------------------------------------

def test_oracle_reference_value():
    expected = 120.0 * 10.0 ** 1.4 * 1.4
    assert del_oracle(features()) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(4219, abs=1)


def test_oracle_yaw_sign_asymmetry():
    plus, minus = del_oracle(features(yaw=20.0)), del_oracle(features(yaw=-20.0))
    assert plus > minus
    assert plus - minus == pytest.approx(2 * 120.0 * 10.0 ** 1.4 * 0.25 * (20.0 / 30.0), rel=1e-12)


def test_oracle_zero_wind():
    assert del_oracle(np.zeros(9)) == 0.0


def test_oracle_coefficients_configurable():
    coef = OracleCoefficients(c0=1.0, e1=1.0, a1=0.0, a2=0.0, a3=0.0, a4=0.0)
    assert del_oracle(features(), coef) == pytest.approx(10.0)


@given(st.floats(2.0, 20.0), st.floats(0.0, 0.3), st.floats(0.0, 0.3), st.floats(0.0, 0.5),
       st.floats(-30.0, 30.0))
def test_oracle_monotone_in_ti_and_asymmetry(U, ti, dti, asym, yaw):
    base = features((U * (1 + asym / 2), U * (1 - asym / 2), U, U), ti, yaw)
    more_ti = base.copy()
    more_ti[4:8] += dti
    more_asym = features((U * (1 + asym / 2 + 0.05), U * (1 - asym / 2 - 0.05), U, U), ti, yaw)
    assert del_oracle(more_ti) >= del_oracle(base)
    assert del_oracle(more_asym) >= del_oracle(base)
    assert del_oracle(base) > 0


@given(st.floats(1.0, 20.0), st.floats(0.0, 30.0))
def test_oracle_yaw_difference_identity(U, g):
    a = del_oracle(features((U,) * 4, 0.1, g))
    b = del_oracle(features((U,) * 4, 0.1, -g))
    assert a - b == pytest.approx(2 * 120.0 * U ** 1.4 * 0.25 * g / 30.0, rel=1e-9, abs=1e-9)


def test_oracle_vectorised():
    f = np.stack([features(yaw=y) for y in (-10.0, 0.0, 10.0)])
    out = del_oracle(f)
    assert out.shape == (3,)
    np.testing.assert_allclose(out, [del_oracle(r) for r in f])


# --- window --------------------------------------------------------------------

def test_window_constant_inflow():
    w = DelWindow(2, capacity=60)
    speeds = np.full((2, 4, 15), 9.0)
    for _ in range(80):
        w.push(speeds, np.array([5.0, -3.0]))
    f = w.features()
    np.testing.assert_allclose(f[:, :4], 9.0)
    np.testing.assert_allclose(f[:, 4:8], 0.0, atol=1e-7)
    np.testing.assert_allclose(f[:, 8], [5.0, -3.0])
    assert len(w) == 60


def test_window_partial_uses_available_entries():
    w = DelWindow(1, capacity=60)
    for _ in range(15):
        w.push(np.full((1, 4, 15), 8.0), np.zeros(1))
    for _ in range(15):
        w.push(np.full((1, 4, 15), 12.0), np.zeros(1))
    f = w.features()
    np.testing.assert_allclose(f[0, :4], 10.0)
    np.testing.assert_allclose(f[0, 4:8], 2.0 / 10.0)


def test_window_drops_old_entries():
    w = DelWindow(1, capacity=3)
    for v in (1.0, 2.0, 3.0, 4.0, 5.0):
        w.push(np.full((1, 4, 15), v), np.zeros(1))
    np.testing.assert_allclose(w.features()[0, :4], 4.0)


def test_window_shift_invariance():
    rng = np.random.default_rng(3)
    data = [rng.uniform(5, 12, (2, 4, 15)) for _ in range(60)]
    yaws = [rng.uniform(-30, 30, 2) for _ in range(60)]
    ref = DelWindow(2, 60)
    for s, y in zip(data, yaws):
        ref.push(s, y)
    for shift in (1, 17, 59):
        w = DelWindow(2, 60)
        for s, y in zip(data[:shift], yaws[:shift]):
            w.push(s * 0.5, y)  # junk that will be overwritten
        for s, y in zip(data, yaws):
            w.push(s, y)
        np.testing.assert_allclose(w.features(), ref.features(), rtol=1e-12)


def test_window_empty_raises():
    with pytest.raises(ValueError):
        DelWindow(1).features()


def test_window_features_match_function():
    rng = np.random.default_rng(1)
    w = DelWindow(3, 10)
    for _ in range(7):
        w.push(rng.uniform(5, 10, (3, 4, 15)), rng.uniform(-5, 5, 3))
    np.testing.assert_array_equal(w.features(), window_features(w.entries()))


def test_constraint_delta_arithmetic():
    base = np.array([3000.0, 3500.0, 3200.0])
    assert constraint_delta(base, base) == 0.0
    assert constraint_delta(base * 1.25, base) == pytest.approx(0.25, rel=1e-12)
    assert constraint_delta(np.array([3000.0, 3100.0, 4200.0]), base) == pytest.approx(0.2)


# --- surrogate ----------------------------------------------------------------------

def test_surrogate_fidelity(surrogate):
    fresh = sample_features(1000, MINIMUM_SAMPLE_SPEC, 12345)
    pred, ref = surrogate.predict(fresh), del_oracle(fresh)
    assert relative_rmse(pred, ref) <= 0.02
    assert max_relative_error(pred, ref) <= 0.10
    assert np.all(pred > 0)


def test_surrogate_training_reproducible():
    a = train_surrogate(n_samples=3000, seed=5, epochs=40, tol=1.0)
    b = train_surrogate(n_samples=3000, seed=5, epochs=40, tol=1.0)
    for p, q in zip(a.net.params, b.net.params):
        assert np.array_equal(p, q)


def test_surrogate_training_failure_reports_rmse():
    with pytest.raises(SurrogateTrainingError, match="final") as exc:
        train_surrogate(n_samples=200, seed=2, epochs=1, tol=1e-6)
    assert exc.value.rmse > 1e-6


def test_sample_spec_covers_minimum():
    assert SampleSpec().covers(MINIMUM_SAMPLE_SPEC)
    assert not SampleSpec(ws=(5.0, 16.0)).covers(MINIMUM_SAMPLE_SPEC)
    f = sample_features(500, MINIMUM_SAMPLE_SPEC, 0)
    U = f[:, :4].mean(axis=1)
    assert U.min() >= 4.0 - 1e-9 and U.max() <= 16.0 + 1e-9
    assert np.abs(f[:, 8]).max() <= 30.0
    asym = np.abs(f[:, 0] - f[:, 1]) / U
    assert asym.max() <= 0.3 + 1e-9


def test_surrogate_save_load(tmp_path, surrogate):
    path = tmp_path / "s.bin"
    surrogate.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"DSUR"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    back = SurrogateNet.load(path)
    f = sample_features(50, SampleSpec(), 4)
    np.testing.assert_array_equal(back.predict(f), surrogate.predict(f))


def test_surrogate_load_rejects_other_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"MNET" + bytes(40))
    with pytest.raises(OSError):
        SurrogateNet.load(p)


def test_surrogate_gradient_check(surrogate):
    rng = np.random.default_rng(0)
    net = surrogate.net.copy()
    model = SurrogateNet(net, surrogate.in_mean, surrogate.in_std, surrogate.out_scale)
    f = sample_features(5, SampleSpec(), 9)
    up = rng.standard_normal(5)
    grads, _ = model.grads(f, up)
    num = numerical_grad(lambda: float(np.sum(up * model.predict(f))), net.params, h=1e-6)
    assert grad_rel_error(grads, num, floor=1e-6) < 1e-4


def test_estimate_del_constant_window(surrogate):
    w = DelWindow(3, 60)
    speeds = np.full((3, 4, 15), 10.0)
    yaw = np.array([10.0, 0.0, -10.0])
    for _ in range(60):
        w.push(speeds, yaw)
    est = estimate_del(w, surrogate)
    np.testing.assert_allclose(est, surrogate.predict(w.features()))
    assert estimate_del(w, surrogate, 1) == pytest.approx(est[1])
    np.testing.assert_allclose(est, del_oracle(w.features()), rtol=0.10)


# --- rainflow -------------------------------------------------------------------------

def sinusoid(amplitude, cycles, per_cycle=40):
    t = np.arange(cycles * per_cycle + 1) / per_cycle
    return amplitude * np.cos(2 * np.pi * t)


def test_rainflow_sinusoid_equals_range():
    x = sinusoid(3.0, 50)
    assert rainflow_del(x, 10.0, n_ref=50) == pytest.approx(6.0, abs=1e-9)
    assert rainflow_del(x, 3.0, n_ref=50) == pytest.approx(6.0, abs=1e-9)


def test_rainflow_two_amplitude_closed_form():
    # 20 cycles of range 2 nested inside the first fall of 10 cycles of range 8
    tp = [4.0] + [-1.0, 1.0] * 20 + [-4.0] + [4.0, -4.0] * 9 + [4.0]
    x = np.interp(np.arange(10 * (len(tp) - 1) + 1) / 10.0, np.arange(len(tp)), tp)
    full, half = rainflow_cycles(x)
    assert sorted(full) == [2.0] * 20 + [8.0] * 9
    for m, n_ref in ((4.0, 30.0), (10.0, 123.0)):
        expected = ((20 * 2.0 ** m + 10 * 8.0 ** m) / n_ref) ** (1 / m)
        assert rainflow_del(x, m, n_ref) == pytest.approx(expected, abs=1e-9)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=200), st.floats(0.01, 100))
def test_rainflow_homogeneity(series, c):
    x = np.array(series)
    assert rainflow_del(c * x, 10.0) == pytest.approx(c * rainflow_del(x, 10.0), rel=1e-9,
                                                       abs=1e-9)


def test_rainflow_constant_series():
    assert rainflow_del(np.full(100, 3.0)) == 0.0


def test_rainflow_rejects_bad_input():
    with pytest.raises(ValueError):
        rainflow_del([1.0])
    with pytest.raises(ValueError):
        rainflow_del([1.0, 2.0], wohler_m=0.0)


def test_rainflow_textbook_example():
    # classic sequence from the ASTM E1049 rainflow example
    x = [-2, 1, -3, 5, -1, 3, -4, 4, -2]
    full, half = rainflow_cycles(x)
    assert list(full) == [4.0]
    assert list(half) == [3.0, 4.0, 8.0, 9.0, 8.0, 6.0]


@settings(max_examples=200)
@given(st.lists(st.integers(-50, 50), min_size=2, max_size=80))
def test_rainflow_reversal_invariance(series):
    x = np.array(series, dtype=float)
    f1, h1 = rainflow_cycles(x)
    f2, h2 = rainflow_cycles(x[::-1])
    np.testing.assert_allclose(sorted(np.concatenate([f1, f1, h1])),
                               sorted(np.concatenate([f2, f2, h2])))


def test_turning_points():
    np.testing.assert_array_equal(turning_points([0, 1, 2, 2, 1, 3, 3]), [0, 2, 1, 3])
