import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conductance_lab.stats import (Estimate, combined_z, covariance_estimate, ess_fraction, fit_line,
                                   fit_through_origin, lag_products_stderr, mean_estimate, ratio_estimate)


def test_estimate_validation():
    with pytest.raises(ValueError):
        Estimate(1.0, -0.1, 3, "x")
    e = Estimate(1.0, 0.1, 3, "x")
    assert e.z_against(0.8) == pytest.approx(2.0)
    assert e.within(0.7, k=4) and not e.within(0.5, k=4)
    assert Estimate(2.0, 0.0, 1, "x").z_against(2.0) == 0.0
    assert combined_z(Estimate(1.0, 0.3, 2, "a"), Estimate(0.5, 0.4, 2, "b")) == pytest.approx(1.0)


def test_mean_estimate_plain(rng):
    x = rng.normal(3.0, 2.0, 1000)
    e = mean_estimate(x)
    assert e.value == pytest.approx(x.mean())
    assert e.stderr == pytest.approx(x.std(ddof=1) / np.sqrt(1000))


@given(arrays(float, 50, elements=st.floats(-10, 10)), st.floats(0.1, 10))
def test_equal_weights_reduce_to_plain(x, w):
    a = mean_estimate(x)
    b = mean_estimate(x, weights=np.full(50, w))
    assert b.value == pytest.approx(a.value, abs=1e-9)
    assert b.stderr == pytest.approx(a.stderr, abs=1e-9)


def test_weighted_mean_vectorized(rng):
    x = rng.normal(size=(500, 3))
    w = rng.uniform(0.5, 2.0, 500)
    e = mean_estimate(x, weights=w)
    assert e.value.shape == (3,)
    assert np.allclose(e.value, (w[:, None] * x).sum(0) / w.sum())


def test_ess():
    assert ess_fraction(np.ones(10)) == pytest.approx(1.0)
    assert ess_fraction([1.0] + [0.0] * 9) == pytest.approx(0.1)


def test_ratio_stderr_calibrated(rng):
    reps = []
    ses = []
    for _ in range(400):
        B = rng.exponential(10.0, 200) + 1
        A = 0.3 * B + rng.normal(0, 2.0, 200)
        e = ratio_estimate(A, B)
        reps.append(e.value)
        ses.append(e.stderr)
    assert np.std(reps) == pytest.approx(np.mean(ses), rel=0.15)


def test_ratio_stderr_one_dependent(rng):
    reps, ses, ses_iid = [], [], []
    for _ in range(400):
        z = rng.normal(size=(10, 41))
        noise = (z[:, 1:] + 0.9 * z[:, :-1]).ravel()
        B = np.ones(noise.size)
        A = 0.5 + noise
        g = np.repeat(np.arange(10), 40)
        reps.append(ratio_estimate(A, B, groups=g).value)
        ses.append(ratio_estimate(A, B, groups=g).stderr)
        ses_iid.append(ratio_estimate(A, B).stderr)
    assert np.std(reps) == pytest.approx(np.mean(ses), rel=0.15)
    assert np.mean(ses_iid) < 0.8 * np.std(reps)


def test_covariance_estimate(rng):
    vals, ses = [], []
    for _ in range(300):
        x = rng.normal(size=500)
        y = 0.4 * x + rng.normal(size=500)
        c = covariance_estimate(x, y, weights=rng.uniform(0.5, 1.5, 500))
        vals.append(c.value)
        ses.append(c.stderr)
    assert np.mean(vals) == pytest.approx(0.4, abs=4 * np.std(vals) / np.sqrt(300))
    assert np.std(vals) == pytest.approx(np.mean(ses), rel=0.2)


def test_fits_exact():
    x = np.array([0.05, 0.1, 0.2])
    b, se = fit_through_origin(x, 0.4 * x, np.full(3, 0.01))
    assert b == pytest.approx(0.4) and se > 0
    beta, se2 = fit_line(x, 1.0 - 2.0 * x, np.full(3, 0.01))
    assert np.allclose(beta, [1.0, -2.0])
    assert np.all(se2 > 0)


def test_lag_products_null(rng):
    x = rng.normal(size=20_000)
    g = np.repeat(np.arange(20), 1000)
    rho, se = lag_products_stderr(x, g)
    assert abs(rho) <= 4 * se
