import math

import numpy as np
import pytest

from conductance_lab.config import ExperimentSpec, validate
from conductance_lab.estimators import (GirsanovDegeneracyError, EstimatorError, apriori_probes, einstein_report,
                                        estimate_lambda_f, estimate_sigma, estimate_speed, estimate_steady_state,
                                        gap_monotone, homogeneous_speed, maxima_moment_probe, power_law_slope,
                                        probe_hitting, probe_orthogonality, probe_paths, regen_diagnostics,
                                        regen_report, steady_state_expansion_report, torus_average)
from conductance_lab.lattice import BiasSpec, sample_periodic
from conductance_lab.walk import LocalFunction


def spec(**kw):
    base = dict(dimension=2, kappa=2.0, seed=2024, lambdas=(0.2,), replicas=2000)
    base.update(kw)
    return validate(ExperimentSpec(**base))


HOM = dict(law="constant", law_param=1.0)


def test_speed_homogeneous():
    s = spec(**HOM, replicas=4000, horizon_scale=40)
    v = estimate_speed(s, 0.2)
    assert abs(v.value[0] - math.tanh(0.1)) <= 4 * v.stderr[0]
    assert abs(v.value[1]) <= 4 * v.stderr[1]
    assert homogeneous_speed(0.2, 2) == pytest.approx(math.tanh(0.1), rel=1e-14)


def test_speed_needs_positive_lambda():
    with pytest.raises(EstimatorError):
        estimate_speed(spec(), 0.0)


def test_speed_routes_agree():
    s = spec(lambdas=(0.1,), replicas=3000, horizon_scale=100, regen_replicas=30, horizon=60_000)
    lln = estimate_speed(s.replace(horizon=None), 0.1)
    reg = estimate_speed(s, 0.1, route="regen")
    z = (lln.value[0] - reg.value[0]) / math.hypot(lln.stderr[0], reg.stderr[0])
    assert abs(z) <= 4
    assert abs(reg.value[1]) <= 4 * reg.stderr[1]


@pytest.mark.parametrize("law", ["two_point", "uniform"])
def test_speed_sandwich(law):
    s = spec(law=law, lambdas=(0.05, 0.1, 0.2), regen_replicas=8, horizon_scale=300)
    lo = 0.1 / (2 * s.dimension * s.kappa**2)
    for i, lam in enumerate(s.lambdas):
        v = estimate_speed(s, lam, route="regen", lam_index=i)
        assert lo <= v.value[0] / lam <= 1.0


def test_sigma_homogeneous():
    sig = estimate_sigma(spec(**HOM, replicas=20_000, sigma_horizon=200))
    assert np.allclose(sig.value, sig.value.T)
    assert np.all(np.abs(sig.value - 0.5 * np.eye(2)) <= 4 * sig.stderr)


def test_sigma_axes_exchangeable():
    sig = estimate_sigma(spec(replicas=20_000, sigma_horizon=200))
    a, b = sig.value[0, 0], sig.value[1, 1]
    assert abs(a - b) <= 4 * math.hypot(sig.stderr[0, 0], sig.stderr[1, 1])
    assert np.all(np.linalg.eigvalsh(sig.value) >= 0)
    assert abs(sig.value[0, 1]) <= 4 * sig.stderr[0, 1]


@pytest.mark.parametrize("route", ["timeavg", "regen", "torus_oracle"])
def test_steady_constant_f_exact(route):
    est = estimate_steady_state(spec(), 0.2, LocalFunction.constant(2, 1.75), route)
    assert est.value == 1.75 and est.stderr == 0.0


def test_steady_q0_density_unbiased_torus():
    s = spec(replicas=400, sigma_horizon=20_000)
    env = sample_periodic(s.field(), 4)
    f = LocalFunction.q0_density(s.field())
    exact = torus_average(env, s.bias(0.0), f)
    est = estimate_steady_state(s, 0.0, f, "timeavg", torus=env)
    assert abs(est.value - exact) <= 4 * est.stderr


def test_steady_torus_timeavg_matches_oracle():
    s = spec(replicas=400, horizon=50_000)
    env = sample_periodic(s.field(), 3)
    f = LocalFunction.bond(2, 0)
    exact = estimate_steady_state(s, 0.2, f, "torus_oracle", torus=env)
    est = estimate_steady_state(s, 0.2, f, "timeavg", torus=env)
    assert abs(est.value - exact.value) <= 4 * est.stderr


def test_steady_regen_matches_timeavg():
    s = spec(replicas=400, horizon=40_000, regen_replicas=20)
    f = LocalFunction.bond(2, 0)
    a = estimate_steady_state(s, 0.2, f, "timeavg")
    b = estimate_steady_state(s, 0.2, f, "regen")
    assert abs(a.value - b.value) <= 4 * math.hypot(a.stderr, b.stderr)


@pytest.mark.parametrize("route", ["clt_cov", "girsanov"])
def test_lambda_f_exact_zeros(route):
    det = spec(law="two_point", law_param=1.0)
    assert estimate_lambda_f(det, route=route).value == 0.0
    assert estimate_lambda_f(spec(), LocalFunction.constant(2, 3.0), route=route).value == 0.0


def test_lambda_f_clt_stable_in_lambda():
    s = spec(dimension=3, replicas=40_000)
    f = LocalFunction.bond(3, 0)
    a = estimate_lambda_f(s, f, lams=[0.2])
    b = estimate_lambda_f(s, f, lams=[0.1])
    assert abs(a.value - b.value) <= 4 * math.hypot(a.stderr, b.stderr)
    assert a.value < 0


def test_girsanov_normalization_and_degeneracy():
    s = spec(dimension=3, replicas=50_000)
    g = estimate_lambda_f(s, LocalFunction.bond(3, 0), "girsanov", lams=[0.2], t=1.0)
    assert abs(g.notes["weight_mean"] - 1.0) <= 4 * g.notes["weight_mean_stderr"]
    assert g.notes["ess"] > 0.05
    with pytest.raises(GirsanovDegeneracyError):
        estimate_lambda_f(spec(kappa=5.0, replicas=2000), LocalFunction.bond(2, 0), "girsanov", lams=[0.5], t=60.0)


def test_estimates_deterministic():
    s = spec(replicas=300)
    a = estimate_speed(s, 0.2)
    b = estimate_speed(s, 0.2)
    assert np.array_equal(a.value, b.value) and np.array_equal(a.stderr, b.stderr)
    c = estimate_lambda_f(spec(dimension=3, replicas=300), route="clt_cov")
    d = estimate_lambda_f(spec(dimension=3, replicas=300), route="clt_cov")
    assert c.value == d.value


# ---- reports


def test_gap_monotone():
    assert gap_monotone([0.05, 0.1, 0.2], [0.01, 0.02, 0.05], [0.001] * 3)
    assert not gap_monotone([0.05, 0.1, 0.2], [0.05, 0.02, 0.01], [0.001] * 3)


def test_einstein_homogeneous_closed_form():
    s = spec(**HOM, lambdas=(0.05, 0.1, 0.2), replicas=3000, horizon_scale=20, sigma_horizon=100)
    rep = einstein_report(s)
    rows = [r for r in rep.rows if r["component"] == 0]
    for r in rows:
        assert r["closed_form"] == pytest.approx(math.tanh(r["lam"] / 2))
        assert abs(r["v"] - r["closed_form"]) <= 4 * r["v_stderr"]
    assert 0.5 - homogeneous_speed(0.1, 2) / 0.1 == pytest.approx(4.1625e-4, abs=1e-8)
    for r in rep.rows:
        if r["component"] == 1:
            assert abs(r["v"]) <= 4 * r["v_stderr"]
    assert rep.passed


def test_expansion_constant_and_deterministic():
    rep = steady_state_expansion_report(spec(lambdas=(0.1, 0.2)), LocalFunction.constant(2, 2.0))
    assert all(r["expansion"] == 0.0 for r in rep.rows)
    rep = steady_state_expansion_report(spec(lambdas=(0.1, 0.2), law="two_point", law_param=1.0))
    assert all(abs(r["expansion"]) <= 4 * r["expansion_stderr"] + 1e-300 for r in rep.rows)
    assert rep.passed and rep.info["exploratory"]


# ---- probes


def test_probes_d2():
    s = spec(lambdas=(0.1,), L0=1, probe_walks=1000, replicas=2000, sigma_horizon=400)
    a = probe_hitting(s, 0.1)
    assert a["ok"] and a["unfinished"] == 0
    bcd = probe_paths(s, 0.1)
    row4 = [r for r in bcd["backtrack"] if r["n"] == 4][0]
    assert row4["p"] <= 0.0625 + 4 * row4["stderr"]
    tails = [r["p"] for r in bcd["level_tails"]["rows"]]
    assert tails[-1] <= tails[0] + 0.05
    e = probe_orthogonality(s)
    assert abs(e["t"]) <= 4
    rep = apriori_probes(s)
    assert set(rep.checks) == {"a", "b", "d", "e"}


def test_power_law_slope_exact():
    n = np.array([8.0, 16, 32, 64, 128])
    b, se = power_law_slope(n, 3.0 * n**-1.5, 0.01 * 3.0 * n**-1.5)
    assert b == pytest.approx(-1.5, abs=1e-6)


def test_maxima_zero_and_displacement():
    s = spec(lambdas=(0.2,), replicas=2000)
    z = maxima_moment_probe(s, "zero")
    assert all(r["norm"] == 0 for r in z["rows"]) and z["ok"]
    d = maxima_moment_probe(s, "displacement")
    norms = [r["norm"] for r in d["rows"]]
    assert np.all(np.diff(norms) > 0)
    assert d["ok"]
    # O(n): the norm per unit n stays bounded
    assert norms[-1] / 8 <= 2 * norms[0]
    with pytest.raises(EstimatorError):
        maxima_moment_probe(s, "bogus")


def test_maxima_centered_f_d3():
    s = spec(dimension=3, lambdas=(0.2,), replicas=10_000)
    out = maxima_moment_probe(s, "f")
    assert out["ok"]


# ---- exact-coin diagnostics


def test_regen_diagnostics_rows():
    s = spec(lambdas=(0.25,), L0=1, cross_section=4, levels=30, regen_replicas=3)
    dg = regen_diagnostics(s, 0.25)
    rows = list(dg.csv_rows())
    assert rows[0]["k"] == 1
    for a, b in zip(rows, rows[1:]):
        assert b["k"] == (a["k"] + 1 if a["replica"] == b["replica"] else 1)
    assert np.all(dg.dx % BiasSpec.along_e1(0.25, 2, 1).L1 == 0)
    assert dg.beta <= 0.9 * 1.0
    rep = regen_report(s.replace(lambdas=(0.25, 0.3)))
    assert "exp_moments_stable" in rep.checks
