"""Acceptance criteria 1-10 at their stated tolerances and time limits.

Every test prints one ``CRITERION k: PASS|FAIL`` line with the measured
numbers, then asserts.
"""

import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conductance_lab import _core as C
from conductance_lab.cli import main
from conductance_lab.config import ExperimentSpec, validate
from conductance_lab.estimators import (einstein_report, estimate_lambda_f, estimate_sigma, estimate_speed,
                                        estimate_steady_state, probe_hitting, probe_paths, probe_variance_decay,
                                        regen_report, torus_average)
from conductance_lab.lattice import BiasSpec, ConductanceField, sample_periodic
from conductance_lab.oracle import (enumerate_paths_expectation, girsanov_functional, hitting_distribution,
                                    martingale_functional)
from conductance_lab.regeneration import SlabProblem, calibrate_L0, mu_decomposition
from conductance_lab.walk import LocalFunction

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def spec(**kw):
    base = dict(dimension=2, kappa=2.0, seed=20240611)
    base.update(kw)
    return validate(ExperimentSpec(**base))


@pytest.fixture
def verdict(capsys):
    start = time.perf_counter()

    def record(k, ok, limit, detail):
        elapsed = time.perf_counter() - start
        passed = bool(ok) and (limit is None or elapsed <= limit)
        budget = "" if limit is None else f" / {limit:.0f}s"
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if passed else 'FAIL'} [{elapsed:.1f}s{budget}] {detail}")
        assert ok, detail
        assert limit is None or elapsed <= limit, f"runtime {elapsed:.1f}s over {limit}s"

    return record


def test_criterion_1_homogeneous_closed_form(verdict):
    s = spec(law="constant", law_param=1.0, lambdas=(0.2,), replicas=100_000, horizon=10_000)
    v = estimate_speed(s, 0.2)
    target = math.tanh(0.1)
    z = (v.value[0] - target) / v.stderr[0]
    verdict(1, abs(z) <= 4, 120, f"v.e1={v.value[0]:.6f}+-{v.stderr[0]:.1e} tanh(0.1)={target:.6f} z={z:+.2f}")


def test_criterion_2_einstein(verdict):
    s = spec(lambdas=(0.05, 0.1, 0.2), replicas=10_000, horizon_scale=250)
    # the diffusivity error dominates, so it gets the larger replica budget
    sigma = estimate_sigma(s.replace(replicas=100_000), horizon=10_000)
    rep = einstein_report(s, sigma=sigma)
    sl = rep.info["slopes"][0]
    gaps = [f"{r['lam']}:{r['gap']:.4f}" for r in rep.rows if r["component"] == 0]
    ok = rep.checks["slope_matches_sigma"] and rep.checks["gap_non_increasing"]
    verdict(2, ok, 900, f"slope={sl['slope']:.4f}+-{sl['slope_stderr']:.1e} "
                        f"Sigma11={sl['sigma_ell']:.4f}+-{sl['sigma_ell_stderr']:.1e} z={sl['z']:+.2f} gaps {gaps}")


def test_criterion_3_steady_state_routes(verdict):
    lam = 0.2
    f = LocalFunction.bond(2, 0)
    base = spec(lambdas=(lam,), replicas=2000, horizon_scale=400)
    torus = sample_periodic(base.field(), 3)
    exact = torus_average(torus, base.bias(lam), f)
    t_torus = estimate_steady_state(base, lam, f, "timeavg", torus=torus)
    z1 = (t_torus.value - exact) / t_torus.stderr
    t_full = estimate_steady_state(base, lam, f, "timeavg")
    regen = estimate_steady_state(base.replace(regen_replicas=40, horizon=200_000), lam, f, "regen")
    z2 = (regen.value - t_full.value) / math.hypot(regen.stderr, t_full.stderr)
    verdict(3, abs(z1) <= 4 and abs(z2) <= 4, 300,
            f"torus timeavg={t_torus.value:.5f}+-{t_torus.stderr:.1e} exact={exact:.5f} z={z1:+.2f}; "
            f"regen={regen.value:.5f}+-{regen.stderr:.1e} timeavg={t_full.value:.5f}+-{t_full.stderr:.1e} z={z2:+.2f}")


def test_criterion_4_expansion(verdict):
    base = spec(dimension=3, lambdas=(0.05, 0.1, 0.2), replicas=5000, horizon_scale=2000)
    field = base.field()
    fc = LocalFunction.bond(3, 0).centered(field)
    exp = {}
    for i, lam in ((1, 0.1), (0, 0.05)):
        q = estimate_steady_state(base, lam, fc, "timeavg", lam_index=i)
        exp[lam] = (q.value / lam, q.stderr / lam)
    big = base.replace(replicas=400_000)
    lf = estimate_lambda_f(big, fc, "clt_cov")
    i_02 = lf.notes["lambdas"].index(0.2)
    pt, pt_se = lf.notes["points"][i_02], lf.notes["point_stderr"][i_02]
    gir = estimate_lambda_f(big.replace(replicas=1_000_000), fc, "girsanov", lams=[0.2], t=1.0)

    def z(a, sa, b, sb):
        return (a - b) / math.hypot(sa, sb)

    zs = dict(exp_pair=z(*exp[0.1], *exp[0.05]),
              exp01_lf=z(*exp[0.1], lf.value, lf.stderr),
              exp005_lf=z(*exp[0.05], lf.value, lf.stderr),
              girsanov=z(gir.value, gir.stderr, pt, pt_se))
    ok = all(abs(v) <= 4 for v in zs.values())
    verdict(4, ok, 1800,
            f"exp(0.1)={exp[0.1][0]:.4f}+-{exp[0.1][1]:.1e} exp(0.05)={exp[0.05][0]:.4f}+-{exp[0.05][1]:.1e} "
            f"Lambda_f={lf.value:.4f}+-{lf.stderr:.1e} girsanov={gir.value:.4f}+-{gir.stderr:.1e} "
            f"clt(0.2)={pt:.4f}+-{pt_se:.1e} z={ {k: round(v, 2) for k, v in zs.items()} }")


def test_criterion_5_girsanov_exactness(verdict):
    rng = np.random.default_rng(5)
    laws = ("two_point", "uniform", "log_uniform")
    worst_g, worst_m = 0.0, 0.0
    for i in range(50):
        d = 2 if i % 5 else 3
        n = int(rng.integers(1, 7 if d == 2 else 5))
        kappa = float(rng.uniform(1.5, 5.0))
        lam = float(rng.uniform(0.01, 0.5))
        # ell . e_1 must be the largest coordinate
        ell = -np.sort(-np.abs(rng.normal(size=d)))
        field = ConductanceField(d, kappa, laws[i % 3], seed=int(rng.integers(0, 2**63)))
        b = BiasSpec(lam, tuple(ell), 1)
        b0 = BiasSpec(0.0, tuple(ell), 1)
        start = np.zeros(d, dtype=np.int64)
        worst_g = max(worst_g, abs(enumerate_paths_expectation(field, b0, start, n, girsanov_functional(b)) - 1.0))
        worst_m = max(worst_m, abs(enumerate_paths_expectation(field, b, start, n, martingale_functional(b))))
    verdict(5, worst_g <= 1e-10 and worst_m <= 1e-10, 10,
            f"max|E[G]-1|={worst_g:.1e} max|E[M_n]|={worst_m:.1e} over 50 fields")


def test_criterion_6_exit_law(verdict):
    field = ConductanceField(2, 2.0, "uniform", seed=31337)
    b = BiasSpec.along_e1(0.25, 2, L0=2)
    slab = SlabProblem.for_level(field, b, 4, 0)
    start = slab.index(0, (1,))
    nu = hitting_distribution(slab.network(), start)
    R = 100_000
    keys = np.array([C.derive_key(np.uint64(4242), C.TAG_WALK, np.uint64(r)) for r in range(R)], dtype=np.uint64)
    ex = slab.mc_exit(start, keys)
    freq = np.bincount(ex, minlength=nu.size) / R
    sig = np.sqrt(np.maximum(nu * (1 - nu), 1.0 / R) / R)
    zmax = float(np.max(np.abs(freq - nu) / sig))
    dec = mu_decomposition(slab, (1,))
    mix = float(np.max(np.abs(dec.beta * dec.mu1 + (1 - dec.beta) * dec.mu0 - dec.nu)))
    verdict(6, zmax <= 4 and mix <= 1e-12 and np.all(ex >= 0), 60,
            f"max site z={zmax:.2f} mixture residual={mix:.1e} beta={dec.beta:.4f}")


def test_criterion_7_apriori_probes(verdict):
    lam = 0.1
    base = spec(lambdas=(lam,), probe_walks=20_000)
    cal = calibrate_L0(base.field(), lam)
    assert cal.L0 is not None
    s = base.replace(L0=cal.L0)
    a = probe_hitting(s, lam)
    bd = probe_paths(s, lam)
    ok_b = all(r["ok"] for r in bd["backtrack"])
    ok_d = all(bd["moments_flat"].values())
    back = " ".join(f"{r['p']:.4f}" for r in bd["backtrack"])
    verdict(7, a["ok"] and ok_b and ok_d, 600,
            f"L0={cal.L0} P(T1<T-1)={a['p']:.4f}+-{a['stderr']:.1e} backtrack[{back}] flat={bd['moments_flat']}")


def test_criterion_8_regeneration_structure(verdict):
    s = spec(lambdas=(0.1, 0.15, 0.2), L0=2, cross_section=8, regen_replicas=20, levels=150)
    rep = regen_report(s)
    lag = " ".join(f"{r['lam']}:{r['lag2']:+.3f}+-{r['lag2_stderr']:.3f}" for r in rep.rows)
    em = " ".join(f"{r['lam']}:({r['exp_x']:.3f},{r['exp_t']:.3f})" for r in rep.rows)
    verdict(8, rep.passed, 600, f"lag2 {lag}; exp moments {em}; blocks {[r['blocks'] for r in rep.rows]}")


def test_criterion_9_variance_decay(verdict):
    s = spec(dimension=3, lambdas=(0.1,), nested_inner=64, nested_checkpoints=(8, 16, 32, 64, 128))
    out = probe_variance_decay(s, LocalFunction.bond(3, 0), replicas=120_000)
    verdict(9, out["ok"], 1200, f"slope={out['slope']:.3f}+-{out['slope_stderr']:.2f} bound={out['bound']:.2f}")


@pytest.mark.parametrize("name", ["einstein_homogeneous.yaml", "probes_d2.yaml", "regen_d2.yaml"])
def test_criterion_10_determinism(verdict, tmp_path, name):
    codes = [main(["run", "--config", str(CONFIGS / name), "--out", str(tmp_path / str(k))]) for k in (0, 1)]
    same = filecmp.cmp(tmp_path / "0" / "results.csv", tmp_path / "1" / "results.csv", shallow=False)
    verdict(10, same and codes == [0, 0], None, f"{name} exit codes {codes} identical CSV={same}")
