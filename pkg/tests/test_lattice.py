import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conductance_lab import _core as C
from conductance_lab.lattice import (Bond, BiasSpec, ConductanceField, LatticeError, as_site, conductance_at,
                                     incident_conductances, q0_density, q0_weight, sample_periodic,
                                     tilted_conductance)

LAWS = ["two_point", "uniform", "log_uniform"]
seeds = st.integers(min_value=0, max_value=2**64 - 1)
sites2 = st.tuples(st.integers(-10**6, 10**6), st.integers(-10**6, 10**6))


def test_two_point_p1_always_kappa():
    f = ConductanceField(2, 2.0, "two_point", 1.0, seed=3)
    for x in [(0, 0), (5, -7), (123, 456)]:
        assert conductance_at(f, (x, (x[0] + 1, x[1]))) == 2.0


def test_constant_law():
    f = ConductanceField(3, 2.0, "constant", 1.0, seed=1)
    assert np.all(incident_conductances(f, (4, 5, 6)) == 1.0)
    assert f.is_deterministic


def test_golden_uniform_value():
    # frozen once from an independent fresh process; any change breaks replay of old runs
    f = ConductanceField(2, 2.0, "uniform", seed=20240611)
    v = conductance_at(f, ((0, 0), (1, 0)))
    assert 0.5 <= v <= 2.0
    assert v == 1.130181364435594


def test_fresh_process_bit_exact():
    code = ("from conductance_lab.lattice import ConductanceField, conductance_at;"
            "print(repr(conductance_at(ConductanceField(2, 2.0, 'uniform', seed=20240611), ((0, 0), (1, 0)))))")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    f = ConductanceField(2, 2.0, "uniform", seed=20240611)
    assert float(out) == conductance_at(f, ((0, 0), (1, 0)))


@given(seeds, sites2, st.integers(0, 1), st.sampled_from(LAWS))
def test_symmetry_and_ellipticity(seed, x, axis, law):
    f = ConductanceField(2, 3.0, law, seed=seed)
    y = list(x)
    y[axis] += 1
    a = conductance_at(f, (x, tuple(y)))
    b = conductance_at(f, (tuple(y), x))
    assert a == b
    assert 1 / 3.0 <= a <= 3.0


def test_bond_canonical():
    assert Bond.between((1, 2), (1, 3)) == Bond.between((1, 3), (1, 2))
    assert Bond.between((1, 2), (0, 2)).base == (0, 2)
    with pytest.raises(LatticeError):
        Bond.between((0, 0), (1, 1))


@pytest.mark.parametrize("bad", [[0], [0.5, 1], [[0, 1]]])
def test_as_site_rejects(bad):
    with pytest.raises(LatticeError):
        as_site(bad)


@pytest.mark.parametrize("kw", [dict(dimension=1, kappa=2.0), dict(dimension=2, kappa=1.0),
                                dict(dimension=2, kappa=2.0, law="gauss"),
                                dict(dimension=2, kappa=2.0, law="constant", law_param=5.0)])
def test_field_validation(kw):
    with pytest.raises(LatticeError):
        ConductanceField(seed=0, **kw)


@pytest.mark.parametrize("law", LAWS)
def test_marginal_moments(law):
    f = ConductanceField(2, 2.0, law, seed=99)
    n = 200_000
    bases = np.column_stack([np.arange(n), np.zeros(n, dtype=np.int64)])
    w = f.conductances(bases, np.zeros(n, dtype=np.int64))
    m1, m2 = f.moments()
    assert abs(w.mean() - m1) <= 4 * w.std() / np.sqrt(n)
    assert abs((w**2).mean() - m2) <= 4 * (w**2).std() / np.sqrt(n)


def test_uniform_chi_square_and_decorrelation():
    f = ConductanceField(2, 2.0, "uniform", seed=777)
    n = 200_000
    bases = np.column_stack([np.arange(n) % 500, np.arange(n) // 500])
    w = f.conductances(bases, np.zeros(n, dtype=np.int64))
    counts, _ = np.histogram(w, bins=20, range=(0.5, 2.0))
    assert stats.chisquare(counts).pvalue > 1e-3
    # neighbouring bonds (x, x+e1) and (x+e1, x+2e1)
    w2 = f.conductances(bases + np.array([1, 0]), np.zeros(n, dtype=np.int64))
    r = np.corrcoef(w, w2)[0, 1]
    assert abs(r) <= 4 / np.sqrt(n)


def test_different_seeds_differ():
    a = ConductanceField(2, 2.0, "uniform", seed=1)
    b = ConductanceField(2, 2.0, "uniform", seed=2)
    bases = np.zeros((100, 2), dtype=np.int64)
    bases[:, 0] = np.arange(100)
    axes = np.zeros(100, dtype=np.int64)
    r = np.corrcoef(a.conductances(bases, axes), b.conductances(bases, axes))[0, 1]
    assert abs(r) < 0.4


def test_replica_is_independent_stream():
    f = ConductanceField(2, 2.0, "uniform", seed=1)
    assert f.replica(0).seed != f.replica(1).seed
    assert f.replica(3).seed == f.replica(3).seed


# ---- tilt


def test_zero_tilt_is_plain():
    f = ConductanceField(2, 2.0, "uniform", seed=5)
    b = BiasSpec.along_e1(0.0, 2)
    assert tilted_conductance(f, ((2, 3), (2, 4)), b) == conductance_at(f, ((2, 3), (2, 4)))


def test_homogeneous_tilt_value():
    f = ConductanceField(2, 2.0, "constant", 1.0, seed=0)
    v = tilted_conductance(f, ((0, 0), (1, 0)), BiasSpec.along_e1(0.2, 2))
    assert v == pytest.approx(np.exp(0.2), rel=1e-15)
    assert v == pytest.approx(1.2214, abs=1e-4)


@given(seeds, st.tuples(st.integers(-500, 500), st.integers(-500, 500)), st.integers(0, 1), st.floats(0.0, 0.5))
def test_tilt_factorization(seed, x, axis, lam):
    f = ConductanceField(2, 2.0, "uniform", seed=seed)
    y = list(x)
    y[axis] += 1
    b = BiasSpec(lam, (0.8, 0.6))
    ratio = tilted_conductance(f, (x, tuple(y)), b) / conductance_at(f, (x, tuple(y)))
    s = np.dot(b.ell_array, np.add(x, y))
    assert ratio == pytest.approx(np.exp(lam * s), rel=1e-12)


@pytest.mark.parametrize("lam,inv,L1", [(0.2, 5, 40), (0.15, 6, 48), (0.1, 10, 80), (0.3, 3, 24)])
def test_lambda1(lam, inv, L1):
    b = BiasSpec.along_e1(lam, 2, L0=2)
    assert b.inv_lambda1 == inv
    assert b.lambda1 >= lam
    assert b.L1 == L1


@pytest.mark.parametrize("ell", [(0.5, 1.0), (0.0, 0.0), (1.0,)])
def test_bias_rejects(ell):
    with pytest.raises(LatticeError):
        BiasSpec(0.1, ell)


def test_bias_normalizes():
    b = BiasSpec(0.1, (2.0, 1.0))
    assert np.linalg.norm(b.ell_array) == pytest.approx(1.0)


# ---- Q0 weight


def test_q0_constant_field():
    f = ConductanceField(2, 2.0, "constant", 1.0)
    assert q0_weight(f, (0, 0)) == 4.0
    assert q0_density(f, (3, 3)) == 1.0


def test_q0_all_kappa():
    f = ConductanceField(2, 2.0, "two_point", 1.0)
    assert q0_weight(f, (0, 0)) == 8.0


@given(seeds, sites2, st.sampled_from(LAWS))
def test_q0_density_bounds(seed, x, law):
    f = ConductanceField(2, 2.0, law, seed=seed)
    q = q0_density(f, x)
    assert 1 / 4.0 <= q <= 4.0


# ---- periodic


def test_periodic_n1_constant():
    env = sample_periodic(ConductanceField(2, 2.0, "uniform", seed=4), 1)
    assert env.table.shape == (2, 1, 1)


def test_periodic_p1_all_kappa():
    env = sample_periodic(ConductanceField(2, 2.0, "two_point", 1.0, seed=4), 3)
    assert np.all(env.table == 2.0)


def test_periodic_count_and_range():
    env = sample_periodic(ConductanceField(2, 2.0, "uniform", seed=8), 3)
    assert env.table.size == 18
    assert np.all((env.table >= 0.5) & (env.table <= 2.0))


def test_periodic_wraps():
    field = ConductanceField(2, 2.0, "uniform", seed=8)
    env = sample_periodic(field, 3)
    ienv, fenv = env.kernel_args()
    x = np.array([4, -2], dtype=np.int64)
    v = C.conductance(ienv, fenv, env.bkey, x, 1)
    assert v == env.table[1][1, 1]
