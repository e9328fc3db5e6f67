import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conductance_lab.lattice import BiasSpec, ConductanceField, sample_periodic
from conductance_lab.oracle import (FiniteNetwork, OracleError, crossing_probability, dirichlet_energy,
                                    enumerate_paths_expectation, girsanov_functional, harnack_ratio,
                                    hitting_distribution, martingale_functional, parabolic_harnack_ratio,
                                    periodic_stationary, torus_transition_matrix)

seeds = st.integers(0, 2**64 - 1)


def three_node():
    return FiniteNetwork.path_graph([1.0, 2.0])


def test_three_node_hitting():
    assert np.allclose(hitting_distribution(three_node(), 1), [1 / 3, 2 / 3], atol=1e-15)
    assert crossing_probability(three_node(), 1, [2], [0]) == pytest.approx(2 / 3, abs=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 10])
def test_symmetric_interval(n):
    net = FiniteNetwork.path_graph(np.full(2 * n, 1.7))
    assert np.allclose(hitting_distribution(net, n), [0.5, 0.5], atol=1e-12)
    assert crossing_probability(net, n, [2 * n], [0]) == pytest.approx(0.5, abs=1e-12)


def test_tilted_ruin_closed_form():
    lam = 0.25
    net = FiniteNetwork.path_graph(np.exp(lam * (2 * np.arange(4) + 1)))
    rho = math.exp(-2 * lam)
    assert crossing_probability(net, 1, [4], [0]) == pytest.approx((1 - rho) / (1 - rho**4), abs=1e-13)


def test_oracle_errors():
    net = three_node()
    with pytest.raises(OracleError):
        hitting_distribution(net, 0)
    with pytest.raises(OracleError):
        crossing_probability(net, 1, [2], [2])
    with pytest.raises(OracleError):
        FiniteNetwork(2, [[0, 1]], [0.0], [True, False])


def random_network(seed, n=12, extra=10):
    rng = np.random.default_rng(seed)
    edges = [(i, i + 1) for i in range(n - 1)]
    for _ in range(extra):
        i, j = rng.choice(n, 2, replace=False)
        edges.append((int(min(i, j)), int(max(i, j))))
    w = rng.uniform(0.5, 2.0, len(edges))
    ab = np.zeros(n, dtype=bool)
    ab[[0, n - 1]] = True
    return FiniteNetwork(n, edges, w, ab)


@given(st.integers(0, 2**32 - 1))
def test_maximum_principle(seed):
    net = random_network(seed)
    for s in range(1, 11):
        dist = hitting_distribution(net, s)
        assert np.all((dist >= -1e-15) & (dist <= 1 + 1e-15))
        assert dist.sum() == pytest.approx(1.0, abs=1e-12)
    u = net.harmonic_extension(np.array([0.0, 1.0]))
    assert np.all((u[1:-1] > 0) & (u[1:-1] < 1))


@given(st.integers(0, 2**32 - 1))
def test_dirichlet_principle(seed):
    net = random_network(seed)
    u = net.harmonic_extension(np.array([0.0, 1.0]))
    e0 = dirichlet_energy(net, u)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        v = u.copy()
        v[1:-1] += rng.normal(0, 0.3, net.n_sites - 2)
        assert dirichlet_energy(net, v) >= e0 - 1e-12


def test_dirichlet_trivial():
    net = FiniteNetwork(2, [[0, 1]], [3.0], [False, False])
    assert dirichlet_energy(net, [0.0, 1.0]) == 3.0
    assert dirichlet_energy(random_network(1), np.full(12, 2.5)) == 0.0


# ---- stationary laws


def test_stationary_single_site():
    env = sample_periodic(ConductanceField(2, 2.0, "uniform", seed=1), 1)
    sol = periodic_stationary(env, BiasSpec.along_e1(0.3, 2))
    assert np.allclose(sol.pi, [1.0])


@given(seeds, st.integers(2, 5))
def test_stationary_unbiased_is_conductance_sum(seed, n):
    env = sample_periodic(ConductanceField(2, 2.0, "uniform", seed=seed), n)
    sol = periodic_stationary(env, BiasSpec.along_e1(0.0, 2))
    deg = sum(env.table[a] + np.roll(env.table[a], 1, axis=a) for a in range(2)).ravel()
    assert np.max(np.abs(sol.pi - deg / deg.sum())) <= 1e-12
    assert sol.residual <= 1e-12


@given(seeds, st.integers(2, 5), st.floats(0.0, 0.5))
def test_stationary_residual(seed, n, lam):
    env = sample_periodic(ConductanceField(3, 2.0, "two_point", seed=seed), n)
    sol = periodic_stationary(env, BiasSpec.along_e1(lam, 3))
    assert sol.residual <= 1e-12
    assert np.all(sol.pi >= 0) and sol.pi.sum() == pytest.approx(1.0)
    P = torus_transition_matrix(env, BiasSpec.along_e1(lam, 3))
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)


# ---- Harnack


def box_net(seed, half=14, kappa=2.0):
    law = "constant" if seed is None else "uniform"
    f = ConductanceField(2, kappa, law, 1.0 if seed is None else None, seed=seed or 0)
    return FiniteNetwork.box(f, None, (-half, -half), (half, half),
                             absorbing=lambda c: np.abs(c).max(axis=1) == half)


def far_target_h(net, half=14):
    A = np.flatnonzero(net.absorbing)
    b = (net.coords[A, 0] == half).astype(float)
    return net.harmonic_extension(b)


def test_harnack_constant_and_scale():
    net = box_net(None)
    assert harnack_ratio(net, np.full(net.n_sites, 2.0), (0, 0), 6) == 1.0
    h = far_target_h(net)
    r = harnack_ratio(net, h, (0, 0), 6)
    assert r > 1.0
    assert harnack_ratio(net, 7.5 * h, (0, 0), 6) == pytest.approx(r, rel=1e-12)


def test_harnack_rejects_non_harmonic():
    net = box_net(None)
    h = far_target_h(net)
    h[net.n_sites // 2] *= 1.5
    with pytest.raises(OracleError):
        harnack_ratio(net, h, (0, 0), 6)


def test_harnack_stable_across_environments():
    ratios = np.array([harnack_ratio(net, far_target_h(net), (0, 0), 6)
                       for net in (box_net(1000 + s) for s in range(20))])
    assert np.all(ratios >= 1.0) and np.all(np.isfinite(ratios))
    med = np.median(ratios)
    assert np.all(np.abs(ratios / med - 1) <= 0.2)


def test_parabolic_harnack():
    net = box_net(None, half=6)
    R = 2
    T = 4 * R * R + 2
    u = np.ones((T, net.n_sites))
    assert parabolic_harnack_ratio(net, u, (0, 0), R) == pytest.approx(0.5)
    P = net.transition_matrix()
    v = np.zeros((T, net.n_sites))
    v[0, np.flatnonzero((net.coords == [0, 0]).all(axis=1))] = 1.0
    for k in range(T - 1):
        v[k + 1] = P @ v[k]
    r = parabolic_harnack_ratio(net, v, (0, 0), R)
    assert r > 0 and np.isfinite(r)


# ---- path enumeration


@pytest.mark.parametrize("n", [0, 1, 3])
def test_enumeration_total_probability(n):
    f = ConductanceField(2, 2.0, "uniform", seed=5)
    assert enumerate_paths_expectation(f, BiasSpec.along_e1(0.3, 2), (0, 0), n,
                                       lambda b: np.ones(b.codes.shape[0])) == pytest.approx(1.0, abs=1e-14)


@given(seeds, st.integers(1, 5), st.floats(0.0, 0.5), st.sampled_from([2, 3]))
def test_enumeration_girsanov_and_martingale(seed, n, lam, d):
    if d == 3:
        n = min(n, 4)
    f = ConductanceField(d, 2.0, "two_point", seed=seed)
    ell = np.zeros(d)
    ell[0] = 1.0
    b0 = BiasSpec(0.0, tuple(ell))
    b = BiasSpec(lam, tuple(ell))
    assert enumerate_paths_expectation(f, b0, np.zeros(d, int), n, girsanov_functional(b)) == pytest.approx(1.0, abs=1e-10)
    assert abs(enumerate_paths_expectation(f, b, np.zeros(d, int), n, martingale_functional(b))) <= 1e-10


def test_enumeration_cap():
    f = ConductanceField(2, 2.0, "uniform", seed=5)
    with pytest.raises(OracleError):
        enumerate_paths_expectation(f, BiasSpec.along_e1(0.1, 2), (0, 0), 7, lambda b: b.codes[:, 0])
