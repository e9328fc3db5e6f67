"""Exact solvers on finite conductance networks.

These are the ground truth for the Monte Carlo code: exit laws and crossing
probabilities of absorbing chains, stationary laws of the environment chain
on a torus, Dirichlet energies, Harnack ratios and brute-force path sums.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import BiasSpec, ConductanceField, PeriodicEnvironment, as_site
from .walk import move_vectors

DENSE_LIMIT = 5000
ENUMERATION_CAP = 6


class OracleError(ValueError):
    """Ill-posed exact problem (absorbing start, disconnected or singular system)."""


@dataclass
class FiniteNetwork:
    """Weighted undirected graph with a set of absorbing sites.

    Parameters
    ----------
    n_sites : int
    edges : (m, 2) int array
        Undirected edges ``(i, j)``, each listed once.
    weights : (m,) float array
        Positive conductances (already tilted if a bias is wanted).
    absorbing : (n_sites,) bool array
    coords : (n_sites, d) int array, optional
        Lattice positions, needed for balls and plotting.
    """

    n_sites: int
    edges: np.ndarray
    weights: np.ndarray
    absorbing: np.ndarray
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.absorbing = np.asarray(self.absorbing, dtype=bool).reshape(-1)
        if self.edges.shape[0] != self.weights.shape[0]:
            raise OracleError("one weight per edge required")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise OracleError("conductances must be positive and finite")
        if self.absorbing.shape[0] != self.n_sites:
            raise OracleError("absorbing mask has the wrong length")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.n_sites):
            raise OracleError("edge endpoint out of range")
        self._P = None

    # ---- construction helpers

    @classmethod
    def path_graph(cls, conductances, absorb_ends: bool = True) -> "FiniteNetwork":
        """Sites ``0..k`` on a line with ``c[i]`` on the edge ``(i, i+1)``."""
        c = np.asarray(conductances, dtype=float)
        k = c.size
        edges = np.column_stack([np.arange(k), np.arange(1, k + 1)])
        ab = np.zeros(k + 1, dtype=bool)
        if absorb_ends:
            ab[[0, k]] = True
        return cls(k + 1, edges, c, ab, np.arange(k + 1)[:, None])

    @classmethod
    def box(cls, field: ConductanceField, bias: BiasSpec | None, lo, hi,
            absorbing: Callable[[np.ndarray], np.ndarray] | None = None) -> "FiniteNetwork":
        """Sites of the box ``lo <= x <= hi`` with (tilted) lattice conductances.

        Bonds leaving the box are dropped. ``absorbing`` maps the ``(n, d)``
        coordinate array to a boolean mask.
        """
        lo = as_site(lo, field.dimension)
        hi = as_site(hi, field.dimension)
        shape = tuple(hi - lo + 1)
        coords = np.array(list(itertools.product(*[range(l, h + 1) for l, h in zip(lo, hi)])),
                          dtype=np.int64)
        idx = np.arange(coords.shape[0]).reshape(shape)
        edges, bases, axes = [], [], []
        for a in range(field.dimension):
            sl_lo = [slice(None)] * field.dimension
            sl_hi = [slice(None)] * field.dimension
            sl_lo[a] = slice(0, shape[a] - 1)
            sl_hi[a] = slice(1, shape[a])
            i = idx[tuple(sl_lo)].ravel()
            j = idx[tuple(sl_hi)].ravel()
            edges.append(np.column_stack([i, j]))
            bases.append(coords[i])
            axes.append(np.full(i.size, a))
        edges = np.vstack(edges)
        bases = np.vstack(bases)
        axes = np.concatenate(axes)
        w = field.conductances(bases, axes)
        if bias is not None and bias.lam > 0:
            ell = bias.ell_array
            center = 0.5 * (lo + hi)
            s = (2 * bases + np.eye(field.dimension, dtype=np.int64)[axes] - 2 * center) @ ell
            w = w * np.exp(bias.lam * s)
        ab = np.zeros(coords.shape[0], dtype=bool) if absorbing is None else np.asarray(absorbing(coords), dtype=bool)
        return cls(coords.shape[0], edges, w, ab, coords)

    # ---- linear algebra

    def weight_matrix(self) -> sp.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        W = sp.coo_matrix((np.concatenate([self.weights, self.weights]),
                           (np.concatenate([i, j]), np.concatenate([j, i]))),
                          shape=(self.n_sites, self.n_sites))
        return W.tocsr()

    def transition_matrix(self) -> sp.csr_matrix:
        if self._P is None:
            W = self.weight_matrix()
            deg = np.asarray(W.sum(axis=1)).ravel()
            if np.any(deg[~self.absorbing] == 0):
                raise OracleError("isolated non-absorbing site")
            deg[deg == 0] = 1.0
            self._P = sp.diags(1.0 / deg) @ W
            self._P = self._P.tocsr()
        return self._P

    def _blocks(self):
        P = self.transition_matrix()
        T = np.flatnonzero(~self.absorbing)
        A = np.flatnonzero(self.absorbing)
        PTT = P[T][:, T]
        PTA = P[T][:, A]
        return T, A, PTT, PTA

    def _solve(self, PTT, rhs, transpose=False):
        n = PTT.shape[0]
        Mat = sp.identity(n, format="csr") - PTT
        if transpose:
            Mat = Mat.T
        rhs = np.asarray(rhs, dtype=float)
        try:
            if n <= DENSE_LIMIT:
                return sla.solve(Mat.toarray(), rhs)
            lu = spla.splu(Mat.tocsc())
            return lu.solve(rhs)
        except (sla.LinAlgError, RuntimeError) as exc:
            raise OracleError(f"singular absorbing system: {exc}") from exc

    def harmonic_extension(self, boundary_values) -> np.ndarray:
        """``u = b`` on absorbing sites and ``u = P u`` elsewhere."""
        T, A, PTT, PTA = self._blocks()
        b = np.asarray(boundary_values, dtype=float)
        if b.shape[0] == self.n_sites:
            b = b[A]
        u = np.empty(self.n_sites)
        u[A] = b
        u[T] = self._solve(PTT, PTA @ b)
        return u


def hitting_distribution(net: FiniteNetwork, start: int) -> np.ndarray:
    """Law of the first absorbing site hit from ``start``.

    Returned over ``np.flatnonzero(net.absorbing)`` in index order.
    """
    if net.absorbing[start]:
        raise OracleError("start site is absorbing")
    T, A, PTT, PTA = net._blocks()
    pos = np.searchsorted(T, start)
    e = np.zeros(T.size)
    e[pos] = 1.0
    # one adjoint solve gives the Green's function row of the start
    g = net._solve(PTT, e, transpose=True)
    dist = PTA.T @ g
    dist = np.asarray(dist).ravel()
    total = dist.sum()
    if not np.isfinite(total) or abs(total - 1.0) > 1e-9:
        raise OracleError(f"start cannot reach the absorbing set (mass {total:.3g})")
    return dist


def crossing_probability(net: FiniteNetwork, start: int, right_set, left_set) -> float:
    """``P(hit right_set before left_set)``; both sets must be absorbing and disjoint."""
    right = np.zeros(net.n_sites, dtype=bool)
    left = np.zeros(net.n_sites, dtype=bool)
    right[np.asarray(right_set, dtype=np.int64)] = True
    left[np.asarray(left_set, dtype=np.int64)] = True
    if np.any(right & left):
        raise OracleError("right and left sets overlap")
    if not np.all(net.absorbing[right | left]):
        raise OracleError("right and left sets must be absorbing")
    if net.absorbing[start]:
        raise OracleError("start site is absorbing")
    A = np.flatnonzero(net.absorbing)
    dist = hitting_distribution(net, start)
    return float(dist[right[A]].sum())


@dataclass
class StationarySolution:
    pi: np.ndarray
    residual: float
    sites: np.ndarray


def torus_transition_matrix(env: PeriodicEnvironment, bias: BiasSpec) -> sp.csr_matrix:
    """Chain on torus sites with ``p(x, x+e)`` proportional to ``omega(x, x+e) exp(lambda ell . e)``."""
    n, d = env.period, env.dimension
    sites = env.sites()
    N = sites.shape[0]
    tilt = bias.move_tilts()
    rows, cols, vals = [], [], []
    idx = np.arange(N).reshape((n,) * d)
    for a in range(d):
        fwd = np.roll(idx, -1, axis=a).ravel()
        bwd = np.roll(idx, 1, axis=a).ravel()
        c_plus = env.table[a].ravel()
        c_minus = np.roll(env.table[a], 1, axis=a).ravel()
        rows += [np.arange(N), np.arange(N)]
        cols += [fwd, bwd]
        vals += [c_plus * tilt[2 * a], c_minus * tilt[2 * a + 1]]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    P = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()
    P.sum_duplicates()
    deg = np.asarray(P.sum(axis=1)).ravel()
    return (sp.diags(1.0 / deg) @ P).tocsr()


def periodic_stationary(env: PeriodicEnvironment, bias: BiasSpec) -> StationarySolution:
    """Stationary law of the walk on the torus, i.e. of the environment chain."""
    if len(bias.ell) != env.dimension:
        raise OracleError("bias dimension does not match the environment")
    P = torus_transition_matrix(env, bias)
    N = P.shape[0]
    A = (P.T - sp.identity(N, format="csr")).tolil()
    A[N - 1, :] = np.ones(N)
    b = np.zeros(N)
    b[N - 1] = 1.0
    if N <= DENSE_LIMIT:
        pi = sla.solve(A.toarray(), b)
    else:
        pi = spla.spsolve(A.tocsc(), b)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    residual = float(np.max(np.abs(P.T @ pi - pi)))
    return StationarySolution(pi, residual, env.sites())


def dirichlet_energy(net: FiniteNetwork, h, region=None) -> float:
    """``sum_{xy} c(x, y) (h(x) - h(y))^2`` over edges touching ``region``.

    ``region`` is a boolean site mask; all edges count when it is omitted.
    """
    h = np.asarray(h, dtype=float)
    i, j = net.edges[:, 0], net.edges[:, 1]
    keep = np.ones(i.size, dtype=bool) if region is None else (np.asarray(region)[i] | np.asarray(region)[j])
    return float(np.sum(net.weights[keep] * (h[i[keep]] - h[j[keep]]) ** 2))


def _ball(net: FiniteNetwork, center, R):
    if net.coords is None:
        raise OracleError("network has no coordinates")
    return np.linalg.norm(net.coords - np.asarray(center)[None, :], axis=1) <= R


def harnack_ratio(net: FiniteNetwork, h, center, R: float, tol: float = 1e-10) -> float:
    """``max / min`` of a positive harmonic function over the ``R``-ball.

    ``h`` must be positive on the ``2R``-ball and solve ``h = P h`` at every
    non-absorbing site of it.
    """
    h = np.asarray(h, dtype=float)
    big = _ball(net, center, 2 * R)
    small = _ball(net, center, R)
    if np.any(h[big] <= 0):
        raise OracleError("h must be positive on the 2R-ball")
    P = net.transition_matrix()
    interior = big & ~net.absorbing
    res = np.abs(h - P @ h)[interior]
    if res.size and res.max() > tol * max(1.0, np.abs(h[big]).max()):
        raise OracleError(f"h is not harmonic on the 2R-ball (residual {res.max():.2e})")
    return float(h[small].max() / h[small].min())


def parabolic_harnack_ratio(net: FiniteNetwork, u, center, R: int, tol: float = 1e-10) -> float:
    """Space-time Harnack ratio for a caloric ``u[n, x]``.

    ``u`` must satisfy ``u[n+1] = P u[n]`` on the ``2R``-ball for
    ``0 <= n <= 4R^2``. Returns the max of ``u`` over ``B_R x [R, 2R^2]``
    divided by the min of ``u[n] + u[n+1]`` over ``B_R x [3R^2, 4R^2]``.
    """
    u = np.asarray(u, dtype=float)
    R = int(R)
    if u.shape[0] < 4 * R * R + 2:
        raise OracleError("u must cover times 0..4R^2+1")
    big = _ball(net, center, 2 * R)
    small = _ball(net, center, R)
    P = net.transition_matrix()
    for n in range(4 * R * R + 1):
        res = np.abs(u[n + 1] - P @ u[n])[big & ~net.absorbing]
        if res.size and res.max() > tol * max(1.0, np.abs(u[n]).max()):
            raise OracleError(f"u violates the parabolic equation at time {n}")
    if np.any(u[: 4 * R * R + 2][:, big] < 0):
        raise OracleError("u must be nonnegative")
    top = u[R: 2 * R * R + 1][:, small].max()
    bottom = (u[3 * R * R: 4 * R * R + 1] + u[3 * R * R + 1: 4 * R * R + 2])[:, small].min()
    return float(top / bottom)


# ---------------------------------------------------------------- path enumeration


@dataclass
class PathBatch:
    """All ``(2d)^n`` paths from a start: codes, positions and local tables."""

    codes: np.ndarray        # (P, n)
    positions: np.ndarray    # (P, n+1, d)
    site_index: np.ndarray   # (P, n+1) index into the local tables
    probs: np.ndarray        # (S, 2d) jump law at each local site
    conductances: np.ndarray  # (S, 2d) incident conductances
    ell: np.ndarray


def _enumerate(field: ConductanceField, bias: BiasSpec, start, n: int) -> PathBatch:
    d = field.dimension
    start = as_site(start, d)
    codes = np.array(list(itertools.product(range(2 * d), repeat=n)), dtype=np.int64).reshape((2 * d) ** n, n)
    moves = move_vectors(d)
    pos = np.empty((codes.shape[0], n + 1, d), dtype=np.int64)
    pos[:, 0] = start
    if n:
        pos[:, 1:] = start + np.cumsum(moves[codes], axis=1)
    # local sites: the l1-ball of radius n around the start
    W = 2 * n + 1
    rel = pos - start + n
    site_index = np.ravel_multi_index(tuple(np.moveaxis(rel, -1, 0)), (W,) * d)
    grid = np.array(list(itertools.product(range(-n, n + 1), repeat=d)), dtype=np.int64) + start
    offs = np.zeros((2 * d, d), dtype=np.int64)
    offs[2 * np.arange(d) + 1, np.arange(d)] = -1
    bases = (grid[:, None, :] + offs[None, :, :]).reshape(-1, d)
    axes = np.tile(np.repeat(np.arange(d), 2), grid.shape[0])
    cond = field.conductances(bases, axes).reshape(-1, 2 * d)
    w = cond * bias.move_tilts()[None, :]
    probs = w / w.sum(axis=1, keepdims=True)
    return PathBatch(codes, pos, site_index, probs, cond, bias.ell_array)


def enumerate_paths_expectation(field: ConductanceField, bias: BiasSpec, start, n: int,
                                functional: Callable[[PathBatch], np.ndarray]) -> float:
    """Exact ``E^start_{omega,lambda}[F(X_0..X_n)]`` by summing over all paths.

    ``functional`` maps a :class:`PathBatch` to one value per path.
    """
    if not 0 <= n <= ENUMERATION_CAP:
        raise OracleError(f"path length must be in [0, {ENUMERATION_CAP}]")
    batch = _enumerate(field, bias, start, n)
    P = np.ones(batch.codes.shape[0])
    for k in range(n):
        P *= batch.probs[batch.site_index[:, k], batch.codes[:, k]]
    vals = np.asarray(functional(batch), dtype=float)
    return float(np.dot(P, vals))


def girsanov_functional(target: BiasSpec) -> Callable[[PathBatch], np.ndarray]:
    """Path functional ``dP_target/dP_0`` (the likelihood ratio against the unbiased kernel)."""
    tilt = target.move_tilts()

    def F(batch: PathBatch) -> np.ndarray:
        c = batch.conductances
        ratio = (c * tilt[None, :]).sum(axis=1) / c.sum(axis=1)
        n = batch.codes.shape[1]
        out = np.ones(batch.codes.shape[0])
        for k in range(n):
            out *= tilt[batch.codes[:, k]] / ratio[batch.site_index[:, k]]
        return out

    return F


def martingale_functional(bias: BiasSpec) -> Callable[[PathBatch], np.ndarray]:
    """Path functional ``M_n`` with local drift taken under ``bias``."""
    tilt = bias.move_tilts()

    def F(batch: PathBatch) -> np.ndarray:
        d = batch.positions.shape[2]
        w = batch.conductances * tilt[None, :]
        p = w / w.sum(axis=1, keepdims=True)
        drift = p @ move_vectors(d)
        dl = drift @ batch.ell
        n = batch.codes.shape[1]
        disp = (batch.positions[:, -1] - batch.positions[:, 0]) @ batch.ell
        return disp - dl[batch.site_index[:, :n]].sum(axis=1)

    return F
