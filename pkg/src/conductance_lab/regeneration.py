"""Hyperplane levels, coin-trick regenerations and inter-regeneration blocks.

Levels are the hyperplanes ``x . e_1 = X_0 . e_1 + m L1`` with
``L1 = 4 L0 / lambda1``. Two regeneration modes share one detector:

* exact-coin: paths are sampled level by level on a strip (torus
  cross-section), the exit point of each level is drawn from the coin mixture
  ``beta mu1 + (1 - beta) mu0`` and the path up to it is a bridge of the
  quenched walk;
* approximate-backtrack: any path, every coin counts as a success and the
  no-backtrack test is limited to the observed horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from . import _core as C
from ._kernels import crossing_batch
from .lattice import BiasSpec, ConductanceField
from .oracle import FiniteNetwork
from .walk import WalkPath, WalkStream

MODE_EXACT = "exact-coin"
MODE_APPROX = "approximate-backtrack"


class RegenerationError(RuntimeError):
    """Infeasible coin parameter, missing regenerations or a bad slab."""


# ---------------------------------------------------------------- levels


@dataclass(frozen=True)
class HyperplaneGrid:
    bias: BiasSpec
    spacing: int | None = None

    @property
    def L1(self) -> int:
        return int(self.spacing) if self.spacing is not None else self.bias.L1

    def level_of(self, disp_e1) -> np.ndarray:
        """Level index ``floor(disp / L1)`` of a displacement along e_1."""
        return np.floor_divide(disp_e1, self.L1)


def hitting_time(path: WalkPath, grid: HyperplaneGrid, m: int) -> int | None:
    """First ``n`` with ``(X_n - X_0) . e_1 = m L1``; ``None`` if not within the path."""
    e = path.e1_positions() - path.start[0]
    hit = np.flatnonzero(e == m * grid.L1)
    return int(hit[0]) if hit.size else None


@njit(cache=True)
def _level_times(e, L1):
    # first hitting time of every level 0..max reached (e[0] == 0)
    top = 0
    for t in range(e.shape[0]):
        if e[t] > top:
            top = e[t]
    nlev = top // L1 + 1
    T = -np.ones(nlev, dtype=np.int64)
    T[0] = 0
    nxt = 1
    for t in range(e.shape[0]):
        while nxt < nlev and e[t] >= nxt * L1:
            T[nxt] = t
            nxt += 1
    return T


@njit(cache=True)
def _detect(e, T, coins, L1, W):
    """Sequential candidate scan.

    A candidate is ``S = T[n+1]`` for a level ``n`` with ``coins[n] == 1`` that
    was first reached after the previous failure (or at/after the previous
    regeneration). It fails at the first later time the path is a quarter
    level below ``e[S]``; it succeeds if that never happens and at least ``W``
    steps of path follow ``S``.
    """
    n = e.shape[0] - 1
    quarter = L1 // 4
    nlev = T.shape[0]
    cand_S = []
    cand_R = []
    cand_M = []
    reg_tau = []
    reg_tt = []
    reg_k = []
    after = 0
    lev = 0
    k_try = 0
    while True:
        # next admissible coin level
        while lev + 1 < nlev and (T[lev] < after or coins[lev] == 0):
            lev += 1
        if lev + 1 >= nlev:
            break
        S = T[lev + 1]
        if S > n - W:
            break
        thr = e[S] - quarter
        R = -1
        hi = e[S]
        for t in range(S + 1, n + 1):
            if e[t] > hi:
                hi = e[t]
            if e[t] <= thr:
                R = t
                break
        k_try += 1
        cand_S.append(S)
        cand_R.append(R)
        if R < 0:
            cand_M.append(e[S])
            reg_tau.append(S)
            reg_tt.append(T[lev])
            reg_k.append(k_try)
            k_try = 0
            after = S
            lev = lev + 1
        else:
            N = (hi - e[S]) // L1 + 1
            M = e[S] + N * L1
            cand_M.append(M)
            after = R + 1
            lev = M // L1
    out_c = np.empty((len(cand_S), 3), dtype=np.int64)
    for i in range(len(cand_S)):
        out_c[i, 0] = cand_S[i]
        out_c[i, 1] = cand_R[i]
        out_c[i, 2] = cand_M[i]
    out_r = np.empty((len(reg_tau), 3), dtype=np.int64)
    for i in range(len(reg_tau)):
        out_r[i, 0] = reg_tau[i]
        out_r[i, 1] = reg_tt[i]
        out_r[i, 2] = reg_k[i]
    return out_c, out_r


@dataclass
class RegenerationRecord:
    """Regeneration bookkeeping of one path.

    ``tau`` and ``tau_tilde`` are times, ``levels`` the values ``X_tau . e_1``
    relative to the start. ``S_list``, ``R_list`` (-1 when no backtrack was
    seen) and ``M_list`` describe every candidate that was tested; ``K`` is
    the 1-based index of the first successful candidate.
    """

    tau: np.ndarray
    tau_tilde: np.ndarray
    levels: np.ndarray
    S_list: np.ndarray
    R_list: np.ndarray
    M_list: np.ndarray
    K: int | None
    mode: str
    L1: int
    horizon: int
    tries: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def count(self) -> int:
        return int(self.tau.size)


def _record_from(e, coins, L1, W, mode) -> RegenerationRecord:
    T = _level_times(e, L1)
    c = np.ones(T.size, dtype=np.int8) if coins is None else np.asarray(coins, dtype=np.int8)
    if c.size < T.size:
        c = np.concatenate([c, np.zeros(T.size - c.size, dtype=np.int8)])
    cand, regs = _detect(e, T, c, L1, int(W))
    tau = regs[:, 0]
    K = int(regs[0, 2]) if regs.shape[0] else None
    return RegenerationRecord(tau, regs[:, 1], e[tau], cand[:, 0], cand[:, 1], cand[:, 2], K, mode,
                              L1, e.size - 1, regs[:, 2])


def default_lookahead(bias: BiasSpec) -> int:
    return int(np.ceil(50.0 / bias.lam**2))


def detect_approx_regenerations(path: WalkPath, grid: HyperplaneGrid, lookahead: int | None = None
                                ) -> RegenerationRecord:
    """Regenerations with every coin set to 1 and a finite-horizon backtrack test."""
    W = default_lookahead(grid.bias) if lookahead is None else int(lookahead)
    if W < grid.L1:
        raise RegenerationError(f"lookahead {W} shorter than the level spacing {grid.L1}")
    if path.horizon <= W:
        raise RegenerationError("path must be longer than the lookahead")
    e = path.e1_positions() - path.start[0]
    return _record_from(e, None, grid.L1, W, MODE_APPROX)


def detect_coin_regenerations(e1, coins, L1: int, lookahead: int) -> RegenerationRecord:
    """Regenerations of an exact-coin path given ``X . e_1`` (from 0) and the level coins."""
    return _record_from(np.asarray(e1, dtype=np.int64), coins, L1, lookahead, MODE_EXACT)


# ---------------------------------------------------------------- block summaries


@dataclass
class InterRegenSummary:
    dtau: np.ndarray
    dx: np.ndarray
    fsum: np.ndarray
    autocorr: dict
    exp_moments: dict

    def as_rows(self, replica: int, taus: np.ndarray, mode: str):
        for k in range(self.dtau.size):
            yield dict(replica=replica, k=k + 1, tau_k=int(taus[k]), dtau=int(self.dtau[k]),
                       dx_e1=int(self.dx[k]), block_fsum=float(self.fsum[k]), mode=mode)


def autocorrelation(x, lag: int) -> float:
    x = np.asarray(x, dtype=float)
    if x.size <= lag + 1:
        return float("nan")
    y = x - x.mean()
    den = np.dot(y, y)
    return float(np.dot(y[:-lag], y[lag:]) / den) if den > 0 else 0.0


def exp_moment_curve(values, cs) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.array([np.mean(np.exp(c * v)) for c in cs])


def block_arrays(record: RegenerationRecord, e1, fprefix=None):
    """Blocks ``[tau_k, tau_{k+1})`` for ``k >= 1``: ``(dtau, dx, fsum)``."""
    tau = record.tau
    dtau = np.diff(tau)
    dx = np.diff(np.asarray(e1)[tau])
    fsum = np.diff(np.asarray(fprefix)[tau]) if fprefix is not None else np.zeros(dtau.size)
    return dtau, dx, fsum


def inter_regen_summary(record: RegenerationRecord, path_or_e1, fvals=None, lam: float | None = None,
                        cs=(0.01, 0.02, 0.05)) -> InterRegenSummary:
    """Per-block lengths, e_1 advances and f sums, with lag 1-3 autocorrelations.

    The first block ``[0, tau_1)`` is dropped. ``fvals[i] = f(env_i)``.
    """
    if record.count < 3:
        raise RegenerationError(f"need at least 3 regenerations, found {record.count}")
    e1 = path_or_e1.e1_positions() - path_or_e1.start[0] if isinstance(path_or_e1, WalkPath) else np.asarray(path_or_e1)
    fprefix = None
    if fvals is not None:
        fprefix = np.concatenate([[0.0], np.cumsum(fvals)])
    dtau, dx, fsum = block_arrays(record, e1, fprefix)
    ac = {m: autocorrelation(dx, m) for m in (1, 2, 3)}
    em = {}
    if lam is not None:
        em = {"c": np.asarray(cs), "x": exp_moment_curve(lam * dx, cs), "t": exp_moment_curve(lam**2 * dtau, cs)}
    return InterRegenSummary(dtau, dx, fsum, ac, em)


# ---------------------------------------------------------------- strips and slabs


@njit(cache=True)
def _strip_tables(ienv, fenv, bkey, tilt, x_lo, x_hi, s):
    """Neighbour and weight tables of the strip ``x_lo <= x . e_1 <= x_hi``.

    Sites are ordered by ``x . e_1`` then by the transverse coordinates (C
    order, each in ``[0, s)``). ``nbr[i, code] = -1`` marks a move that leaves
    the strip. ``cond`` holds the raw conductances.
    """
    d = ienv[1]
    nt = 1
    for _ in range(d - 1):
        nt *= s
    L = x_hi - x_lo + 1
    N = L * nt
    nbr = -np.ones((N, 2 * d), dtype=np.int64)
    wts = np.zeros((N, 2 * d))
    cond = np.zeros((N, 2 * d))
    coords = np.zeros((N, d), dtype=np.int64)
    x = np.zeros(d, dtype=np.int64)
    for i in range(N):
        rem = i % nt
        x[0] = x_lo + i // nt
        for a in range(d - 1, 0, -1):
            x[a] = rem % s
            rem //= s
        for a in range(d):
            coords[i, a] = x[a]
        for a in range(d):
            cp = C.conductance(ienv, fenv, bkey, x, a)
            x[a] -= 1
            cm = C.conductance(ienv, fenv, bkey, x, a)
            x[a] += 1
            cond[i, 2 * a] = cp
            cond[i, 2 * a + 1] = cm
            if a == 0:
                jp = i + nt if x[0] < x_hi else -1
                jm = i - nt if x[0] > x_lo else -1
            else:
                stride = 1
                for b in range(d - 1, a, -1):
                    stride *= s
                xa = x[a]
                jp = i + ((xa + 1) % s - xa) * stride
                jm = i + ((xa - 1) % s - xa) * stride
            nbr[i, 2 * a] = jp
            nbr[i, 2 * a + 1] = jm
            if jp >= 0:
                wts[i, 2 * a] = cp * tilt[2 * a]
            if jm >= 0:
                wts[i, 2 * a + 1] = cm * tilt[2 * a + 1]
    return nbr, wts, cond, coords


@njit(cache=True)
def _bridge(nbr, wts, h, start, exit_from, key, t0, cap):
    """Walk from ``start`` with jump weights ``wts * h(target)`` until an index ``>= exit_from``."""
    k = nbr.shape[1]
    buf = np.empty(1024, dtype=np.int8)
    q = np.empty(k)
    i = start
    t = t0
    m = 0
    while i < exit_from:
        if m >= cap:
            return buf[:m], -1
        tot = 0.0
        for c in range(k):
            j = nbr[i, c]
            q[c] = wts[i, c] * h[j] if j >= 0 else 0.0
            tot += q[c]
        code = C.pick(q, tot, C.counter_uniform(key, t))
        t += 1
        if m >= buf.shape[0]:
            nb = np.empty(2 * buf.shape[0], dtype=np.int8)
            nb[:m] = buf[:m]
            buf = nb
        buf[m] = code
        m += 1
        i = nbr[i, code]
    return buf[:m], i


@njit(cache=True)
def _slab_exit_batch(nbr, wts, start, exit_from, keys, cap):
    R = keys.shape[0]
    out = np.empty(R, dtype=np.int64)
    k = nbr.shape[1]
    for r in range(R):
        i = start
        t = 0
        while i < exit_from and t < cap:
            tot = 0.0
            for c in range(k):
                tot += wts[i, c]
            code = C.pick(wts[i], tot, C.counter_uniform(keys[r], t))
            i = nbr[i, code]
            t += 1
        out[r] = i if i >= exit_from else -1
    return out


class SlabProblem:
    """Strip ``[x_lo, x_hi] x (Z/sZ)^(d-1)`` with a reflecting wall at ``x_lo``.

    The plane ``x . e_1 = x_hi`` is absorbing. Conductances are those of
    ``field`` with transverse coordinates folded mod ``cross_section``; the
    bias must point along e_1.
    """

    def __init__(self, field: ConductanceField, bias: BiasSpec, cross_section: int, x_lo: int, x_hi: int,
                 max_states: int = 200_000):
        if abs(bias.ell[0] - 1.0) > 1e-12:
            raise RegenerationError("strip geometry requires ell = e_1")
        if cross_section < 1 or x_hi <= x_lo:
            raise RegenerationError("empty slab")
        self.field = field
        self.bias = bias
        self.s = int(cross_section)
        self.x_lo = int(x_lo)
        self.x_hi = int(x_hi)
        d = field.dimension
        self.n_trans = self.s ** (d - 1)
        n_states = (self.x_hi - self.x_lo + 1) * self.n_trans
        if n_states > max_states:
            raise RegenerationError(f"slab has {n_states} states, cap is {max_states}")
        ienv, fenv = field.kernel_args(tperiod=self.s)
        self.nbr, self.wts, self.cond, self.coords = _strip_tables(
            ienv, fenv, field.bkey, bias.move_tilts(), self.x_lo, self.x_hi, self.s)
        self.exit_from = n_states - self.n_trans
        self._lu = None
        self._H = None

    @classmethod
    def for_level(cls, field, bias, cross_section, m: int, back_levels: int = 3, spacing: int | None = None):
        L1 = spacing if spacing is not None else bias.L1
        return cls(field, bias, cross_section, (m - back_levels) * L1, (m + 1) * L1)

    @property
    def n_states(self) -> int:
        return self.nbr.shape[0]

    def index(self, x1: int, transverse=()) -> int:
        t = 0
        for v in transverse:
            t = t * self.s + int(v) % self.s
        return (int(x1) - self.x_lo) * self.n_trans + t

    def transition_matrix(self) -> sp.csr_matrix:
        N = self.n_states
        rows = np.repeat(np.arange(N), self.nbr.shape[1])
        cols = self.nbr.ravel()
        vals = self.wts.ravel()
        keep = cols >= 0
        W = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(N, N)).tocsr()
        W.sum_duplicates()
        deg = np.asarray(W.sum(axis=1)).ravel()
        return (sp.diags(1.0 / deg) @ W).tocsr()

    def network(self) -> FiniteNetwork:
        """Same slab as a symmetric network with tilted conductances ``omega^lambda``."""
        i = np.repeat(np.arange(self.n_states), self.nbr.shape[1])
        j = self.nbr.ravel()
        c = self.cond.ravel()
        plus = (np.tile(np.arange(self.nbr.shape[1]), self.n_states) % 2 == 0) & (j >= 0)
        i, j, c = i[plus], j[plus], c[plus]
        keep = (i < self.exit_from) | (j < self.exit_from)
        i, j, c = i[keep], j[keep], c[keep]
        lam = self.bias.lam
        x1 = self.coords[:, 0] - self.x_hi
        w = c * np.exp(lam * (x1[i] + x1[j]))
        ab = np.zeros(self.n_states, dtype=bool)
        ab[self.exit_from:] = True
        return FiniteNetwork(self.n_states, np.column_stack([i, j]), w, ab, self.coords)

    def exit_matrix(self) -> np.ndarray:
        """``H[i, w] = P^i(exit at w)`` for transient ``i`` (rows) and exit sites ``w``."""
        if self._H is None:
            P = self.transition_matrix()
            nT = self.exit_from
            PTT = P[:nT][:, :nT]
            PTA = P[:nT][:, nT:]
            A = (sp.identity(nT, format="csc") - PTT.tocsc())
            try:
                self._lu = spla.splu(A.tocsc())
            except RuntimeError as exc:
                raise RegenerationError(f"singular slab solve: {exc}") from exc
            self._H = self._lu.solve(np.asarray(PTA.toarray()))
        return self._H

    def exit_law(self, start: int) -> np.ndarray:
        return self.exit_matrix()[start].copy()

    def mc_exit(self, start: int, keys, cap: int = 10**8) -> np.ndarray:
        """Exit sites (as offsets into the exit plane) of independent walks, -1 if capped."""
        out = _slab_exit_batch(self.nbr, self.wts, start, self.exit_from, np.asarray(keys, dtype=np.uint64), cap)
        return np.where(out >= 0, out - self.exit_from, -1)


@dataclass
class MuDecomposition:
    nu: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    c4_hat: float
    beta_max: float
    beta: float
    escape: float


def _mu1(field, bias, s, plane, t0, L1):
    # reference site 3 L1 / 4 ahead of the arrival point, planes a quarter level either side
    x_ref = plane + (3 * L1) // 4
    lo = x_ref - L1 // 4
    hi = plane + L1
    sub = SlabProblem(field, bias, s, lo, hi)
    P = sub.transition_matrix()
    nT = sub.exit_from
    inner = np.arange(sub.n_trans, nT)
    PII = P[inner][:, inner]
    rhs = P[inner][:, nT:].toarray()
    g = spla.splu((sp.identity(inner.size, format="csc") - PII.tocsc()).tocsc()).solve(rhs)
    start = sub.index(x_ref, t0) - sub.n_trans
    row = g[start]
    esc = float(row.sum())
    return row / esc, esc


def mu_decomposition(slab: SlabProblem, start_transverse=(), beta: float | None = None,
                     spacing: int | None = None) -> MuDecomposition:
    """Exit law ``nu`` from the level plane and its coin decomposition.

    The level plane is ``x . e_1 = x_hi - L1``. ``mu1`` is the exit law from
    the site ``3 L1 / 4`` ahead of the start, conditioned to exit before
    falling back ``L1 / 4``; it only sees conductances ahead of the level
    plane. ``beta`` defaults to ``beta_max``.
    """
    L1 = spacing if spacing is not None else slab.bias.L1
    plane = slab.x_hi - L1
    if plane < slab.x_lo:
        raise RegenerationError("slab is narrower than one level")
    t0 = tuple(start_transverse) if len(start_transverse) else (0,) * (slab.field.dimension - 1)
    start = slab.index(plane, t0)
    nu = slab.exit_law(start)
    mu1, esc = _mu1(slab.field, slab.bias, slab.s, plane, t0, L1)
    supp = mu1 > 0
    c4 = float(np.min(nu[supp] / mu1[supp]))
    # rounding can leave c4 a few ulps below 1 when mu1 == nu
    beta_max = 1.0 if c4 >= 1.0 - 1e-12 else c4
    b = beta_max if beta is None else float(beta)
    if b > beta_max * (1 + 1e-12) or b < 0:
        raise RegenerationError(f"beta = {b:.6g} exceeds beta_max = {beta_max:.6g}")
    if b >= 1.0:
        mu0 = nu.copy()
    else:
        mu0 = (nu - b * mu1) / (1.0 - b)
        mu0[(mu0 < 0) & (mu0 >= -1e-14)] = 0.0
        mu0 = np.clip(mu0, 0.0, None)
    return MuDecomposition(nu, mu1, mu0, c4, beta_max, b, esc)


@dataclass(frozen=True)
class CoinStream:
    """iid Bernoulli(beta) coins; coin ``i`` is a pure function of ``(seed, i)``."""

    seed: int
    beta: float

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise RegenerationError("beta must lie in (0, 1]")

    def coin(self, i: int) -> int:
        key = np.uint64(C.derive_key(np.uint64(self.seed), C.TAG_COIN, 0))
        return int(_unit(key, i) < self.beta)


@njit(cache=True)
def _unit(key, i):
    return C.counter_uniform(key, i)


@dataclass
class CoinPath:
    """Output of :func:`coin_trick_sample`."""

    path: WalkPath
    coins: np.ndarray
    level_times: np.ndarray
    exit_choice: np.ndarray
    beta_max: np.ndarray
    record: RegenerationRecord


def calibrate_beta(field: ConductanceField, bias: BiasSpec, cross_section: int, n_slabs: int = 32,
                   back_levels: int = 3, factor: float = 0.9) -> tuple[float, np.ndarray]:
    """``factor * min beta_max`` over slabs of independent environments."""
    vals = np.empty(n_slabs)
    for i in range(n_slabs):
        fi = field.with_seed(int(C.derive_key(np.uint64(field.seed), C.TAG_SLAB, 10**6 + i)))
        slab = SlabProblem.for_level(fi, bias, cross_section, 0, back_levels)
        vals[i] = mu_decomposition(slab).beta_max
    return factor * float(vals.min()), vals


def coin_trick_sample(field: ConductanceField, bias: BiasSpec, cross_section: int, n_levels: int,
                      coins: CoinStream, rng: WalkStream, back_levels: int = 3,
                      lookahead: int | None = None, step_cap: int = 10**8) -> CoinPath:
    """Sample a strip path level by level with the coin decomposition.

    At the first arrival in level ``m`` the coin ``m`` picks ``mu1`` or
    ``mu0``, the exit point on level ``m + 1`` is drawn from it and the path
    is completed by a bridge of the quenched walk conditioned on that exit.
    Excursions further back than ``back_levels`` levels are cut by a
    reflecting wall.
    """
    L1 = bias.L1
    d = field.dimension
    s = int(cross_section)
    key = np.uint64(rng.key)
    pick_key = np.uint64(C.derive_key(np.uint64(rng.seed), C.TAG_SLAB, np.uint64(rng.index)))
    chunks = []
    level_times = np.zeros(n_levels + 1, dtype=np.int64)
    coin_vals = np.zeros(n_levels, dtype=np.int8)
    exits = np.zeros(n_levels, dtype=np.int64)
    bmax = np.zeros(n_levels)
    t = 0
    trans = np.zeros(d - 1, dtype=np.int64)
    for m in range(n_levels):
        slab = SlabProblem.for_level(field, bias, s, m, back_levels)
        dec = mu_decomposition(slab, tuple(trans), beta=None)
        bmax[m] = dec.beta_max
        if coins.beta > dec.beta_max * (1 + 1e-12):
            raise RegenerationError(
                f"level {m}: beta = {coins.beta:.6g} exceeds beta_max = {dec.beta_max:.6g}")
        eps = coins.coin(m)
        coin_vals[m] = eps
        if coins.beta >= 1.0:
            law = dec.mu1
        else:
            mu0 = np.clip((dec.nu - coins.beta * dec.mu1) / (1.0 - coins.beta), 0.0, None)
            law = dec.mu1 if eps else mu0
        cdf = np.cumsum(law)
        w = int(np.searchsorted(cdf, _unit(pick_key, m) * cdf[-1], side="right"))
        w = min(w, law.size - 1)
        exits[m] = w
        H = slab.exit_matrix()
        h = np.zeros(slab.n_states)
        h[:slab.exit_from] = H[:, w]
        h[slab.exit_from + w] = 1.0
        start = slab.index(m * L1, tuple(trans))
        codes, end = _bridge(slab.nbr, slab.wts, h, start, slab.exit_from, key, t, step_cap)
        if end < 0:
            raise RegenerationError(f"bridge at level {m} exceeded {step_cap} steps")
        chunks.append(codes)
        t += codes.size
        level_times[m + 1] = t
        trans = slab.coords[end, 1:].copy()
    steps = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int8)
    path = WalkPath(np.zeros(d, dtype=np.int64), steps, rng, None)
    e1 = path.e1_positions()
    W = 0 if lookahead is None else int(lookahead)
    record = detect_coin_regenerations(e1, coin_vals, L1, W)
    return CoinPath(path, coin_vals, level_times, exits, bmax, record)


def strip_local_values(field: ConductanceField, cross_section: int, path: WalkPath, f) -> np.ndarray:
    """``f(env_k)`` for ``k < n`` along a strip path."""
    from .walk import _local_many
    ienv, fenv = field.kernel_args(tperiod=cross_section)
    pos = path.positions()[:-1]
    return _local_many(ienv, fenv, field.bkey, np.ascontiguousarray(pos), *f.kernel_args())


# ---------------------------------------------------------------- calibration


@dataclass
class L0Calibration:
    L0: int | None
    table: dict


def crossing_frequency(field: ConductanceField, bias: BiasSpec, L0: int, n_walks: int, walk_seed: int,
                       cap: int | None = None):
    """Fraction of walks hitting ``+L0/lambda1`` before ``-L0/lambda1`` (along e_1)."""
    half = L0 * bias.inv_lambda1
    cap = cap if cap is not None else int(200 * half * half + 10**4)
    ienv, fenv = field.kernel_args()
    bkeys = np.full(n_walks, field.bkey, dtype=np.uint64)
    wkeys = np.array([C.derive_key(np.uint64(walk_seed), C.TAG_WALK, np.uint64(i)) for i in range(n_walks)],
                     dtype=np.uint64)
    out = crossing_batch(ienv, fenv, bkeys, wkeys, bias.move_tilts(), half, half, cap)
    done = out >= 0
    return float(out[done].mean()) if done.any() else float("nan"), int(done.sum())


def calibrate_L0(field: ConductanceField, lam: float, n_seeds: int = 20, n_walks: int = 2000,
                 candidates=range(1, 9), target: float = 2.0 / 3.0) -> L0Calibration:
    """Smallest ``L0`` whose crossing frequency is at least ``target`` in every seed."""
    table = {}
    for L0 in candidates:
        bias = BiasSpec.along_e1(lam, field.dimension, L0)
        freqs = []
        for i in range(n_seeds):
            fi = field.with_seed(int(C.derive_key(np.uint64(field.seed), C.TAG_ENV, 10**7 + i)))
            p, _ = crossing_frequency(fi, bias, L0, n_walks, walk_seed=int(C.derive_key(np.uint64(field.seed), C.TAG_WALK, i)))
            freqs.append(p)
        table[L0] = np.array(freqs)
        if np.min(freqs) >= target:
            return L0Calibration(L0, table)
    return L0Calibration(None, table)
