"""Quenched walks among conductances: kernel, sampling and path functionals.

Moves are coded ``2*axis`` for ``+e_axis`` and ``2*axis + 1`` for
``-e_axis``. A path is stored as its start site and an ``int8`` array of move
codes; positions are rebuilt by prefix sums when needed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from numba import njit

from . import _core as C
from ._kernels import walk_codes
from .lattice import BiasSpec, ConductanceField, LatticeError, as_site, incident_conductances

PATH_MAGIC = b"CLPATH01"


class PathMismatchError(ValueError):
    """A path is analysed under a field or bias other than the one it was sampled in."""


def fingerprint(field: ConductanceField, bias: BiasSpec) -> str:
    """Short hash pinning the field and the bias."""
    text = repr((field.dimension, field.kappa, field.law, field.law_param, field.seed,
                 bias.lam, bias.ell, bias.L0))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def move_vectors(d: int) -> np.ndarray:
    """Unit moves in code order, shape ``(2d, d)``."""
    e = np.zeros((2 * d, d), dtype=np.int64)
    for a in range(d):
        e[2 * a, a] = 1
        e[2 * a + 1, a] = -1
    return e


def step_distribution(field: ConductanceField, bias: BiasSpec, site) -> np.ndarray:
    """Jump probabilities from ``site`` in move order ``(+e_1, -e_1, +e_2, ...)``."""
    _check_dims(field, bias)
    w = incident_conductances(field, site) * bias.move_tilts()
    return w / w.sum()


def local_drift(field: ConductanceField, bias: BiasSpec, site) -> np.ndarray:
    p = step_distribution(field, bias, site)
    return p @ move_vectors(field.dimension)


def _check_dims(field, bias):
    if len(bias.ell) != field.dimension:
        raise LatticeError(f"ell has length {len(bias.ell)}, field dimension is {field.dimension}")


@dataclass(frozen=True)
class WalkStream:
    """Counter-based uniform stream ``(seed, index)``; step ``t`` reads uniform ``t``."""

    seed: int
    index: int = 0

    @property
    def key(self) -> np.uint64:
        return np.uint64(C.derive_key(np.uint64(self.seed), C.TAG_WALK, np.uint64(self.index)))


@dataclass
class WalkPath:
    start: np.ndarray
    steps: np.ndarray
    stream: WalkStream | None = None
    source: str | None = None

    @property
    def horizon(self) -> int:
        return int(self.steps.shape[0])

    def positions(self) -> np.ndarray:
        """``X_0..X_n`` as an ``(n+1, d)`` array."""
        d = self.start.size
        inc = move_vectors(d)[self.steps.astype(np.int64)]
        return np.vstack([self.start[None, :], self.start[None, :] + np.cumsum(inc, axis=0)])

    def e1_positions(self) -> np.ndarray:
        """``X_k . e_1`` for ``k = 0..n``."""
        s = self.steps.astype(np.int64)
        inc = np.where(s == 0, 1, np.where(s == 1, -1, 0))
        out = np.empty(s.size + 1, dtype=np.int64)
        out[0] = self.start[0]
        np.cumsum(inc, out=out[1:])
        out[1:] += self.start[0]
        return out

    @classmethod
    def from_moves(cls, start, moves) -> "WalkPath":
        """Build a path from explicit unit vectors (used for hand-made paths)."""
        start = as_site(start)
        codes = []
        for m in np.atleast_2d(moves) if len(moves) else []:
            m = np.asarray(m)
            if np.abs(m).sum() != 1:
                raise LatticeError(f"{m!r} is not a unit move")
            a = int(np.flatnonzero(m)[0])
            codes.append(2 * a + (1 if m[a] < 0 else 0))
        return cls(start, np.array(codes, dtype=np.int8).reshape(-1), None, None)


def run_walk(field: ConductanceField, bias: BiasSpec, start, horizon: int, rng: WalkStream) -> WalkPath:
    """Sample ``horizon`` steps of the quenched walk from ``start``."""
    _check_dims(field, bias)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    start = as_site(start, field.dimension)
    ienv, fenv = field.kernel_args()
    z = np.zeros((0, field.dimension), dtype=np.int64)
    codes, _ = walk_codes(ienv, fenv, field.bkey, rng.key, bias.move_tilts(), start, int(horizon),
                          z, np.zeros(0, dtype=np.int64), np.zeros(0), 0.0, False)
    return WalkPath(start, codes, rng, fingerprint(field, bias))


@njit(cache=True)
def _path_stats(ienv, fenv, bkey, tilt, ell, start, codes):
    d = start.shape[0]
    n = codes.shape[0]
    drift = np.zeros((n, d))
    var = np.zeros(n)
    logz = np.zeros(n)
    x = start.copy()
    c = np.empty(2 * d)
    for t in range(n):
        tot = 0.0
        tot0 = 0.0
        for a in range(d):
            cp = C.conductance(ienv, fenv, bkey, x, a)
            x[a] -= 1
            cm = C.conductance(ienv, fenv, bkey, x, a)
            x[a] += 1
            c[2 * a] = cp * tilt[2 * a]
            c[2 * a + 1] = cm * tilt[2 * a + 1]
            tot += c[2 * a] + c[2 * a + 1]
            tot0 += cp + cm
        m2 = 0.0
        m1 = 0.0
        for a in range(d):
            drift[t, a] = (c[2 * a] - c[2 * a + 1]) / tot
            m1 += drift[t, a] * ell[a]
            m2 += (c[2 * a] + c[2 * a + 1]) / tot * ell[a] * ell[a]
        var[t] = m2 - m1 * m1
        logz[t] = np.log(tot0) - np.log(tot)
        C.apply_move(x, codes[t])
    return drift, var, logz


@dataclass
class PathDecomposition:
    """Martingale decomposition of ``X . ell`` along a path.

    ``martingale_part[k] = (X_k - X_0 - sum_{i<k} d(omega, X_i)) . ell``;
    ``drift_sum[k]`` and ``quad_sum[k]`` are the running sums of the local
    drift vector and of ``D_ell``. All arrays have ``n + 1`` rows.
    """

    martingale_part: np.ndarray
    drift_sum: np.ndarray
    quad_sum: np.ndarray
    local_variance: np.ndarray = dc_field(repr=False)


def decompose_path(field: ConductanceField, bias: BiasSpec, path: WalkPath) -> PathDecomposition:
    """Martingale part, drift sums and quadratic terms under ``(field, bias)``.

    The start is taken as the origin of the displacement, i.e. ``M_0 = 0``.
    """
    if path.source is not None and path.source != fingerprint(field, bias):
        raise PathMismatchError("path was sampled under a different field or bias")
    _check_dims(field, bias)
    ienv, fenv = field.kernel_args()
    ell = bias.ell_array
    drift, var, _ = _path_stats(ienv, fenv, field.bkey, bias.move_tilts(), ell,
                                path.start, path.steps.astype(np.int8))
    n = path.horizon
    dsum = np.zeros((n + 1, field.dimension))
    np.cumsum(drift, axis=0, out=dsum[1:])
    qsum = np.zeros(n + 1)
    np.cumsum(var, out=qsum[1:])
    disp = path.positions() - path.start[None, :]
    M = (disp - dsum) @ ell
    return PathDecomposition(M, dsum, qsum, var)


def log_girsanov_weight(field: ConductanceField, bias: BiasSpec, path: WalkPath) -> float:
    """``log dP_{omega,lambda}/dP_omega`` of the path."""
    _check_dims(field, bias)
    ienv, fenv = field.kernel_args()
    tilt = bias.move_tilts()
    _, _, logz = _path_stats(ienv, fenv, field.bkey, tilt, bias.ell_array,
                             path.start, path.steps.astype(np.int8))
    return float(np.log(tilt)[path.steps.astype(np.int64)].sum() + logz.sum())


def girsanov_weight(field: ConductanceField, bias: BiasSpec, path: WalkPath) -> float:
    """Likelihood ratio of the path under the biased and the unbiased kernel.

    Product over steps of ``exp(lambda ell . dX) Z(X_i) / Z_lambda(X_i)``
    where ``Z`` and ``Z_lambda`` are the local normalizers.
    """
    return float(np.exp(log_girsanov_weight(field, bias, path)))


# ---------------------------------------------------------------- local functions


@dataclass(frozen=True)
class LocalFunction:
    """``f(omega) = const + sum_j coefs[j] * omega(offs[j], offs[j] + e_{axes[j]})``.

    A small serializable family: single-bond readouts, window sums, the
    normalized Q_0 density and constants, optionally centered under Q_0.
    """

    kind: str
    offs: np.ndarray
    axes: np.ndarray
    coefs: np.ndarray
    const: float = 0.0
    params: tuple = ()

    @property
    def dimension(self) -> int:
        return int(self.offs.shape[1])

    @property
    def window(self) -> list[tuple[tuple, int]]:
        return [(tuple(int(v) for v in o), int(a)) for o, a in zip(self.offs, self.axes)]

    def bound(self, kappa: float) -> float:
        return abs(self.const) + float(np.abs(self.coefs).sum()) * kappa

    def kernel_args(self):
        return (np.ascontiguousarray(self.offs, dtype=np.int64), np.ascontiguousarray(self.axes, dtype=np.int64),
                np.ascontiguousarray(self.coefs, dtype=float), float(self.const))

    @classmethod
    def bond(cls, d: int, axis: int = 0, offset=None) -> "LocalFunction":
        off = np.zeros((1, d), dtype=np.int64) if offset is None else as_site(offset, d)[None, :]
        return cls("bond", off, np.array([axis], dtype=np.int64), np.ones(1), 0.0, (axis,))

    @classmethod
    def window_sum(cls, d: int, radius: int = 1) -> "LocalFunction":
        """Sum of all bonds with base in ``[-radius, radius - 1]^d``."""
        rng = range(-radius, radius)
        offs, axes = [], []
        for base in np.array(np.meshgrid(*([list(rng)] * d), indexing="ij")).reshape(d, -1).T:
            for a in range(d):
                offs.append(base)
                axes.append(a)
        return cls("window_sum", np.array(offs, dtype=np.int64), np.array(axes, dtype=np.int64),
                   np.ones(len(axes)), 0.0, (radius,))

    @classmethod
    def q0_density(cls, field: ConductanceField) -> "LocalFunction":
        d = field.dimension
        offs = np.zeros((2 * d, d), dtype=np.int64)
        for a in range(d):
            offs[2 * a + 1, a] = -1
        axes = np.repeat(np.arange(d), 2)
        return cls("q0_density", offs, axes, np.full(2 * d, 1.0 / field.q0_normalizer), 0.0, ())

    @classmethod
    def constant(cls, d: int, c: float) -> "LocalFunction":
        return cls("constant", np.zeros((0, d), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0), float(c), (c,))

    def q0_mean(self, field: ConductanceField) -> float:
        """Exact ``Q_0 f`` from the marginal moments.

        Under Q_0 a bond incident to the origin has mean
        ``(E w^2 + (2d-1) (E w)^2) / (2d E w)``; every other bond has mean ``E w``.
        """
        m1, m2 = field.moments()
        d = field.dimension
        inc = (m2 + (2 * d - 1) * m1 * m1) / (2 * d * m1)
        total = self.const
        for o, a, c in zip(self.offs, self.axes, self.coefs):
            touches = (not np.any(o)) or (np.abs(o).sum() == 1 and o[a] == -1)
            total += c * (inc if touches else m1)
        return float(total)

    def centered(self, field: ConductanceField) -> "LocalFunction":
        return LocalFunction(self.kind, self.offs, self.axes, self.coefs,
                             self.const - self.q0_mean(field), self.params + ("centered",))


@njit(cache=True)
def _local_many(ienv, fenv, bkey, sites, offs, axes, coefs, const):
    out = np.empty(sites.shape[0])
    d = sites.shape[1]
    y = np.empty(d, dtype=np.int64)
    for i in range(sites.shape[0]):
        v = const
        for j in range(axes.shape[0]):
            for a in range(d):
                y[a] = sites[i, a] + offs[j, a]
            v += coefs[j] * C.conductance(ienv, fenv, bkey, y, axes[j])
        out[i] = v
    return out


def evaluate_local_function(f: LocalFunction, field: ConductanceField, site) -> float | np.ndarray:
    """``f(theta_site omega)``; ``site`` may be one site or an ``(n, d)`` array."""
    sites = np.asarray(site)
    single = sites.ndim == 1
    sites = np.ascontiguousarray(np.atleast_2d(sites), dtype=np.int64)
    if sites.shape[1] != field.dimension or f.dimension != field.dimension:
        raise LatticeError("dimension mismatch")
    ienv, fenv = field.kernel_args()
    out = _local_many(ienv, fenv, field.bkey, sites, *f.kernel_args())
    return float(out[0]) if single else out


# ---------------------------------------------------------------- path dumps


def write_path(path: WalkPath, dest, seed: int = 0) -> None:
    """Binary dump: 32-byte header ``(magic, d, stream index, horizon, seed)`` then one byte per step.

    Only paths started at the origin can be dumped.
    """
    if np.any(path.start != 0):
        raise ValueError("only paths started at the origin can be dumped")
    idx = path.stream.index if path.stream is not None else 0
    if path.stream is not None:
        seed = path.stream.seed
    header = PATH_MAGIC + struct.pack("<IIQQ", path.start.size, idx, path.horizon, seed)
    with open(dest, "wb") as fh:
        fh.write(header)
        fh.write(path.steps.astype(np.uint8).tobytes())


def read_path(src) -> WalkPath:
    raw = Path(src).read_bytes()
    if raw[:8] != PATH_MAGIC or len(raw) < 32:
        raise ValueError("not a path dump")
    d, idx, n, seed = struct.unpack("<IIQQ", raw[8:32])
    steps = np.frombuffer(raw[32:], dtype=np.uint8).astype(np.int8)
    if steps.size != n:
        raise ValueError(f"truncated path dump: header says {n} steps, found {steps.size}")
    return WalkPath(np.zeros(d, dtype=np.int64), steps, WalkStream(seed, idx), None)
