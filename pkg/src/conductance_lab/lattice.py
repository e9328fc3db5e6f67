"""Seeded iid conductance fields on Z^d and their tilted versions.

Conductances are never stored. The value on a bond is a hash of the field
seed and the canonical bond encoding ``(base, axis)`` pushed through the
marginal law, so any bond of the infinite lattice can be read in O(1).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
from numba import njit

from . import _core as C

LAWS = {
    "two_point": C.LAW_TWO_POINT,
    "uniform": C.LAW_UNIFORM,
    "log_uniform": C.LAW_LOG_UNIFORM,
    "constant": C.LAW_CONSTANT,
}
MAX_DIMENSION = 6


class LatticeError(ValueError):
    """Malformed site, bond or field parameters."""


def as_site(coords, d: int | None = None) -> np.ndarray:
    """Validate a lattice point and return it as an int64 vector."""
    a = np.asarray(coords)
    if a.ndim != 1 or a.size < 2:
        raise LatticeError(f"site must be an integer vector of length >= 2, got {coords!r}")
    if not np.all(np.equal(np.mod(a, 1), 0)):
        raise LatticeError(f"site coordinates must be integers, got {coords!r}")
    a = a.astype(np.int64)
    if d is not None and a.size != d:
        raise LatticeError(f"site has length {a.size}, field dimension is {d}")
    return a


@dataclass(frozen=True)
class Bond:
    """Non-oriented nearest-neighbour bond stored as ``(base, axis)``.

    ``base`` is the lexicographically smaller endpoint, so ``Bond(x, y)`` and
    ``Bond(y, x)`` compare equal.
    """

    base: tuple
    axis: int

    @classmethod
    def between(cls, x, y) -> "Bond":
        x = as_site(x)
        y = as_site(y, x.size)
        diff = y - x
        if np.abs(diff).sum() != 1:
            raise LatticeError(f"{tuple(x)} and {tuple(y)} are not nearest neighbours")
        axis = int(np.flatnonzero(diff)[0])
        base = x if diff[axis] == 1 else y
        return cls(tuple(int(v) for v in base), axis)

    @property
    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.array(self.base, dtype=np.int64)
        y = x.copy()
        y[self.axis] += 1
        return x, y


@njit(cache=True)
def _conductance_many(ienv, fenv, bkey, bases, axes):
    out = np.empty(axes.shape[0])
    x = np.empty(bases.shape[1], dtype=np.int64)
    for i in range(axes.shape[0]):
        for a in range(bases.shape[1]):
            x[a] = bases[i, a]
        out[i] = C.conductance(ienv, fenv, bkey, x, axes[i])
    return out


@dataclass(frozen=True)
class ConductanceField:
    """iid uniformly elliptic conductances on the bonds of Z^d.

    Parameters
    ----------
    dimension : int
        Lattice dimension, ``2 <= d <= 6``.
    kappa : float
        Ellipticity bound; every conductance lies in ``[1/kappa, kappa]``.
    law : str
        ``two_point`` (values ``1/kappa`` and ``kappa``, the latter with
        probability ``law_param``), ``uniform`` or ``log_uniform`` on
        ``[1/kappa, kappa]``, or ``constant`` (every bond equals
        ``law_param``).
    law_param : float, optional
        Defaults to 0.5 for ``two_point`` and 1.0 for ``constant``; ignored
        otherwise.
    seed : int
        64-bit master seed.
    """

    dimension: int
    kappa: float
    law: str = "two_point"
    law_param: float | None = None
    seed: int = 0
    _bkey: int = dc_field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.dimension, (int, np.integer)) or not 2 <= self.dimension <= MAX_DIMENSION:
            raise LatticeError(f"dimension must be an integer in [2, {MAX_DIMENSION}], got {self.dimension!r}")
        if not np.isfinite(self.kappa) or self.kappa <= 1.0:
            raise LatticeError(f"kappa must be > 1, got {self.kappa!r}")
        if self.law not in LAWS:
            raise LatticeError(f"unknown law {self.law!r}; expected one of {sorted(LAWS)}")
        if not 0 <= int(self.seed) < 2**64:
            raise LatticeError("seed must be a 64-bit unsigned integer")
        p = self.law_param
        if p is None:
            p = 0.5 if self.law == "two_point" else 1.0
        p = float(p)
        if self.law == "two_point" and not 0.0 <= p <= 1.0:
            raise LatticeError(f"two_point weight must lie in [0, 1], got {p}")
        if self.law == "constant" and not 1.0 / self.kappa <= p <= self.kappa:
            raise LatticeError(f"constant value {p} outside [1/kappa, kappa]")
        object.__setattr__(self, "law_param", p)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "dimension", int(self.dimension))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "_bkey", int(C.bond_key(np.uint64(self.seed))))

    def with_seed(self, seed: int) -> "ConductanceField":
        return ConductanceField(self.dimension, self.kappa, self.law, self.law_param, int(seed))

    def replica(self, r: int) -> "ConductanceField":
        """Independent copy used by replica ``r`` of an annealed experiment."""
        return self.with_seed(int(C.derive_key(np.uint64(self.seed), C.TAG_ENV, r)))

    @property
    def is_deterministic(self) -> bool:
        return self.law == "constant" or (self.law == "two_point" and self.law_param in (0.0, 1.0))

    def kernel_args(self, period: int = 0, tperiod: int = 0):
        """``(ienv, fenv)`` arrays understood by the compiled kernels."""
        ienv = np.array([LAWS[self.law], self.dimension, period, tperiod], dtype=np.int64)
        fenv = np.array([self.kappa, self.law_param])
        return ienv, fenv

    @property
    def bkey(self) -> np.uint64:
        return np.uint64(self._bkey)

    def conductances(self, bases, axes) -> np.ndarray:
        """Vectorized ``conductance_at`` for bonds ``(bases[i], axes[i])``."""
        bases = np.ascontiguousarray(np.atleast_2d(bases), dtype=np.int64)
        axes = np.ascontiguousarray(np.atleast_1d(axes), dtype=np.int64)
        if bases.shape[1] != self.dimension or bases.shape[0] != axes.shape[0]:
            raise LatticeError("bases must be (n, d) and axes (n,)")
        if np.any((axes < 0) | (axes >= self.dimension)):
            raise LatticeError("axis out of range")
        ienv, fenv = self.kernel_args()
        return _conductance_many(ienv, fenv, self.bkey, bases, axes)

    def moments(self) -> tuple[float, float]:
        """Exact ``(E[omega], E[omega^2])`` of the marginal law."""
        k, p = self.kappa, self.law_param
        if self.law == "two_point":
            return p * k + (1 - p) / k, p * k * k + (1 - p) / (k * k)
        if self.law == "uniform":
            lo = 1.0 / k
            return 0.5 * (lo + k), (k**3 - lo**3) / (3.0 * (k - lo))
        if self.law == "log_uniform":
            lk = np.log(k)
            return (k - 1.0 / k) / (2.0 * lk), (k * k - 1.0 / (k * k)) / (4.0 * lk)
        return p, p * p

    @property
    def q0_normalizer(self) -> float:
        """``Z = 2 d E[omega]``."""
        return 2.0 * self.dimension * self.moments()[0]


@dataclass(frozen=True)
class BiasSpec:
    """Tilt ``(lambda, ell)`` and the hyperplane scales derived from it.

    ``ell`` is normalized on construction and must satisfy
    ``ell . e_1 = max_i |ell_i|``.
    """

    lam: float
    ell: tuple
    L0: int = 2

    def __post_init__(self):
        lam = float(self.lam)
        if not 0.0 <= lam < 1.0:
            raise LatticeError(f"lambda must lie in [0, 1), got {self.lam!r}")
        ell = np.asarray(self.ell, dtype=float)
        if ell.ndim != 1 or ell.size < 2:
            raise LatticeError("ell must be a vector of length d >= 2")
        nrm = np.linalg.norm(ell)
        if nrm == 0:
            raise LatticeError("ell must be nonzero")
        ell = ell / nrm
        if ell[0] < np.max(np.abs(ell)) - 1e-12:
            raise LatticeError("coordinates must be arranged so that ell . e_1 = max_i |ell . e_i|")
        if int(self.L0) < 1:
            raise LatticeError("L0 must be a positive integer")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "ell", tuple(float(v) for v in ell))
        object.__setattr__(self, "L0", int(self.L0))

    @classmethod
    def along_e1(cls, lam: float, d: int, L0: int = 2) -> "BiasSpec":
        ell = np.zeros(d)
        ell[0] = 1.0
        return cls(lam, tuple(ell), L0)

    @property
    def ell_array(self) -> np.ndarray:
        return np.array(self.ell)

    @property
    def lambda1(self) -> float:
        if self.lam == 0:
            raise LatticeError("lambda1 is undefined at lambda = 0")
        return 1.0 / np.floor(1.0 / self.lam)

    @property
    def inv_lambda1(self) -> int:
        """``1/lambda1 = floor(1/lambda)``, an integer."""
        if self.lam == 0:
            raise LatticeError("lambda1 is undefined at lambda = 0")
        return int(np.floor(1.0 / self.lam))

    @property
    def L1(self) -> int:
        """Level spacing ``4 L0 / lambda1``."""
        return 4 * self.L0 * self.inv_lambda1

    def move_tilts(self) -> np.ndarray:
        return C.move_tilts(self.lam, self.ell_array)

    def with_lambda(self, lam: float) -> "BiasSpec":
        return BiasSpec(lam, self.ell, self.L0)


def conductance_at(field: ConductanceField, bond: Bond | Sequence) -> float:
    """Conductance of a bond, given as a :class:`Bond` or an endpoint pair."""
    if not isinstance(bond, Bond):
        x, y = bond
        bond = Bond.between(x, y)
    if len(bond.base) != field.dimension:
        raise LatticeError("bond dimension does not match the field")
    return float(field.conductances(np.array([bond.base]), np.array([bond.axis]))[0])


def tilted_conductance(field: ConductanceField, bond: Bond | Sequence, bias: BiasSpec) -> float:
    """``omega(x, y) exp(lambda ell . (x + y))``."""
    if not isinstance(bond, Bond):
        bond = Bond.between(*bond)
    x, y = bond.endpoints
    return conductance_at(field, bond) * float(np.exp(bias.lam * np.dot(bias.ell_array, x + y)))


def incident_conductances(field: ConductanceField, site) -> np.ndarray:
    """Conductances towards ``site +- e_a`` in move order ``(+e_1, -e_1, +e_2, ...)``."""
    x = as_site(site, field.dimension)
    d = field.dimension
    bases = np.repeat(x[None, :], 2 * d, axis=0)
    axes = np.repeat(np.arange(d), 2)
    bases[1::2][np.arange(d), np.arange(d)] -= 1
    return field.conductances(bases, axes)


def q0_weight(field: ConductanceField, site) -> float:
    """Unnormalized Q_0 density ``sum_e omega(site, site + e)`` of the shifted environment."""
    return float(incident_conductances(field, site).sum())


def q0_density(field: ConductanceField, site) -> float:
    return q0_weight(field, site) / field.q0_normalizer


@dataclass(frozen=True)
class PeriodicEnvironment:
    """Conductances of the ``n``-torus, read from the hash under a derived seed.

    ``table[a][x]`` is the conductance of the bond ``(x, x + e_a)`` with all
    coordinates taken mod ``n``.
    """

    field: ConductanceField
    period: int
    seed: int
    table: np.ndarray

    @property
    def kappa(self) -> float:
        return self.field.kappa

    @property
    def dimension(self) -> int:
        return self.field.dimension

    @property
    def bkey(self) -> np.uint64:
        return np.uint64(C.bond_key(np.uint64(self.seed)))

    def kernel_args(self):
        ienv, fenv = self.field.kernel_args(period=self.period)
        return ienv, fenv

    def sites(self) -> np.ndarray:
        """All torus sites in C order, shape ``(n^d, d)``."""
        n, d = self.period, self.dimension
        return np.array(list(itertools.product(range(n), repeat=d)), dtype=np.int64).reshape(-1, d)

    def site_index(self, x) -> int:
        return int(np.ravel_multi_index(tuple(np.mod(x, self.period)), (self.period,) * self.dimension))


def sample_periodic(field: ConductanceField, period: int) -> PeriodicEnvironment:
    """Periodic environment with period ``n`` in every coordinate."""
    if int(period) < 1:
        raise LatticeError("period must be >= 1")
    n = int(period)
    d = field.dimension
    seed = int(C.derive_key(np.uint64(field.seed), C.TAG_PERIODIC, n))
    ienv, fenv = field.kernel_args(period=n)
    sites = np.array(list(itertools.product(range(n), repeat=d)), dtype=np.int64).reshape(-1, d)
    bkey = np.uint64(C.bond_key(np.uint64(seed)))
    table = np.empty((d,) + (n,) * d)
    for a in range(d):
        vals = _conductance_many(ienv, fenv, bkey, sites, np.full(len(sites), a, dtype=np.int64))
        table[a] = vals.reshape((n,) * d)
    return PeriodicEnvironment(field, n, seed, table)
