"""Compiled primitives shared by every simulation path.

Environments are passed to kernels as a pair ``(ienv, fenv)`` plus a
``uint64`` seed:

* ``ienv = [law, d, period, tperiod]``
* ``fenv = [kappa, law_param]``

Every conductance is ``law(u)`` with ``u`` a hash of the seed and the
canonical bond encoding. ``period > 0`` folds all coordinates mod ``period``
(torus environment); otherwise ``tperiod > 0`` folds only coordinates 2..d
(strip geometry with a periodic cross-section). There is no table-lookup
path; periodic tables are materialized views of the same hash.

A bond is encoded canonically as ``(base, axis)``: the bond joining ``base``
and ``base + e_axis``. Moves are coded ``2*axis`` for ``+e_axis`` and
``2*axis + 1`` for ``-e_axis``.
"""

import numpy as np
from numba import njit

LAW_TWO_POINT = 0
LAW_UNIFORM = 1
LAW_LOG_UNIFORM = 2
LAW_CONSTANT = 3

# stream tags for key derivation
TAG_ENV = 1
TAG_WALK = 2
TAG_COIN = 3
TAG_PERIODIC = 4
TAG_OUTER = 5
TAG_INNER = 6
TAG_SLAB = 7

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_BOND_SALT = np.uint64(0xD6E8FEB86659FD93)
# odd multipliers for the linear coordinate fold; |coords| < 2**40 assumed
_PM = (
    np.uint64(0xA24BAED4963EE407),
    np.uint64(0x9FB21C651E98DF25),
    np.uint64(0xC13FA9A902A6328F),
    np.uint64(0x91E10DA5C79E7B1D),
    np.uint64(0xB5297A4D3F84D5B5),
    np.uint64(0xD1B54A32D192ED03),
)
_PA = np.uint64(0xE7037ED1A0B428DB)
_OFFSET = 1 << 40
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def to_unit(h):
    return np.float64(h >> np.uint64(11)) * _INV53


@njit(cache=True)
def derive_key(seed, tag, index):
    """Stream key for ``(seed, tag, index)``; all arguments non-negative."""
    h = mix64(np.uint64(seed) ^ (np.uint64(tag) * _GAMMA))
    return mix64(h + (np.uint64(index) + np.uint64(1)) * _M1)


@njit(cache=True, inline="always")
def counter_uniform(key, counter):
    """Uniform on [0, 1) as a pure function of ``(key, counter)``."""
    return to_unit(mix64(np.uint64(key) + (np.uint64(counter) + np.uint64(1)) * _GAMMA))


@njit(cache=True, inline="always")
def _fold(x, axis, period, tperiod):
    h = np.uint64(axis + 1) * _PA
    if period > 0:
        for i in range(x.shape[0]):
            h += np.uint64(x[i] % period + _OFFSET) * _PM[i]
    elif tperiod > 0:
        h += np.uint64(x[0] + _OFFSET) * _PM[0]
        for i in range(1, x.shape[0]):
            h += np.uint64(x[i] % tperiod + _OFFSET) * _PM[i]
    else:
        for i in range(x.shape[0]):
            h += np.uint64(x[i] + _OFFSET) * _PM[i]
    return h


@njit(cache=True)
def bond_key(seed):
    """Per-environment hashing key; hoisted out of the bond loops."""
    return mix64(np.uint64(seed) ^ _BOND_SALT)


@njit(cache=True, inline="always")
def bond_uniform(bkey, x, axis, period, tperiod):
    return to_unit(mix64(mix64(np.uint64(bkey) + _fold(x, axis, period, tperiod))))


@njit(cache=True, inline="always")
def law_value(law, kappa, param, u):
    if law == LAW_TWO_POINT:
        lo = 1.0 / kappa
        return lo + (kappa - lo) * np.float64(u < param)
    elif law == LAW_UNIFORM:
        return 1.0 / kappa + u * (kappa - 1.0 / kappa)
    elif law == LAW_LOG_UNIFORM:
        return np.exp((2.0 * u - 1.0) * np.log(kappa))
    return param


@njit(cache=True, inline="always")
def conductance(ienv, fenv, bkey, x, axis):
    """Conductance of the bond ``(x, x + e_axis)``; ``bkey = bond_key(seed)``."""
    if ienv[0] == LAW_CONSTANT:
        return fenv[1]
    u = bond_uniform(bkey, x, axis, ienv[2], ienv[3])
    return law_value(ienv[0], fenv[0], fenv[1], u)


@njit(cache=True)
def move_tilts(lam, ell):
    """``exp(lam * ell . e)`` for the 2d unit moves."""
    d = ell.shape[0]
    t = np.empty(2 * d)
    for a in range(d):
        t[2 * a] = np.exp(lam * ell[a])
        t[2 * a + 1] = np.exp(-lam * ell[a])
    return t


@njit(cache=True, inline="always")
def pick(w, total, u):
    target = u * total
    acc = 0.0
    k = w.shape[0]
    for i in range(k - 1):
        acc += w[i]
        if target < acc:
            return i
    return k - 1


@njit(cache=True, inline="always")
def apply_move(x, code):
    a = code >> 1
    if code & 1:
        x[a] -= 1
    else:
        x[a] += 1


@njit(cache=True, inline="always")
def drift_and_variance(c, tilt, ell):
    """Local drift along ``ell`` and ``Var[(X1 - X0).ell]`` for weights ``c * tilt``."""
    d = ell.shape[0]
    tot = 0.0
    m1 = 0.0
    m2 = 0.0
    for a in range(d):
        wp = c[2 * a] * tilt[2 * a]
        wm = c[2 * a + 1] * tilt[2 * a + 1]
        tot += wp + wm
        m1 += (wp - wm) * ell[a]
        m2 += (wp + wm) * ell[a] * ell[a]
    m1 /= tot
    m2 /= tot
    return m1, m2 - m1 * m1
