"""Batch simulation kernels.

Every kernel loops over replicas and writes one row per replica, so results
do not depend on the number of threads. Replica ``r`` reads the environment
through ``bkeys[r]`` and its walk uniforms through ``wkeys[r]``; uniform
number ``t`` of a replica drives step ``t``.

The bond loop that builds the 2d jump weights is written out in each kernel:
numba does not optimise helpers that write into caller arrays nearly as well.
"""

import numpy as np
from numba import njit, prange

from . import _core as C


@njit(cache=True, inline="always")
def _local_value(ienv, fenv, bkey, x, offs, axes, coefs, const):
    # x is shifted in place and restored
    val = const
    d = x.shape[0]
    for j in range(axes.shape[0]):
        for i in range(d):
            x[i] += offs[j, i]
        val += coefs[j] * C.conductance(ienv, fenv, bkey, x, axes[j])
        for i in range(d):
            x[i] -= offs[j, i]
    return val


@njit(cache=True, parallel=True)
def displacement_batch(ienv, fenv, bkeys, wkeys, tilt, n):
    """Endpoint ``X_n`` and the start weight ``sum_e omega(0, e)`` per replica."""
    d = ienv[1]
    R = bkeys.shape[0]
    X = np.zeros((R, d), dtype=np.int64)
    q0w = np.empty(R)
    for r in prange(R):
        x = np.zeros(d, dtype=np.int64)
        w = np.empty(2 * d)
        bk = bkeys[r]
        key = wkeys[r]
        s = 0.0
        for a in range(d):
            s += C.conductance(ienv, fenv, bk, x, a)
            x[a] -= 1
            s += C.conductance(ienv, fenv, bk, x, a)
            x[a] += 1
        q0w[r] = s
        for t in range(n):
            tot = 0.0
            for a in range(d):
                cp = C.conductance(ienv, fenv, bk, x, a)
                x[a] -= 1
                cm = C.conductance(ienv, fenv, bk, x, a)
                x[a] += 1
                w[2 * a] = cp * tilt[2 * a]
                w[2 * a + 1] = cm * tilt[2 * a + 1]
                tot += w[2 * a] + w[2 * a + 1]
            C.apply_move(x, C.pick(w, tot, C.counter_uniform(key, t)))
        for a in range(d):
            X[r, a] = x[a]
    return X, q0w


@njit(cache=True, parallel=True)
def trajectory_batch(ienv, fenv, bkeys, wkeys, tilt, n, checkpoints, spacing, nlev):
    """Path statistics along e_1.

    Returns, per replica: ``X`` at each checkpoint, ``max_{s<=c} |X_s|_1`` and
    ``max_{s<=c} |X_s . e_1|`` at each checkpoint, ``min_s X_s . e_1`` over the
    horizon and the first time
    ``X . e_1`` reaches ``m * spacing`` for ``m = 1..nlev`` (-1 if never).
    Checkpoints must be increasing and ``<= n``.
    """
    d = ienv[1]
    R = bkeys.shape[0]
    K = checkpoints.shape[0]
    Xc = np.zeros((R, K, d), dtype=np.int64)
    amax = np.zeros((R, K), dtype=np.int64)
    emax = np.zeros((R, K), dtype=np.int64)
    xmin = np.zeros(R, dtype=np.int64)
    hits = -np.ones((R, nlev), dtype=np.int64)
    for r in prange(R):
        x = np.zeros(d, dtype=np.int64)
        w = np.empty(2 * d)
        bk = bkeys[r]
        key = wkeys[r]
        a1 = 0
        m1 = 0
        me = 0
        lo = 0
        nxt = 1
        kc = 0
        while kc < K and checkpoints[kc] == 0:
            kc += 1
        for t in range(n):
            tot = 0.0
            for a in range(d):
                cp = C.conductance(ienv, fenv, bk, x, a)
                x[a] -= 1
                cm = C.conductance(ienv, fenv, bk, x, a)
                x[a] += 1
                w[2 * a] = cp * tilt[2 * a]
                w[2 * a + 1] = cm * tilt[2 * a + 1]
                tot += w[2 * a] + w[2 * a + 1]
            code = C.pick(w, tot, C.counter_uniform(key, t))
            ax = code >> 1
            old = abs(x[ax])
            C.apply_move(x, code)
            a1 += abs(x[ax]) - old
            if a1 > m1:
                m1 = a1
            if x[0] < lo:
                lo = x[0]
            if abs(x[0]) > me:
                me = abs(x[0])
            if nxt <= nlev and x[0] == nxt * spacing:
                hits[r, nxt - 1] = t + 1
                nxt += 1
            while kc < K and checkpoints[kc] == t + 1:
                for a in range(d):
                    Xc[r, kc, a] = x[a]
                amax[r, kc] = m1
                emax[r, kc] = me
                kc += 1
        xmin[r] = lo
    return Xc, amax, emax, xmin, hits


@njit(cache=True, parallel=True)
def crossing_batch(ienv, fenv, bkeys, wkeys, tilt, right, left, cap):
    """Outcome per replica: 1 if ``X . e_1`` hits ``right`` before ``-left``,
    0 if ``-left`` first, -1 if neither within ``cap`` steps."""
    d = ienv[1]
    R = bkeys.shape[0]
    out = np.empty(R, dtype=np.int64)
    for r in prange(R):
        x = np.zeros(d, dtype=np.int64)
        w = np.empty(2 * d)
        bk = bkeys[r]
        key = wkeys[r]
        res = -1
        for t in range(cap):
            tot = 0.0
            for a in range(d):
                cp = C.conductance(ienv, fenv, bk, x, a)
                x[a] -= 1
                cm = C.conductance(ienv, fenv, bk, x, a)
                x[a] += 1
                w[2 * a] = cp * tilt[2 * a]
                w[2 * a + 1] = cm * tilt[2 * a + 1]
                tot += w[2 * a] + w[2 * a + 1]
            C.apply_move(x, C.pick(w, tot, C.counter_uniform(key, t)))
            if x[0] >= right:
                res = 1
                break
            if x[0] <= -left:
                res = 0
                break
        out[r] = res
    return out


@njit(cache=True, parallel=True)
def functional_batch(
    ienv, fenv, bkeys, wkeys, tilt, tilt_g, ell, n, burn,
    offs, axes, coefs, const, center, checkpoints,
):
    """Additive functionals of one walk per replica.

    The walk runs with move tilts ``tilt``; ``tilt_g`` is the comparison law
    for the log likelihood ratio. With ``g_k = f(env_k) - center`` the outputs
    are, per replica:

    * ``q0w``: ``sum_e omega(0, e)``
    * ``fburn``: ``sum_{burn <= k < n} f(env_k)``
    * per checkpoint ``c``: ``S_c = sum_{k<c} g_k``, ``max_{m<=c} |S_m|``,
      the martingale part ``M_c`` along ``ell``, ``log dP_g/dP`` of the first
      ``c`` steps and ``sum_{k<c} D_ell(env_k)``
    * ``X`` at the horizon.
    """
    d = ienv[1]
    R = bkeys.shape[0]
    K = checkpoints.shape[0]
    q0w = np.empty(R)
    fburn = np.zeros(R)
    S = np.zeros((R, K))
    Smax = np.zeros((R, K))
    M = np.zeros((R, K))
    logG = np.zeros((R, K))
    sumD = np.zeros((R, K))
    X = np.zeros((R, d), dtype=np.int64)
    lratio = np.log(tilt_g / tilt)
    for r in prange(R):
        x = np.zeros(d, dtype=np.int64)
        w = np.empty(2 * d)
        bk = bkeys[r]
        key = wkeys[r]
        s = 0.0
        smax = 0.0
        mart = 0.0
        lg = 0.0
        prod = 1.0
        qd = 0.0
        fb = 0.0
        kc = 0
        while kc < K and checkpoints[kc] == 0:
            kc += 1
        for t in range(n):
            fv = _local_value(ienv, fenv, bk, x, offs, axes, coefs, const)
            if t >= burn:
                fb += fv
            tot = 0.0
            tot0 = 0.0
            totg = 0.0
            m1 = 0.0
            m2 = 0.0
            for a in range(d):
                cp = C.conductance(ienv, fenv, bk, x, a)
                x[a] -= 1
                cm = C.conductance(ienv, fenv, bk, x, a)
                x[a] += 1
                wp = cp * tilt[2 * a]
                wm = cm * tilt[2 * a + 1]
                w[2 * a] = wp
                w[2 * a + 1] = wm
                tot += wp + wm
                tot0 += cp + cm
                totg += cp * tilt_g[2 * a] + cm * tilt_g[2 * a + 1]
                m1 += (wp - wm) * ell[a]
                m2 += (wp + wm) * ell[a] * ell[a]
            if t == 0:
                q0w[r] = tot0
            m1 /= tot
            m2 /= tot
            code = C.pick(w, tot, C.counter_uniform(key, t))
            ax = code >> 1
            sg = 1.0 - 2.0 * (code & 1)
            C.apply_move(x, code)
            s += fv - center
            if abs(s) > smax:
                smax = abs(s)
            mart += sg * ell[ax] - m1
            qd += m2 - m1 * m1
            lg += lratio[code]
            # ratios lie in [exp(-2), exp(2)]; fold into the log every 64 steps
            prod *= tot / totg
            if (t & 63) == 63:
                lg += np.log(prod)
                prod = 1.0
            while kc < K and checkpoints[kc] == t + 1:
                lg += np.log(prod)
                prod = 1.0
                S[r, kc] = s
                Smax[r, kc] = smax
                M[r, kc] = mart
                logG[r, kc] = lg
                sumD[r, kc] = qd
                kc += 1
        if n == 0:
            tot0 = 0.0
            for a in range(d):
                tot0 += C.conductance(ienv, fenv, bk, x, a)
                x[a] -= 1
                tot0 += C.conductance(ienv, fenv, bk, x, a)
                x[a] += 1
            q0w[r] = tot0
        fburn[r] = fb
        for a in range(d):
            X[r, a] = x[a]
    return q0w, fburn, S, Smax, M, logG, sumD, X


@njit(cache=True)
def walk_codes(ienv, fenv, bkey, wkey, tilt, start, n, offs, axes, coefs, const, with_f):
    """Step codes of one path and, if ``with_f``, ``f(env_k)`` for ``k < n``."""
    d = ienv[1]
    codes = np.empty(n, dtype=np.int8)
    fvals = np.zeros(n if with_f else 0)
    x = start.copy()
    w = np.empty(2 * d)
    for t in range(n):
        if with_f:
            fvals[t] = _local_value(ienv, fenv, bkey, x, offs, axes, coefs, const)
        tot = 0.0
        for a in range(d):
            cp = C.conductance(ienv, fenv, bkey, x, a)
            x[a] -= 1
            cm = C.conductance(ienv, fenv, bkey, x, a)
            x[a] += 1
            w[2 * a] = cp * tilt[2 * a]
            w[2 * a + 1] = cm * tilt[2 * a + 1]
            tot += w[2 * a] + w[2 * a + 1]
        code = C.pick(w, tot, C.counter_uniform(wkey, t))
        codes[t] = code
        C.apply_move(x, code)
    return codes, fvals


@njit(cache=True, parallel=True)
def nested_square_batch(
    ienv, fenv, bkeys, inner_seed, tilt, checkpoints, m_inner,
    offs, axes, coefs, const, center,
):
    """Unbiased estimate of ``(E_omega g(env_n))^2`` per outer environment.

    ``g = f - center``; ``m_inner`` walks from the origin per environment use
    the keys ``derive_key(inner_seed, TAG_INNER, r * m_inner + i)``. Returns
    ``q0w`` and an ``(R, K)`` array of ``(S^2 - sum g_i^2) / (m (m - 1))``.
    """
    d = ienv[1]
    R = bkeys.shape[0]
    K = checkpoints.shape[0]
    n = checkpoints[K - 1]
    q0w = np.empty(R)
    sq = np.zeros((R, K))
    for r in prange(R):
        x = np.zeros(d, dtype=np.int64)
        w = np.empty(2 * d)
        bk = bkeys[r]
        s1 = np.zeros(K)
        s2 = np.zeros(K)
        tot0 = 0.0
        for a in range(d):
            tot0 += C.conductance(ienv, fenv, bk, x, a)
            x[a] -= 1
            tot0 += C.conductance(ienv, fenv, bk, x, a)
            x[a] += 1
        q0w[r] = tot0
        for i in range(m_inner):
            key = C.derive_key(inner_seed, C.TAG_INNER, r * m_inner + i)
            for a in range(d):
                x[a] = 0
            kc = 0
            for t in range(n):
                tot = 0.0
                for a in range(d):
                    cp = C.conductance(ienv, fenv, bk, x, a)
                    x[a] -= 1
                    cm = C.conductance(ienv, fenv, bk, x, a)
                    x[a] += 1
                    w[2 * a] = cp * tilt[2 * a]
                    w[2 * a + 1] = cm * tilt[2 * a + 1]
                    tot += w[2 * a] + w[2 * a + 1]
                C.apply_move(x, C.pick(w, tot, C.counter_uniform(key, t)))
                if checkpoints[kc] == t + 1:
                    g = _local_value(ienv, fenv, bk, x, offs, axes, coefs, const) - center
                    s1[kc] += g
                    s2[kc] += g * g
                    kc += 1
        for k in range(K):
            sq[r, k] = (s1[k] * s1[k] - s2[k]) / (m_inner * (m_inner - 1.0))
    return q0w, sq
