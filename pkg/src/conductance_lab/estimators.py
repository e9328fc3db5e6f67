"""Speed, diffusivity, steady-state and first-order-response estimators.

Every estimator draws its replicas from a named stream: replica ``r`` of
stream ``s`` uses the environment ``field.with_seed(env_seed).replica(r)``
and the walk key ``derive_key(walk_seed, TAG_WALK, r)`` with
``env_seed = derive_key(seed, TAG_ENV, s)`` and
``walk_seed = derive_key(seed, TAG_WALK, s)``. The seed ledger records both
seeds so any single trajectory can be replayed.

Annealed averages start the walk at the origin of a fresh environment. Where
the target is an average under Q_0, replicas are reweighted by
``sum_e omega(0, e)`` and the weights are self-normalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from numba import njit
from scipy.optimize import curve_fit

from . import _core as C
from ._kernels import (displacement_batch, functional_batch, nested_square_batch, trajectory_batch,
                       walk_codes, crossing_batch)
from .config import ExperimentSpec
from .lattice import BiasSpec, ConductanceField, PeriodicEnvironment, sample_periodic
from .oracle import periodic_stationary
from .regeneration import (HyperplaneGrid, RegenerationError, CoinStream, calibrate_beta, coin_trick_sample,
                           default_lookahead, strip_local_values, _record_from, MODE_APPROX)
from .stats import (Estimate, covariance_estimate, ess_fraction, fit_line, fit_through_origin, mean_estimate,
                    ratio_estimate)
from .walk import LocalFunction, WalkStream, _local_many

STREAM_IDS = {
    "speed": 1, "speed_regen": 2, "sigma": 3, "steady_timeavg": 4, "steady_regen": 5, "steady_torus": 6,
    "lambda_f_clt": 7, "lambda_f_girsanov": 8, "probe_a": 9, "probe_b": 10, "probe_e": 11, "probe_f": 12,
    "maxima": 13, "regen": 14,
}
ESS_MIN = 0.05


class EstimatorError(RuntimeError):
    """An estimator could not produce a valid result."""


class GirsanovDegeneracyError(EstimatorError):
    """Likelihood-ratio weights collapsed (effective sample size too small)."""


# ---------------------------------------------------------------- streams


@njit(cache=True)
def _bond_keys(env_seed, R):
    out = np.empty(R, dtype=np.uint64)
    for r in range(R):
        out[r] = C.bond_key(C.derive_key(env_seed, C.TAG_ENV, r))
    return out


@njit(cache=True)
def _walk_keys(walk_seed, R):
    out = np.empty(R, dtype=np.uint64)
    for r in range(R):
        out[r] = C.derive_key(walk_seed, C.TAG_WALK, r)
    return out


@dataclass
class Streams:
    name: str
    stream: int
    env_seed: int
    walk_seed: int
    replicas: int

    @classmethod
    def make(cls, spec: ExperimentSpec, name: str, lam_index: int, replicas: int, ledger=None) -> "Streams":
        s = STREAM_IDS[name] * 1000 + int(lam_index)
        env_seed = int(C.derive_key(np.uint64(spec.seed), C.TAG_ENV, np.uint64(s)))
        walk_seed = int(C.derive_key(np.uint64(spec.seed), C.TAG_WALK, np.uint64(s)))
        st = cls(name, s, env_seed, walk_seed, int(replicas))
        if ledger is not None:
            ledger.append(dict(estimator=name, lam_index=int(lam_index), stream=s, env_seed=env_seed,
                               walk_seed=walk_seed, replicas=int(replicas)))
        return st

    def bkeys(self, field: ConductanceField) -> np.ndarray:
        if field.is_deterministic:
            return np.full(self.replicas, field.bkey, dtype=np.uint64)
        return _bond_keys(np.uint64(self.env_seed), self.replicas)

    def wkeys(self) -> np.ndarray:
        return _walk_keys(np.uint64(self.walk_seed), self.replicas)

    def env(self, field: ConductanceField, r: int) -> ConductanceField:
        return field.with_seed(self.env_seed).replica(r)

    def walk(self, r: int) -> WalkStream:
        return WalkStream(self.walk_seed, r)


def _constant_value(f: LocalFunction, field: ConductanceField) -> float | None:
    """Value of ``f`` when ``f(theta_x omega)`` does not depend on ``x``, else ``None``."""
    if f.axes.size == 0:
        return float(f.const)
    if field.is_deterministic:
        ienv, fenv = field.kernel_args()
        return float(_local_many(ienv, fenv, field.bkey, np.zeros((1, field.dimension), dtype=np.int64),
                                 *f.kernel_args())[0])
    return None


def _exact(value, estimator_id, spec, n=0, **notes) -> Estimate:
    return Estimate(value, 0.0 * np.asarray(value, dtype=float), n, estimator_id, spec.config_hash, dict(notes))


# ---------------------------------------------------------------- speed and diffusivity


def _regen_blocks(field, bias, streams, n, W, f=None, d=None):
    """Approximate-mode blocks for every replica: per-block ``dtau``, ``dX`` (all axes), ``fsum``, group id."""
    grid = HyperplaneGrid(bias)
    ienv, fenv = field.kernel_args()
    fargs = f.kernel_args() if f is not None else LocalFunction.constant(field.dimension, 0.0).kernel_args()
    out_t, out_x, out_f, out_g, counts = [], [], [], [], []
    start = np.zeros(field.dimension, dtype=np.int64)
    tilt = bias.move_tilts()
    for r in range(streams.replicas):
        env = streams.env(field, r)
        codes, fvals = walk_codes(ienv, fenv, env.bkey, streams.walk(r).key, tilt, start, n, *fargs, f is not None)
        e1 = np.concatenate([[0], np.cumsum(np.where(codes == 0, 1, np.where(codes == 1, -1, 0)))]).astype(np.int64)
        rec = _record_from(e1, None, grid.L1, W, MODE_APPROX)
        counts.append(rec.count)
        if rec.count < 2:
            continue
        tau = rec.tau
        dx = np.empty((tau.size - 1, field.dimension))
        for a in range(field.dimension):
            step = np.where(codes == 2 * a, 1, np.where(codes == 2 * a + 1, -1, 0))
            pos = np.concatenate([[0], np.cumsum(step)])
            dx[:, a] = np.diff(pos[tau])
        out_t.append(np.diff(tau))
        out_x.append(dx)
        if f is not None:
            fp = np.concatenate([[0.0], np.cumsum(fvals)])
            out_f.append(np.diff(fp[tau]))
        out_g.append(np.full(tau.size - 1, r))
    if not out_t:
        raise RegenerationError("no regenerations found in any replica")
    dtau = np.concatenate(out_t).astype(float)
    if dtau.size < 2:
        raise RegenerationError("fewer than two inter-regeneration blocks")
    dx = np.concatenate(out_x)
    fs = np.concatenate(out_f) if out_f else np.zeros_like(dtau)
    return dtau, dx, fs, np.concatenate(out_g), np.array(counts)


def estimate_speed(spec: ExperimentSpec, lam: float, route: str = "lln", lam_index: int = 0,
                   ledger=None) -> Estimate:
    """Annealed speed vector ``v(lambda)``.

    ``lln``: mean of ``X_n / n`` over replicas. ``regen``: ratio of summed
    block displacements to summed block lengths between approximate
    regenerations, with lag-1 terms in the standard error.
    """
    if lam <= 0:
        raise EstimatorError("speed needs lambda > 0")
    field = spec.field()
    bias = spec.bias(lam)
    n = spec.horizon_for(lam)
    ienv, fenv = field.kernel_args()
    if route == "lln":
        st = Streams.make(spec, "speed", lam_index, spec.replicas, ledger)
        X, _ = displacement_batch(ienv, fenv, st.bkeys(field), st.wkeys(), bias.move_tilts(), n)
        est = mean_estimate(X / n, estimator_id="speed_lln")
        est.config_hash = spec.config_hash
        est.notes = dict(horizon=n)
        return est
    if route == "regen":
        st = Streams.make(spec, "speed_regen", lam_index, spec.regen_replicas, ledger)
        W = spec.lookahead if spec.lookahead is not None else default_lookahead(bias)
        if n <= W:
            raise EstimatorError(f"horizon {n} does not exceed the lookahead {W}")
        dtau, dx, _, g, counts = _regen_blocks(field, bias, st, n, W)
        vals, ses = [], []
        for a in range(field.dimension):
            e = ratio_estimate(dx[:, a], dtau, groups=g)
            vals.append(e.value)
            ses.append(e.stderr)
        return Estimate(np.array(vals), np.array(ses), int(dtau.size), "speed_regen", spec.config_hash,
                        dict(horizon=n, lookahead=W, blocks=int(dtau.size), regenerations=counts.tolist()))
    raise EstimatorError(f"unknown speed route {route!r}")


def estimate_sigma(spec: ExperimentSpec, ledger=None, horizon: int | None = None) -> Estimate:
    """``E[X_n X_n^T] / n`` at λ = 0 under Q_0-reweighted starts."""
    field = spec.field()
    bias = spec.bias(0.0)
    n = int(horizon if horizon is not None else spec.sigma_horizon)
    st = Streams.make(spec, "sigma", 0, spec.replicas, ledger)
    ienv, fenv = field.kernel_args()
    X, q0w = displacement_batch(ienv, fenv, st.bkeys(field), st.wkeys(), bias.move_tilts(), n)
    X = X.astype(float)
    d = field.dimension
    prods = (X[:, :, None] * X[:, None, :]).reshape(len(X), d * d) / n
    est = mean_estimate(prods, weights=q0w, estimator_id="sigma")
    val = est.value.reshape(d, d)
    se = est.stderr.reshape(d, d)
    val = 0.5 * (val + val.T)
    se = 0.5 * (se + se.T)
    return Estimate(val, se, spec.replicas, "sigma", spec.config_hash, dict(horizon=n))


# ---------------------------------------------------------------- steady state


def _torus_environments(spec: ExperimentSpec, lam_index: int, ledger=None) -> list[PeriodicEnvironment]:
    field = spec.field()
    st = Streams.make(spec, "steady_torus", lam_index, spec.torus_samples, ledger)
    return [sample_periodic(st.env(field, i), spec.torus_period) for i in range(spec.torus_samples)]


def torus_average(env: PeriodicEnvironment, bias: BiasSpec, f: LocalFunction) -> float:
    """Exact ``pi . f`` for the environment chain on one torus."""
    sol = periodic_stationary(env, bias)
    ienv, fenv = env.kernel_args()
    fv = _local_many(ienv, fenv, env.bkey, sol.sites, *f.kernel_args())
    return float(np.dot(sol.pi, fv))


def estimate_steady_state(spec: ExperimentSpec, lam: float, f: LocalFunction | None = None,
                          route: str = "timeavg", lam_index: int = 0, ledger=None,
                          torus: PeriodicEnvironment | None = None) -> Estimate:
    """``Q_lambda f`` by time averages, regeneration blocks or the torus chain.

    ``timeavg`` discards the first tenth of every path. With ``torus`` given,
    ``timeavg`` and ``torus_oracle`` run on that periodic environment instead
    of the infinite lattice.
    """
    field = spec.field()
    f = f if f is not None else spec.local_function()
    bias = spec.bias(lam)
    eid = f"steady_{route}"
    const = _constant_value(f, field if torus is None else torus.field)
    if const is not None and (torus is None or f.axes.size == 0):
        return _exact(const, eid, spec, route=route)
    if route == "timeavg":
        n = spec.horizon_for(lam)
        burn = n // 10
        st = Streams.make(spec, "steady_timeavg", lam_index, spec.replicas, ledger)
        if torus is None:
            ienv, fenv = field.kernel_args()
            bkeys = st.bkeys(field)
        else:
            ienv, fenv = torus.kernel_args()
            bkeys = np.full(spec.replicas, torus.bkey, dtype=np.uint64)
        tilt = bias.move_tilts()
        out = functional_batch(ienv, fenv, bkeys, st.wkeys(), tilt, tilt, bias.ell_array, n, burn,
                               *f.kernel_args(), 0.0, np.array([n], dtype=np.int64))
        est = mean_estimate(out[1] / (n - burn), estimator_id=eid)
        est.config_hash = spec.config_hash
        est.notes = dict(horizon=n, burn=burn, torus=torus is not None)
        return est
    if route == "regen":
        if lam <= 0:
            raise EstimatorError("regeneration route needs lambda > 0")
        n = spec.horizon_for(lam)
        st = Streams.make(spec, "steady_regen", lam_index, spec.regen_replicas, ledger)
        W = spec.lookahead if spec.lookahead is not None else default_lookahead(bias)
        if n <= W:
            raise EstimatorError(f"horizon {n} does not exceed the lookahead {W}")
        dtau, _, fs, g, counts = _regen_blocks(field, bias, st, n, W, f=f)
        est = ratio_estimate(fs, dtau, groups=g, estimator_id=eid)
        est.config_hash = spec.config_hash
        est.notes = dict(horizon=n, lookahead=W, blocks=int(dtau.size))
        return est
    if route == "torus_oracle":
        envs = [torus] if torus is not None else _torus_environments(spec, lam_index, ledger)
        vals = np.array([torus_average(e, bias, f) for e in envs])
        se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0.0
        return Estimate(float(vals.mean()), float(se), vals.size, eid, spec.config_hash,
                        dict(period=envs[0].period, values=vals.tolist()))
    raise EstimatorError(f"unknown steady-state route {route!r}")


# ---------------------------------------------------------------- first-order response


def _clt_cov_point(spec, field, fc, lam, lam_index, ledger):
    n = int(math.ceil(1.0 / lam**2))
    st = Streams.make(spec, "lambda_f_clt", lam_index, spec.replicas, ledger)
    ienv, fenv = field.kernel_args()
    b0 = spec.bias(0.0)
    tilt = b0.move_tilts()
    q0w, _, S, _, M, _, _, _ = functional_batch(
        ienv, fenv, st.bkeys(field), st.wkeys(), tilt, tilt, b0.ell_array, n, 0,
        *fc.kernel_args(), 0.0, np.array([n], dtype=np.int64))
    return covariance_estimate(lam * S[:, 0], lam * M[:, 0], weights=q0w, estimator_id="lambda_f_clt"), n


def _girsanov_point(spec, field, fc, lam, t, lam_index, ledger):
    n = int(math.ceil(t / lam**2))
    st = Streams.make(spec, "lambda_f_girsanov", lam_index, spec.replicas, ledger)
    ienv, fenv = field.kernel_args()
    b0 = spec.bias(0.0)
    tilt = b0.move_tilts()
    tilt_g = spec.bias(lam).move_tilts()
    q0w, _, S, _, _, logG, _, _ = functional_batch(
        ienv, fenv, st.bkeys(field), st.wkeys(), tilt, tilt_g, spec.bias(lam).ell_array, n, 0,
        *fc.kernel_args(), 0.0, np.array([n], dtype=np.int64))
    G = np.exp(logG[:, 0])
    ess = ess_fraction(q0w * G)
    norm = mean_estimate(G, weights=q0w, estimator_id="girsanov_norm")
    if ess < ESS_MIN:
        raise GirsanovDegeneracyError(f"effective sample size {ess:.3g} below {ESS_MIN} (lambda = {lam}, t = {t})")
    est = mean_estimate(lam * S[:, 0] * G / t, weights=q0w, estimator_id="lambda_f_girsanov")
    est.notes = dict(lam=lam, t=t, horizon=n, ess=ess, weight_mean=norm.value, weight_mean_stderr=norm.stderr,
                     weight_max=float(G.max()))
    return est


def estimate_lambda_f(spec: ExperimentSpec, f: LocalFunction | None = None, route: str = "clt_cov",
                      lams=None, t: float | None = None, ledger=None) -> Estimate:
    """First-order coefficient ``Lambda f`` of the steady state.

    ``f`` is centered with its exact Q_0 mean. ``clt_cov``: Q_0-weighted
    covariance of ``lambda sum_{k<n} f(env_k)`` and ``lambda M_n`` at
    ``n = 1/lambda^2`` from unbiased runs, one point per λ, extrapolated to
    λ = 0 by a weighted line when the grid has two or more points.
    ``girsanov``: ``E[lambda sum_{k<n} f(env_k) G(lambda, n)] / t`` with
    ``n = t / lambda^2``, for the first λ of the grid.
    """
    field = spec.field()
    f = f if f is not None else spec.local_function()
    fc = f.centered(field)
    lams = tuple(l for l in (lams if lams is not None else spec.lambdas) if l > 0)
    if not lams:
        raise EstimatorError("Lambda f needs at least one lambda > 0")
    eid = f"lambda_f_{route}"
    if _constant_value(fc, field) is not None:
        return _exact(0.0, eid, spec, route=route)
    if route == "clt_cov":
        pts = [_clt_cov_point(spec, field, fc, lam, i, ledger) for i, lam in enumerate(lams)]
        vals = np.array([p[0].value for p in pts])
        ses = np.array([p[0].stderr for p in pts])
        notes = dict(lambdas=list(lams), points=vals.tolist(), point_stderr=ses.tolist(),
                     horizons=[p[1] for p in pts])
        if len(lams) == 1:
            return Estimate(vals[0], ses[0], spec.replicas, eid, spec.config_hash, notes)
        beta, se = fit_line(np.array(lams), vals, ses)
        notes["slope"] = float(beta[1])
        return Estimate(beta[0], se[0], spec.replicas * len(lams), eid, spec.config_hash, notes)
    if route == "girsanov":
        tt = spec.girsanov_t if t is None else t
        est = _girsanov_point(spec, field, fc, lams[0], tt, 0, ledger)
        est.config_hash = spec.config_hash
        est.estimator_id = eid
        return est
    raise EstimatorError(f"unknown Lambda f route {route!r}")


# ---------------------------------------------------------------- reports


@dataclass
class Report:
    name: str
    rows: list = dc_field(default_factory=list)
    checks: dict = dc_field(default_factory=dict)
    info: dict = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(bool(v) for v in self.checks.values())


def gap_monotone(lams, gaps, ses, k: float = 4.0) -> bool:
    """Gaps may not grow as λ decreases by more than ``k`` combined stderr."""
    order = np.argsort(lams)
    g = np.asarray(gaps)[order]
    s = np.asarray(ses)[order]
    return bool(all(g[i] <= g[i + 1] + k * math.hypot(s[i], s[i + 1]) for i in range(len(g) - 1)))


def homogeneous_speed(lam: float, d: int) -> float:
    """``v . e_1`` in a constant environment with ``ell = e_1``."""
    return math.sinh(lam) / (math.cosh(lam) + d - 1)


def einstein_report(spec: ExperimentSpec, ledger=None, sigma: Estimate | None = None) -> Report:
    """``v(lambda)/lambda`` against ``Sigma ell`` over the λ grid."""
    lams = [l for l in spec.lambdas if l > 0]
    if len(lams) < 3:
        raise EstimatorError("Einstein report needs at least three positive lambdas")
    field = spec.field()
    d = field.dimension
    ell = spec.bias(lams[0]).ell_array
    sig = sigma if sigma is not None else estimate_sigma(spec, ledger)
    sl = sig.value @ ell
    sl_se = np.sqrt((sig.stderr**2) @ (ell**2))
    rep = Report("einstein")
    speeds = []
    for i, lam in enumerate(lams):
        v = estimate_speed(spec, lam, "lln", i, ledger)
        speeds.append(v)
        for a in range(d):
            row = dict(lam=lam, component=a, v=v.value[a], v_stderr=v.stderr[a], v_over_lam=v.value[a] / lam,
                       v_over_lam_stderr=v.stderr[a] / lam, sigma_ell=sl[a], sigma_ell_stderr=sl_se[a],
                       gap=abs(v.value[a] / lam - sl[a]), n_replicas=v.n_replicas, horizon=v.notes["horizon"])
            if field.is_deterministic and a == 0 and np.allclose(ell, np.eye(d)[0]):
                row["closed_form"] = homogeneous_speed(lam, d)
            rep.rows.append(row)
    lam_arr = np.array(lams)
    slopes = []
    for a in range(d):
        vs = np.array([v.value[a] for v in speeds])
        ses = np.array([v.stderr[a] for v in speeds])
        b, bse = fit_through_origin(lam_arr, vs, ses)
        z = (b - sl[a]) / math.hypot(bse, sl_se[a]) if math.hypot(bse, sl_se[a]) > 0 else 0.0
        slopes.append(dict(component=a, slope=b, slope_stderr=bse, sigma_ell=sl[a], sigma_ell_stderr=sl_se[a], z=z))
    main = int(np.argmax(np.abs(ell)))
    gaps = [r["gap"] for r in rep.rows if r["component"] == main]
    gse = [r["v_over_lam_stderr"] for r in rep.rows if r["component"] == main]
    rep.info = dict(sigma=sig.value.tolist(), sigma_stderr=sig.stderr.tolist(), slopes=slopes)
    rep.checks["slope_matches_sigma"] = abs(slopes[main]["z"]) <= 4.0
    rep.checks["gap_non_increasing"] = gap_monotone(lams, gaps, gse)
    rep.checks["sigma_off_diagonal_zero"] = bool(np.all(
        np.abs(sig.value[~np.eye(d, dtype=bool)]) <= 4.0 * sig.stderr[~np.eye(d, dtype=bool)] + 1e-300))
    return rep


def steady_state_expansion_report(spec: ExperimentSpec, f: LocalFunction | None = None, ledger=None,
                                  envelope_ts=(1.0, 2.0, 4.0)) -> Report:
    """``(Q_lambda f - Q_0 f)/lambda`` over the grid against ``Lambda f``."""
    field = spec.field()
    f = f if f is not None else spec.local_function()
    fc = f.centered(field)
    lams = [l for l in spec.lambdas if l > 0]
    rep = Report("expansion")
    lf = estimate_lambda_f(spec, fc, "clt_cov", lams=lams, ledger=ledger)
    exp_vals, exp_ses = [], []
    for i, lam in enumerate(lams):
        q = estimate_steady_state(spec, lam, fc, "timeavg", i, ledger)
        val, se = q.value / lam, q.stderr / lam
        exp_vals.append(val)
        exp_ses.append(se)
        rep.rows.append(dict(lam=lam, expansion=val, expansion_stderr=se, lambda_f=lf.value,
                             lambda_f_stderr=lf.stderr, horizon=q.notes.get("horizon", 0)))
    checks = {}
    for i in range(len(lams)):
        z = (exp_vals[i] - lf.value) / max(math.hypot(exp_ses[i], lf.stderr), 1e-300)
        checks[f"lambda={lams[i]}:matches_lambda_f"] = abs(z) <= 4.0 or (exp_vals[i] == lf.value)
        for j in range(i + 1, len(lams)):
            zz = (exp_vals[i] - exp_vals[j]) / max(math.hypot(exp_ses[i], exp_ses[j]), 1e-300)
            checks[f"lambda={lams[i]}~{lams[j]}"] = abs(zz) <= 4.0 or exp_vals[i] == exp_vals[j]
    env = []
    if _constant_value(fc, field) is None and envelope_ts:
        lam = max(lams)
        ref, ref_se = exp_vals[lams.index(lam)], exp_ses[lams.index(lam)]
        for t in envelope_ts:
            g = estimate_lambda_f(spec, fc, "girsanov", lams=[lam], t=t, ledger=ledger)
            env.append(dict(t=t, girsanov=g.value, girsanov_stderr=g.stderr, gap=abs(g.value - ref),
                            gap_stderr=math.hypot(g.stderr, ref_se), envelope=t ** -0.25, ess=g.notes["ess"]))
    rep.checks = checks
    rep.info = dict(lambda_f=lf.value, lambda_f_stderr=lf.stderr, lambda_f_notes=lf.notes, envelope=env,
                    q0f=f.q0_mean(field), exploratory=field.dimension < 3)
    return rep


# ---------------------------------------------------------------- a-priori probes


def _binom(k, n):
    p = k / n
    return p, math.sqrt(max(p * (1 - p), 1.0 / n) / n)


def probe_hitting(spec: ExperimentSpec, lam: float, lam_index: int = 0, ledger=None) -> dict:
    """Probe (a): annealed ``P(T_1 < T_-1)`` for the planes ``+-L0/lambda1``."""
    field = spec.field()
    bias = spec.bias(lam)
    half = spec.L0 * bias.inv_lambda1
    st = Streams.make(spec, "probe_a", lam_index, spec.probe_walks, ledger)
    ienv, fenv = field.kernel_args()
    cap = int(400 * half * half + 10**5)
    out = crossing_batch(ienv, fenv, st.bkeys(field), st.wkeys(), bias.move_tilts(), half, half, cap)
    done = out >= 0
    p, se = _binom(int(out[done].sum()), int(done.sum()))
    return dict(lam=lam, L0=spec.L0, plane=half, p=p, stderr=se, unfinished=int((~done).sum()),
                ok=p >= 2.0 / 3.0 - 4.0 * se)


def probe_paths(spec: ExperimentSpec, lam: float, lam_index: int = 0, ledger=None,
                ts=(1.0, 2.0, 4.0, 8.0), ps=(1, 2, 4), n_levels: int = 6) -> dict:
    """Probes (b), (c), (d) from one batch of annealed paths.

    (b) frequency of reaching ``-n L1/4`` within the horizon against ``2^-n``;
    (c) ``P(T_n >= C n / lambda^2)`` with ``C`` twice the mean of
    ``lambda^2 T_1``; (d) ``E[max_{s<=t/lambda^2} |lambda X_s|_1^p] / t^p``.
    """
    field = spec.field()
    bias = spec.bias(lam)
    L1 = bias.L1
    n = max(spec.horizon_for(lam), int(math.ceil(max(ts) / lam**2)), int(math.ceil(50 * L1 / lam)))
    cps = np.array(sorted({int(math.ceil(t / lam**2)) for t in ts} | {n}), dtype=np.int64)
    st = Streams.make(spec, "probe_b", lam_index, spec.probe_walks, ledger)
    ienv, fenv = field.kernel_args()
    Xc, amax, _, xmin, hits = trajectory_batch(ienv, fenv, st.bkeys(field), st.wkeys(), bias.move_tilts(), n,
                                               cps, L1, n_levels)
    R = spec.probe_walks
    back = []
    for m in range(1, 7):
        k = int(np.sum(xmin <= -(m * L1) // 4))
        p, se = _binom(k, R)
        back.append(dict(n=m, p=p, stderr=se, bound=2.0**-m, ok=p <= 2.0**-m + 4 * se))
    T1 = hits[:, 0]
    reached = T1 >= 0
    Cc = 2.0 * float(np.mean(lam**2 * T1[reached])) if reached.any() else float("nan")
    tails = []
    for m in range(1, n_levels + 1):
        Tm = hits[:, m - 1]
        late = (Tm < 0) | (Tm >= Cc * m / lam**2)
        p, se = _binom(int(late.sum()), R)
        tails.append(dict(n=m, p=p, stderr=se))
    moments = []
    for p in ps:
        for t in ts:
            c = int(math.ceil(t / lam**2))
            k = int(np.searchsorted(cps, c))
            vals = (lam * amax[:, k].astype(float)) ** p / t**p
            moments.append(dict(p=p, t=t, value=float(vals.mean()), stderr=float(vals.std(ddof=1) / math.sqrt(R))))
    flat = {}
    for p in ps:
        rows = [m for m in moments if m["p"] == p]
        first = rows[0]
        flat[p] = all(r["value"] <= first["value"] + 4 * math.hypot(r["stderr"], first["stderr"]) for r in rows[1:])
    return dict(lam=lam, horizon=n, L1=L1, backtrack=back, level_tails=dict(C=Cc, rows=tails), moments=moments,
                moments_flat=flat)


def probe_orthogonality(spec: ExperimentSpec, f: LocalFunction | None = None, ledger=None,
                        horizon: int | None = None) -> dict:
    """Probe (e): Q_0-weighted ``Cov(X_n . ell, sum_k f(env_k))`` at λ = 0."""
    field = spec.field()
    f = (f if f is not None else spec.local_function()).centered(field)
    n = int(horizon if horizon is not None else spec.sigma_horizon)
    b0 = spec.bias(0.0)
    st = Streams.make(spec, "probe_e", 0, spec.replicas, ledger)
    ienv, fenv = field.kernel_args()
    tilt = b0.move_tilts()
    q0w, _, S, _, _, _, _, X = functional_batch(ienv, fenv, st.bkeys(field), st.wkeys(), tilt, tilt, b0.ell_array,
                                                n, 0, *f.kernel_args(), 0.0, np.array([n], dtype=np.int64))
    proj = X.astype(float) @ b0.ell_array
    c = covariance_estimate(proj / math.sqrt(n), S[:, 0] / math.sqrt(n), weights=q0w)
    t = c.value / c.stderr if c.stderr > 0 else 0.0
    return dict(horizon=n, cov=c.value, stderr=c.stderr, t=t, ok=abs(t) <= 4.0)


def power_law_slope(n, y, se) -> tuple[float, float]:
    """Exponent ``b`` of ``y = A n^b`` by weighted least squares on the raw values.

    Working on ``y`` rather than ``log y`` keeps points whose estimate is
    zero or negative from noise.
    """
    pos = y > 0
    if pos.sum() >= 2:
        b0 = np.polyfit(np.log(n[pos]), np.log(y[pos]), 1)
        p0 = (float(np.exp(b0[1])), float(b0[0]))
    else:
        p0 = (float(abs(y[0]) * n[0]), -1.0)
    try:
        popt, pcov = curve_fit(lambda x, A, b: A * x**b, n, y, p0=p0, sigma=se, absolute_sigma=True, maxfev=20000)
    except RuntimeError:
        return float("nan"), float("nan")
    return float(popt[1]), float(np.sqrt(pcov[1, 1]))


def probe_variance_decay(spec: ExperimentSpec, f: LocalFunction | None = None, ledger=None,
                         replicas: int | None = None) -> dict:
    """Probe (f): slope of ``log E[(E_omega f(env_n))^2]`` against ``log n``.

    The inner quenched mean is estimated by ``nested_inner`` walks per
    environment with the unbiased pair estimator ``(S^2 - sum g^2) / (m (m-1))``;
    the outer average is Q_0-weighted.
    """
    field = spec.field()
    f = (f if f is not None else spec.local_function()).centered(field)
    R = int(replicas if replicas is not None else spec.replicas)
    st = Streams.make(spec, "probe_f", 0, R, ledger)
    ienv, fenv = field.kernel_args()
    cps = np.array(spec.nested_checkpoints, dtype=np.int64)
    q0w, sq = nested_square_batch(ienv, fenv, st.bkeys(field), np.uint64(st.walk_seed), spec.bias(0.0).move_tilts(),
                                  cps, spec.nested_inner, *f.kernel_args(), 0.0)
    est = mean_estimate(sq, weights=q0w)
    vals = np.asarray(est.value)
    ses = np.asarray(est.stderr)
    slope, slope_se = power_law_slope(cps.astype(float), vals, ses)
    bound = -field.dimension / 2 + 0.2
    return dict(n=cps.tolist(), second_moment=vals.tolist(), stderr=ses.tolist(), slope=slope,
                slope_stderr=slope_se, bound=bound, ok=bool(slope <= bound), replicas=R)


def apriori_probes(spec: ExperimentSpec, lam: float | None = None, ledger=None) -> Report:
    lam = lam if lam is not None else min(l for l in spec.lambdas if l > 0)
    rep = Report("probes")
    a = probe_hitting(spec, lam, 0, ledger)
    bcd = probe_paths(spec, lam, 0, ledger)
    e = probe_orthogonality(spec, ledger=ledger)
    rep.info = dict(a=a, bcd=bcd, e=e)
    rep.checks = dict(a=a["ok"], b=all(r["ok"] for r in bcd["backtrack"]), d=all(bcd["moments_flat"].values()),
                      e=e["ok"])
    if spec.dimension >= 3:
        fprobe = probe_variance_decay(spec, ledger=ledger)
        rep.info["f"] = fprobe
        rep.checks["f"] = fprobe["ok"]
    return rep


def maxima_moment_probe(spec: ExperimentSpec, g: str = "f", lam: float | None = None, ledger=None,
                        ns=None) -> dict:
    """L^{3/2} norm of ``max_{m <= n/lambda^2} |lambda sum_{k<m} g_k|`` as a function of ``n``.

    ``g = "f"`` uses the centered local function of the spec, ``"displacement"``
    the step ``Delta X . e_1`` and ``"zero"`` the null functional. A fit of
    ``log C + c sqrt(n)`` on the three smallest ``n`` is extrapolated to the
    largest.
    """
    field = spec.field()
    lam = lam if lam is not None else min(l for l in spec.lambdas if l > 0)
    ns = tuple(ns if ns is not None else spec.maxima_n)
    cps = np.array([int(math.ceil(n / lam**2)) for n in ns], dtype=np.int64)
    N = int(cps[-1])
    st = Streams.make(spec, "maxima", 0, spec.replicas, ledger)
    ienv, fenv = field.kernel_args()
    bias = spec.bias(lam)
    tilt = bias.move_tilts()
    if g == "zero":
        mx = np.zeros((spec.replicas, len(ns)))
    elif g == "displacement":
        _, _, emax, _, _ = trajectory_batch(ienv, fenv, st.bkeys(field), st.wkeys(), tilt, N, cps, bias.L1, 0)
        mx = emax.astype(float)
    elif g == "f":
        fc = spec.local_function().centered(field)
        out = functional_batch(ienv, fenv, st.bkeys(field), st.wkeys(), tilt, tilt, bias.ell_array, N, 0,
                               *fc.kernel_args(), 0.0, cps)
        mx = out[3]
    else:
        raise EstimatorError(f"unknown functional {g!r}")
    vals = (lam * mx) ** 1.5
    m = vals.mean(axis=0)
    mse = vals.std(axis=0, ddof=1) / math.sqrt(len(vals))
    norm = m ** (2.0 / 3.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        nse = np.where(m > 0, (2.0 / 3.0) * m ** (-1.0 / 3.0) * mse, 0.0)
    rows = [dict(n=n, norm=float(a), stderr=float(b)) for n, a, b in zip(ns, norm, nse)]
    out = dict(g=g, lam=lam, rows=rows)
    if len(ns) >= 4 and np.all(norm[:3] > 0):
        A = np.column_stack([np.ones(3), np.sqrt(np.array(ns[:3], dtype=float))])
        coef, *_ = np.linalg.lstsq(A, np.log(norm[:3]), rcond=None)
        pred = float(np.exp(coef[0] + coef[1] * math.sqrt(ns[-1])))
        out.update(C=float(np.exp(coef[0])), c=float(coef[1]), predicted=pred,
                   ok=bool(norm[-1] - 4 * nse[-1] <= pred))
    else:
        out.update(C=0.0, c=0.0, predicted=0.0, ok=bool(np.all(norm == 0)) if g == "zero" else True)
    return out


# ---------------------------------------------------------------- regeneration diagnostics


@dataclass
class RegenDiagnostics:
    lam: float
    beta: float
    dtau: np.ndarray
    dx: np.ndarray
    groups: np.ndarray
    taus: np.ndarray
    fsum: np.ndarray
    lag: dict
    exp_moments: dict
    speed: Estimate
    beta_max_min: float
    first_block_regens: int

    def csv_rows(self, mode="exact-coin"):
        k = 0
        for i in range(self.dtau.size):
            k = k + 1 if i > 0 and self.groups[i] == self.groups[i - 1] else 1
            yield dict(replica=int(self.groups[i]), k=k, tau_k=int(self.taus[i]), dtau=int(self.dtau[i]),
                       dx_e1=int(self.dx[i]), block_fsum=float(self.fsum[i]), mode=mode)


def regen_diagnostics(spec: ExperimentSpec, lam: float, lam_index: int = 0, ledger=None,
                      cs_x=(0.01, 0.02, 0.05), cs_t=(0.002, 0.005, 0.01)) -> RegenDiagnostics:
    """Exact-coin blocks on strips for one λ.

    ``regen_replicas`` strip environments with ``levels`` levels each; the
    coin parameter is the configured ``beta`` or 0.9 of the smallest
    ``beta_max`` over calibration slabs. Candidates closer than the lookahead
    to the end of a path are not tested. Lag correlations are pooled over
    consecutive blocks of the same replica; the first block is dropped.
    """
    field = spec.field()
    bias = spec.bias(lam)
    st = Streams.make(spec, "regen", lam_index, spec.regen_replicas, ledger)
    if spec.beta is not None:
        beta = float(spec.beta)
    else:
        beta, _ = calibrate_beta(field.with_seed(st.env_seed), bias, spec.cross_section,
                                 back_levels=spec.back_levels)
    W = spec.lookahead if spec.lookahead is not None else default_lookahead(bias)
    f = spec.local_function()
    dts, dxs, gs, ts, fss = [], [], [], [], []
    bmin = 1.0
    for r in range(spec.regen_replicas):
        env = st.env(field, r)
        coins = CoinStream(int(C.derive_key(np.uint64(st.walk_seed), C.TAG_COIN, np.uint64(r))), beta)
        cp = coin_trick_sample(env, bias, spec.cross_section, spec.levels, coins, st.walk(r),
                               back_levels=spec.back_levels, lookahead=W)
        bmin = min(bmin, float(cp.beta_max.min()))
        tau = cp.record.tau
        if tau.size < 2:
            continue
        e1 = cp.path.e1_positions()
        fp = np.concatenate([[0.0], np.cumsum(strip_local_values(env, spec.cross_section, cp.path, f))])
        fss.append(np.diff(fp[tau]))
        dts.append(np.diff(tau))
        dxs.append(np.diff(e1[tau]))
        gs.append(np.full(tau.size - 1, r))
        ts.append(tau[:-1])
    if not dts:
        raise RegenerationError("no inter-regeneration blocks")
    dtau = np.concatenate(dts)
    dx = np.concatenate(dxs)
    g = np.concatenate(gs)
    lag = {}
    for m in (1, 2, 3):
        y = dx - dx.mean()
        same = g[m:] == g[:-m]
        prod = (y[m:] * y[:-m])[same]
        den = np.mean(y**2)
        lag[m] = (float(prod.mean() / den), float(prod.std(ddof=1) / math.sqrt(prod.size) / den))
    em = {}
    for name, vals, cs in (("x", lam * dx, cs_x), ("t", lam**2 * dtau, cs_t)):
        rows = []
        for c in cs:
            w = np.exp(c * vals)
            rows.append(dict(c=c, value=float(w.mean()), stderr=float(w.std(ddof=1) / math.sqrt(w.size))))
        em[name] = rows
    speed = ratio_estimate(dx.astype(float), dtau.astype(float), groups=g, estimator_id="speed_exact_coin")
    return RegenDiagnostics(lam, beta, dtau, dx, g, np.concatenate(ts), np.concatenate(fss), lag, em, speed, bmin,
                            int(dtau.size))


def regen_report(spec: ExperimentSpec, ledger=None, c_x: float = 0.02, c_t: float = 0.005,
                 max_ratio: float = 2.0) -> Report:
    lams = [l for l in spec.lambdas if l > 0]
    rep = Report("regen")
    diags = []
    for i, lam in enumerate(lams):
        dg = regen_diagnostics(spec, lam, i, ledger, cs_x=(0.01, c_x, 0.05), cs_t=(0.002, c_t, 0.01))
        diags.append(dg)
        rep.rows.append(dict(lam=lam, beta=dg.beta, beta_max_min=dg.beta_max_min, blocks=int(dg.dtau.size),
                             lag1=dg.lag[1][0], lag2=dg.lag[2][0], lag2_stderr=dg.lag[2][1], lag3=dg.lag[3][0],
                             exp_x=dg.exp_moments["x"][1]["value"], exp_t=dg.exp_moments["t"][1]["value"],
                             speed=dg.speed.value, speed_stderr=dg.speed.stderr))
        rep.checks[f"lambda={lam}:lag2"] = abs(dg.lag[2][0]) <= 4 * dg.lag[2][1]
    ex = [r["exp_x"] for r in rep.rows]
    et = [r["exp_t"] for r in rep.rows]
    rep.checks["exp_moments_finite"] = bool(np.all(np.isfinite(ex)) and np.all(np.isfinite(et)))
    rep.checks["exp_moments_stable"] = bool(max(ex) / min(ex) <= max_ratio and max(et) / min(et) <= max_ratio)
    rep.info = dict(c_x=c_x, c_t=c_t, max_ratio=max_ratio, diagnostics=diags)
    return rep
