"""Command line front end: ``run``, ``calibrate-L0``, ``oracle`` and ``report``.

Exit codes: 0 when every asserted check passed, 1 on configuration or usage
errors, 2 when an estimator failed or one of its checks did not pass.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import estimators as E
from .config import SUITES, ConfigError, ExperimentSpec, parse_config, serialize
from .regeneration import RegenerationError, calibrate_L0

CSV_COLUMNS = ("experiment_id", "lambda", "estimator_id", "component", "value", "stderr", "n_replicas",
               "horizon", "seed", "config_hash")
REGEN_COLUMNS = ("replica", "k", "tau_k", "dtau", "dx_e1", "block_fsum", "mode")
WORKERS_ENV = "CONDUCTANCE_LAB_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATOR = 0, 1, 2


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


class RunState:
    """Rows, reports and checks of one run."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.rows: list[dict] = []
        self.reports: dict = {}
        self.checks: dict = {}
        self.errors: dict = {}
        self.ledger: list = []
        self.extra_files: dict = {}

    def add(self, lam, estimator_id, component, value, stderr, n_replicas, horizon):
        self.rows.append({
            "experiment_id": self.spec.experiment_id, "lambda": float(lam), "estimator_id": estimator_id,
            "component": str(component), "value": float(value), "stderr": float(stderr),
            "n_replicas": int(n_replicas), "horizon": int(horizon), "seed": int(self.spec.seed),
            "config_hash": self.spec.config_hash,
        })

    def add_estimate(self, lam, est, component_prefix, horizon):
        vals = np.atleast_1d(np.asarray(est.value, dtype=float))
        ses = np.atleast_1d(np.asarray(est.stderr, dtype=float))
        shape = np.shape(est.value)
        for idx in np.ndindex(*shape) if shape else [()]:
            comp = component_prefix + ("[" + ",".join(str(i) for i in idx) + "]" if idx else "")
            v = np.asarray(est.value)[idx] if shape else vals[0]
            s = np.asarray(est.stderr)[idx] if shape else ses[0]
            self.add(lam, est.estimator_id, comp, v, s, est.n_replicas, horizon)


# ---------------------------------------------------------------- estimator dispatch


def _run_speed(state, route):
    spec = state.spec
    for i, lam in enumerate(l for l in spec.lambdas if l > 0):
        est = E.estimate_speed(spec, lam, route, i, state.ledger)
        state.add_estimate(lam, est, "v", est.notes["horizon"])


def _run_sigma(state):
    spec = state.spec
    est = E.estimate_sigma(spec, state.ledger)
    state.add_estimate(0.0, est, "sigma", est.notes["horizon"])
    d = spec.dimension
    off = ~np.eye(d, dtype=bool)
    state.checks["sigma:off_diagonal_zero"] = bool(np.all(np.abs(est.value[off]) <= 4 * est.stderr[off]))


def _run_steady(state, route):
    spec = state.spec
    for i, lam in enumerate(spec.lambdas):
        if route == "regen" and lam == 0:
            continue
        est = E.estimate_steady_state(spec, lam, None, route, i, state.ledger)
        state.add_estimate(lam, est, "f", spec.horizon_for(lam) if route != "torus_oracle" else 0)


def _run_lambda_f(state, route):
    spec = state.spec
    est = E.estimate_lambda_f(spec, None, route, ledger=state.ledger)
    lam = 0.0 if route == "clt_cov" else min(l for l in spec.lambdas if l > 0)
    horizon = max(est.notes.get("horizons", [est.notes.get("horizon", 0)]) or [0])
    state.add_estimate(lam, est, "lambda_f", horizon)
    if route == "girsanov":
        state.add(lam, "girsanov_norm", "mean_weight", est.notes["weight_mean"], est.notes["weight_mean_stderr"],
                  est.n_replicas, horizon)
        state.add(lam, "girsanov_norm", "ess_fraction", est.notes["ess"], 0.0, est.n_replicas, horizon)


def _run_einstein(state):
    spec = state.spec
    rep = E.einstein_report(spec, state.ledger)
    for r in rep.rows:
        a = r["component"]
        n, h = r["n_replicas"], r["horizon"]
        state.add(r["lam"], "einstein", f"v_over_lam[{a}]", r["v_over_lam"], r["v_over_lam_stderr"], n, h)
        state.add(r["lam"], "einstein", f"gap[{a}]", r["gap"], math.hypot(r["v_over_lam_stderr"], r["sigma_ell_stderr"]), n, h)
        if "closed_form" in r:
            state.add(r["lam"], "einstein", f"closed_form_v[{a}]", r["closed_form"], 0.0, n, h)
            state.add(r["lam"], "einstein", f"closed_form_v_over_lam[{a}]", r["closed_form"] / r["lam"], 0.0, n, h)
    for s in rep.info["slopes"]:
        a = s["component"]
        state.add(0.0, "einstein", f"slope[{a}]", s["slope"], s["slope_stderr"], spec.replicas, 0)
        state.add(0.0, "einstein", f"sigma_ell[{a}]", s["sigma_ell"], s["sigma_ell_stderr"], spec.replicas,
                  spec.sigma_horizon)
    state.reports["einstein"] = _jsonable(dict(rows=rep.rows, checks=rep.checks, info=rep.info))
    state.checks.update({f"einstein:{k}": v for k, v in rep.checks.items()})


def _run_expansion(state):
    spec = state.spec
    rep = E.steady_state_expansion_report(spec, ledger=state.ledger)
    for r in rep.rows:
        state.add(r["lam"], "expansion", "q_diff_over_lam", r["expansion"], r["expansion_stderr"], spec.replicas,
                  r["horizon"])
    state.add(0.0, "expansion", "lambda_f_clt", rep.info["lambda_f"], rep.info["lambda_f_stderr"], spec.replicas, 0)
    for e in rep.info["envelope"]:
        state.add(max(spec.lambdas), "expansion", f"girsanov[t={e['t']:g}]", e["girsanov"], e["girsanov_stderr"],
                  spec.replicas, 0)
        state.add(max(spec.lambdas), "expansion", f"envelope_gap[t={e['t']:g}]", e["gap"], e["gap_stderr"],
                  spec.replicas, 0)
    state.reports["expansion"] = _jsonable(dict(rows=rep.rows, checks=rep.checks, info=rep.info))
    if not rep.info["exploratory"]:
        state.checks.update({f"expansion:{k}": v for k, v in rep.checks.items()})


def _run_probes(state):
    spec = state.spec
    rep = E.apriori_probes(spec, ledger=state.ledger)
    a, bcd, e = rep.info["a"], rep.info["bcd"], rep.info["e"]
    lam = a["lam"]
    R = spec.probe_walks
    state.add(lam, "probe_a", "p_right_first", a["p"], a["stderr"], R, 0)
    for r in bcd["backtrack"]:
        state.add(lam, "probe_b", f"backtrack[n={r['n']}]", r["p"], r["stderr"], R, bcd["horizon"])
    for r in bcd["level_tails"]["rows"]:
        state.add(lam, "probe_c", f"late_level[n={r['n']}]", r["p"], r["stderr"], R, bcd["horizon"])
    for r in bcd["moments"]:
        state.add(lam, "probe_d", f"max_moment[p={r['p']},t={r['t']:g}]", r["value"], r["stderr"], R, bcd["horizon"])
    state.add(0.0, "probe_e", "cov", e["cov"], e["stderr"], spec.replicas, e["horizon"])
    if "f" in rep.info:
        fp = rep.info["f"]
        state.add(0.0, "probe_f", "slope", fp["slope"], fp["slope_stderr"], fp["replicas"], max(fp["n"]))
    state.reports["probes"] = _jsonable(dict(checks=rep.checks, info=rep.info))
    state.checks.update({f"probes:{k}": v for k, v in rep.checks.items()})


def _run_maxima(state):
    spec = state.spec
    out = {}
    for g in ("displacement", "f"):
        res = E.maxima_moment_probe(spec, g, ledger=state.ledger)
        for r in res["rows"]:
            state.add(res["lam"], f"maxima_{g}", f"norm[n={r['n']}]", r["norm"], r["stderr"], spec.replicas,
                      int(math.ceil(r["n"] / res["lam"] ** 2)))
        out[g] = res
    state.reports["maxima"] = _jsonable(out)


def _run_regen(state):
    spec = state.spec
    rep = E.regen_report(spec, ledger=state.ledger)
    for r in rep.rows:
        lam = r["lam"]
        for key in ("beta", "beta_max_min", "lag1", "lag2", "lag3", "exp_x", "exp_t", "speed"):
            se = r["lag2_stderr"] if key == "lag2" else (r["speed_stderr"] if key == "speed" else 0.0)
            state.add(lam, "regen_exact_coin", key, r[key], se, spec.regen_replicas, spec.levels)
    for i, dg in enumerate(rep.info["diagnostics"]):
        state.extra_files[f"regen_blocks_{i}.csv"] = list(dg.csv_rows())
    rep.info = {k: v for k, v in rep.info.items() if k != "diagnostics"}
    state.reports["regen"] = _jsonable(dict(rows=rep.rows, checks=rep.checks, info=rep.info))
    state.checks.update({f"regen:{k}": v for k, v in rep.checks.items()})


DISPATCH = {
    "speed": lambda s: _run_speed(s, "lln"),
    "speed_regen": lambda s: _run_speed(s, "regen"),
    "sigma": _run_sigma,
    "steady_timeavg": lambda s: _run_steady(s, "timeavg"),
    "steady_regen": lambda s: _run_steady(s, "regen"),
    "steady_torus": lambda s: _run_steady(s, "torus_oracle"),
    "lambda_f_clt": lambda s: _run_lambda_f(s, "clt_cov"),
    "lambda_f_girsanov": lambda s: _run_lambda_f(s, "girsanov"),
    "einstein": _run_einstein,
    "expansion": _run_expansion,
    "probes": _run_probes,
    "maxima": _run_maxima,
    "regen": _run_regen,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, E.Estimate):
        return _jsonable(dict(value=obj.value, stderr=obj.stderr, n_replicas=obj.n_replicas,
                              estimator_id=obj.estimator_id))
    return obj


# ---------------------------------------------------------------- output


def csv_text(rows, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in columns])
    return buf.getvalue()


def json_text(state: RunState) -> str:
    rows = [{c: (r[c] if isinstance(r[c], str) else fmt(r[c])) for c in CSV_COLUMNS} for r in state.rows]
    doc = dict(experiment_id=state.spec.experiment_id, config_hash=state.spec.config_hash, rows=rows,
               reports=state.reports, checks=state.checks, errors=state.errors)
    return json.dumps(doc, indent=1, sort_keys=True)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def emit_results(state: RunState, out: Path, fmt_name: str = "csv") -> dict:
    """Write the results file(s) and return their paths."""
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if fmt_name == "csv":
        _atomic_write(out / "results.csv", csv_text(state.rows))
        files["results"] = "results.csv"
    elif fmt_name == "json":
        _atomic_write(out / "results.json", json_text(state))
        files["results"] = "results.json"
    else:
        raise ConfigError(f"unknown format {fmt_name!r}")
    for name, rows in state.extra_files.items():
        _atomic_write(out / name, csv_text(rows, REGEN_COLUMNS))
        files[name] = name
    return files


def _write_manifest(out: Path, state: RunState, status: str, started: float, files: dict, exit_code=None):
    man = dict(config_hash=state.spec.config_hash, tool_version=__version__, status=status,
               started=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
               finished=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) if status != "incomplete" else None,
               outputs=files, seed_ledger=state.ledger, checks=state.checks, errors=state.errors,
               exit_code=exit_code, config=state.spec.to_dict(),
               replay="replica r of a stream: environment seed derive_key(env_seed, TAG_ENV, r), "
                      "walk key derive_key(walk_seed, TAG_WALK, r)")
    _atomic_write(out / "manifest.json", json.dumps(_jsonable(man), indent=1, sort_keys=True))


def set_workers(n: int | None) -> int:
    import numba
    if n is None:
        env = os.environ.get(WORKERS_ENV)
        n = int(env) if env else None
    if n is None:
        return numba.get_num_threads()
    if n < 1:
        raise ConfigError("workers must be positive")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


def run_suite(spec: ExperimentSpec, out: Path, fmt_name: str = "csv", estimators=None) -> int:
    """Run the estimators, write results and manifest, return the exit code."""
    state = RunState(spec)
    names = tuple(estimators if estimators is not None else spec.estimators)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    _write_manifest(out, state, "incomplete", started, {})
    (out / "config.yaml").write_text(serialize(spec))
    files = {}
    for name in names:
        try:
            DISPATCH[name](state)
        except (E.EstimatorError, RegenerationError) as exc:
            state.errors[name] = str(exc)
        files = emit_results(state, out, fmt_name)
        _write_manifest(out, state, "incomplete", started, files)
    code = EXIT_OK if (not state.errors and all(state.checks.values())) else EXIT_ESTIMATOR
    _write_manifest(out, state, "complete", started, files, code)
    return code


# ---------------------------------------------------------------- commands


def _load(args) -> ExperimentSpec:
    spec = parse_config(Path(args.config).read_text())
    if getattr(args, "seed_override", None) is not None:
        spec = spec.replace(seed=int(args.seed_override))
    return spec


def cmd_run(args) -> int:
    spec = _load(args)
    names = None
    if args.suite:
        if args.suite not in SUITES:
            raise ConfigError(f"unknown suite {args.suite!r}; expected one of {sorted(SUITES)}")
        names = SUITES[args.suite]
    set_workers(args.workers)
    code = run_suite(spec, Path(args.out), args.format, names)
    print(f"{spec.experiment_id}: exit {code}, outputs in {args.out}")
    return code


def cmd_calibrate(args) -> int:
    spec = _load(args)
    set_workers(args.workers)
    lam = args.lam if args.lam is not None else min(l for l in spec.lambdas if l > 0)
    cal = calibrate_L0(spec.field(), lam, n_seeds=args.seeds, n_walks=args.walks)
    for L0, freqs in cal.table.items():
        print(f"L0={L0} min={np.min(freqs):.4f} mean={np.mean(freqs):.4f}")
    print(f"calibrated L0: {cal.L0}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        doc = dict(lam=lam, L0=cal.L0, table={str(k): v.tolist() for k, v in cal.table.items()},
                   config_hash=spec.config_hash)
        _atomic_write(out / "calibration.json", json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK if cal.L0 is not None else EXIT_ESTIMATOR


def cmd_oracle(args) -> int:
    spec = _load(args)
    state = RunState(spec)
    f = spec.local_function()
    field = spec.field()
    state.add(0.0, "q0_exact", "f", f.q0_mean(field), 0.0, 1, 0)
    for i, lam in enumerate(spec.lambdas):
        est = E.estimate_steady_state(spec, lam, f, "torus_oracle", i, state.ledger)
        state.add_estimate(lam, est, "f", 0)
    text = csv_text(state.rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "oracle.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    man_path = out / "manifest.json"
    if not man_path.exists():
        raise ConfigError(f"no manifest in {out}")
    man = json.loads(man_path.read_text())
    print(f"config {man['config_hash']}  status {man['status']}  exit {man['exit_code']}")
    for k, v in sorted(man["checks"].items()):
        print(f"  {'PASS' if v else 'FAIL'}  {k}")
    for k, v in sorted(man["errors"].items()):
        print(f"  ERROR {k}: {v}")
    res = man["outputs"].get("results")
    if res and res.endswith(".csv"):
        with open(out / res) as fh:
            for row in csv.DictReader(fh):
                print(f"  {row['estimator_id']:>22} lam={float(row['lambda']):<6g} {row['component']:<28} "
                      f"{float(row['value']):.6g} +- {float(row['stderr']):.2g}")
    return EXIT_OK if man["status"] == "complete" else EXIT_ESTIMATOR


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conductance-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command")

    def common(sp, out_required=False):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--seed-override", type=int, default=None)

    r = sub.add_parser("run", help="run estimators or a suite")
    common(r, out_required=True)
    r.add_argument("--suite", choices=sorted(SUITES), default=None)
    r.add_argument("--format", choices=("csv", "json"), default="csv")

    c = sub.add_parser("calibrate-L0", help="smallest L0 with crossing frequency at least 2/3")
    common(c)
    c.add_argument("--lambda", dest="lam", type=float, default=None)
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--walks", type=int, default=2000)

    o = sub.add_parser("oracle", help="exact torus steady-state values")
    common(o)

    rp = sub.add_parser("report", help="summarize a finished run directory")
    rp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2; this tool reserves 2 for estimator failures
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    handlers = {"run": cmd_run, "calibrate-L0": cmd_calibrate, "oracle": cmd_oracle, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
