"""``fv-lab`` command line interface.

Subcommands: run, replicate, variance, compare-discrete, diagnose-qv and
exact-law.  Every subcommand accepts ``--config``, ``--seed``, ``--threads``,
``--out-dir`` and ``--format json|csv``.  Exit status is 0 when every enabled
check passes, 1 when a check fails and 2 on configuration or usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .discrete import mesh_from_survival, run_discrete, sigma_tilde, uniform_mesh
from .engine import qv_integrand, run_crude_mc, run_fleming_viot, write_event_log
from .errors import CheckFailed, ConfigError, FvLabError, OracleMissing
from .estimators import (
    INDICATOR_F,
    CheckReport,
    clt_check,
    eta_hat,
    gamma_hat,
    l2_bound_check,
    replicate,
)
from .rng import STREAM_DERIVATION, stream
from .variance import (
    ptn_exact_law,
    sigma2_final,
    sigma2_path,
    sigma2_path_curve,
    sigma2_two_state,
    variance_report,
)

# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if v is None:
        return ""
    return v


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def emit_plotdata(path, header, rows) -> Path:
    """Headered CSV (comma separated, LF endings) for external plotting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows))
    return path


def _clean(obj):
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def json_text(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


class Emitter:
    def __init__(self, out_dir, fmt):
        self.out_dir = Path(out_dir) if out_dir else None
        self.fmt = fmt
        self.formats = ("json", "csv")
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        return None if self.out_dir is None else self.out_dir / name

    def write(self, name, text):
        if self.out_dir is not None:
            (self.out_dir / name).write_text(text)

    def result(self, stem, payload: dict, header=None, rows=None):
        """Write ``stem.json`` and ``stem.csv`` and print the requested format."""
        jt = json_text(payload)
        if "json" in self.formats:
            self.write(f"{stem}.json", jt)
        ct = None
        if header is not None:
            ct = csv_text(header, rows)
            if "csv" in self.formats:
                self.write(f"{stem}.csv", ct)
        sys.stdout.write(ct if (self.fmt == "csv" and ct is not None) else jt)

    def plot(self, name, header, rows):
        if self.out_dir is not None:
            emit_plotdata(self.out_dir / name, header, rows)


# --------------------------------------------------------------------------
# configuration helpers
# --------------------------------------------------------------------------


def _load_config(args, em=None, required=True, default_model=None) -> cfgmod.ExperimentConfig:
    if args.config:
        cfg = cfgmod.load(args.config)
    elif required:
        raise ConfigError("--config is required for this subcommand")
    else:
        cfg = cfgmod.parse_config({"model": default_model})
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    if em is not None:
        em.formats = tuple(cfg.outputs.formats)
    return cfg


def _threads(args):
    return args.threads or os.cpu_count() or 1


def _mesh(model, run_cfg):
    n = run_cfg.mesh_n or 50
    if model.oracle is not None:
        return mesh_from_survival(model.oracle, n, run_cfg.T)
    return uniform_mesh(run_cfg.T, n)


def _clt_target(model, obs, method, T, mesh=None):
    oracle = model.oracle
    if oracle is None:
        raise OracleMissing(f"model {model.name!r} has no analytic variance target")
    if method == "discrete":
        return sigma_tilde(oracle, obs, mesh)
    if method == "crude":
        g = oracle.gamma(T, obs.func)
        return oracle.gamma(T, lambda x: np.square(obs.func(x))) - g * g
    return sigma2_final(oracle, obs, T)


def _run_checks(cfg, model, observables, summary, mesh=None):
    reports = []
    checks = cfg.checks
    T = summary.T
    if checks.clt is not None:
        for name in checks.clt.observables:
            obs = observables[name]
            target = _clt_target(model, obs, summary.method, T, mesh)
            reports.append(clt_check(summary, target, checks.clt.rel_tol, name, level=checks.clt.level))
    if checks.l2_bound is not None:
        for name in checks.l2_bound.observables:
            reports.append(l2_bound_check(summary, observables[name].sup, name))
    if checks.mean is not None:
        for name in checks.mean.observables:
            o = summary.observables[name]
            if o.target_gamma is None:
                raise OracleMissing(f"no oracle target for the mean of {name!r}")
            err = abs(o.gamma.mean - o.target_gamma)
            tol = checks.mean.z * o.gamma.se + checks.mean.bias_allowance
            reports.append(CheckReport(f"mean[{name}]", bool(err <= tol), o.gamma.mean, o.target_gamma, tolerance=tol))
    return reports


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_run(args, em: Emitter) -> int:
    cfg = _load_config(args, em)
    model = cfg.build_model()
    observables = cfg.build_observables()
    r = cfg.run
    rng = stream(cfg.seed, 0)
    if r.method == "fv":
        run = run_fleming_viot(model, r.N, r.T, rng=rng, mode=r.mode, dt=r.dt, log_events=cfg.outputs.event_log)
    elif r.method == "crude":
        run = run_crude_mc(model, r.N, r.T, rng=rng, dt=r.dt)
    else:
        run = run_discrete(model, r.N, _mesh(model, r), rng=rng)
    payload = {
        "config": cfg.to_dict(),
        "stream_derivation": STREAM_DERIVATION,
        "model": model.name,
        "method": r.method,
        "mode": run.mode,
        "N": r.N,
        "T": r.T,
        "failed": bool(run.failed),
        "failure": run.failure,
        "p_hat": None if run.failed else run.p_hat,
        "branchings": getattr(run, "B", None) if r.method == "fv" else None,
        "observables": {}
        if run.failed
        else {o.name: {"gamma_hat": gamma_hat(run, o), "eta_hat": eta_hat(run, o)} for o in observables},
    }
    rows = [[name, v["gamma_hat"], v["eta_hat"]] for name, v in payload["observables"].items()]
    em.result("run", payload, ["observable", "gamma_hat", "eta_hat"], rows)
    if cfg.outputs.event_log and getattr(run, "event_log", None) is not None and em.out_dir is not None:
        write_event_log(run.event_log, em.path("events.csv"))
    return 0


def cmd_replicate(args, em: Emitter) -> int:
    cfg = _load_config(args, em)
    model = cfg.build_model()
    observables = cfg.build_observables()
    r = cfg.run
    mesh = _mesh(model, r) if r.method == "discrete" else None
    summary = replicate(
        model, r.N, r.T, r.R, observables, seed=cfg.seed, method=r.method, mode=r.mode, dt=r.dt, mesh=mesh,
        threads=_threads(args), keep_samples=cfg.checks.clt is not None,
    )
    reports = _run_checks(cfg, model, observables, summary, mesh)
    passed = all(c.passed for c in reports)
    payload = {
        "config": cfg.to_dict(),
        "summary": summary.to_dict(),
        "checks": [c.to_dict() for c in reports],
        "all_passed": passed,
    }
    clt_by_obs = {c.name.split(":", 1)[1].rstrip("]"): c for c in reports if c.name.startswith("clt[")}
    table = summary.csv_rows(clt_by_obs)
    header = list(table[0].keys())
    em.result("summary", payload, header, [[row[h] for h in header] for row in table])
    if cfg.outputs.plotdata and model.oracle is not None and model.oracle.carre_du_champ is not None and r.method == "fv":
        ts, vals = sigma2_path_curve(model.oracle, INDICATOR_F, r.T, r.grid_points)
        em.plot("sigma2_path.csv", ["t", "sigma2_path"], zip(ts, vals))
    for c in reports:
        print(c.line(), file=sys.stderr)
    if not passed:
        raise CheckFailed("; ".join(c.line() for c in reports if not c.passed))
    return 0


_MODEL_FLAGS = {
    "two_state": ("p", "lambda1"),
    "constant_rate": ("lambda",),
    "ruin_pdmp": ("c", "theta", "s0"),
    "diffusion": ("lambda0", "lambda1", "dt"),
}


def _model_from_flags(args) -> dict:
    kind = args.model
    d = {"kind": kind}
    for key in _MODEL_FLAGS[kind]:
        v = getattr(args, key.replace("lambda", "lam") if key == "lambda" else key, None)
        if v is not None:
            d[key] = v
    return d


def _parse_grid(items):
    axes = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid item {item!r} must look like name=v1,v2,...")
        k, vs = item.split("=", 1)
        axes.append((k.strip(), [float(v) for v in vs.split(",") if v.strip()]))
    return axes


def _variance_payload(model_cfg: dict, T: float) -> dict:
    cfg = cfgmod.parse_config({"model": model_cfg})
    model = cfg.build_model()
    rep = variance_report(model.oracle, INDICATOR_F, T)
    out = rep.to_dict()
    out["model"] = cfg.to_dict()["model"]
    out["T"] = T
    if model.oracle.carre_du_champ is not None:
        out["sigma2_path_T"] = sigma2_path(model.oracle, INDICATOR_F, T, T)
        out["initial_term"] = sigma2_path(model.oracle, INDICATOR_F, 0.0, T)
    if model.name == "two_state":
        out["sigma2_closed_form"] = sigma2_two_state(model.params["p"], model.params["lambda1"], T)
    return out


def cmd_variance(args, em: Emitter) -> int:
    if args.config:
        cfg = _load_config(args, em)
        model_cfg = cfg.to_dict()["model"]
        T = args.T if args.T is not None else cfg.run.T
    else:
        if args.model is None:
            raise ConfigError("give --config or --model")
        model_cfg = _model_from_flags(args)
        T = args.T if args.T is not None else 1.0
    axes = _parse_grid(args.grid)
    if axes:
        names = [k for k, _ in axes]
        rows = []
        for combo in itertools.product(*[vs for _, vs in axes]):
            mc = {**model_cfg, **dict(zip(names, combo))}
            out = _variance_payload(mc, T)
            rows.append([*combo, out["sigma2_final"], out.get("sigma2_closed_form"), out["lower_bound"], out["upper_bound"]])
        header = [*names, "sigma2_final", "sigma2_closed_form", "lower_bound", "upper_bound"]
        text = csv_text(header, rows)
        em.write("variance_grid.csv", text)
        sys.stdout.write(text)
        return 0
    out = _variance_payload(model_cfg, T)
    em.result("variance", out, ["sigma2_final", "lower_bound", "upper_bound", "method"],
              [[out["sigma2_final"], out["lower_bound"], out["upper_bound"], out["method"]]])
    model = cfgmod.parse_config({"model": model_cfg}).build_model()
    if model.oracle.carre_du_champ is not None:
        ts, vals = sigma2_path_curve(model.oracle, INDICATOR_F, T, args.grid_points)
        em.plot("sigma2_path.csv", ["t", "sigma2_path"], zip(ts, vals))
    return 0


DEFAULT_TWO_STATE = {"kind": "two_state", "p": 0.5, "lambda1": math.log(4.0)}


def cmd_compare_discrete(args, em: Emitter) -> int:
    cfg = _load_config(args, em, required=False, default_model=DEFAULT_TWO_STATE)
    model = cfg.build_model()
    if model.oracle is None:
        raise OracleMissing("compare-discrete needs a model with an analytic oracle")
    T = cfg.run.T
    target = sigma2_final(model.oracle, INDICATOR_F, T)
    n_values = [int(v) for v in args.n_values.split(",")]
    simulate = {int(v) for v in args.simulate.split(",")} if args.simulate else set()
    rows, reports = [], []
    for n in n_values:
        mesh = mesh_from_survival(model.oracle, n, T)
        st = sigma_tilde(model.oracle, INDICATOR_F, mesh)
        emp, ext = None, None
        if n in simulate:
            s = replicate(model, cfg.run.N, T, cfg.run.R, seed=cfg.seed, method="discrete", mesh=mesh, threads=_threads(args))
            emp, ext = s.scaled_variance(), s.extinctions
            if cfg.checks.clt is not None:
                reports.append(clt_check(s, st, cfg.checks.clt.rel_tol, level=cfg.checks.clt.level))
        rows.append([n, st, target, emp, ext])
    header = ["n", "sigma_tilde2", "sigma2_T", "empirical_scaled_var", "extinctions"]
    payload = {"config": cfg.to_dict(), "sigma2_T": target, "rows": [dict(zip(header, r)) for r in rows],
               "checks": [c.to_dict() for c in reports]}
    em.result("compare_discrete", payload, header, rows)
    em.plot("convergence.csv", ["n", "sigma_tilde2", "sigma2_T", "relative_gap"],
            [[r[0], r[1], r[2], abs(r[1] - r[2]) / r[2]] for r in rows])
    for c in reports:
        print(c.line(), file=sys.stderr)
    if not all(c.passed for c in reports):
        raise CheckFailed("; ".join(c.line() for c in reports if not c.passed))
    return 0


def cmd_diagnose_qv(args, em: Emitter) -> int:
    cfg = _load_config(args, em, required=False, default_model=DEFAULT_TWO_STATE)
    model = cfg.build_model()
    if model.oracle is None or model.oracle.carre_du_champ is None:
        raise OracleMissing("diagnose-qv needs semigroup and carre du champ closed forms")
    observables = cfg.build_observables()
    obs = observables[args.observable] if args.observable else INDICATOR_F
    N = args.N or cfg.run.N
    T = cfg.run.T
    grid = np.linspace(0.0, T, cfg.run.grid_points)
    run = run_fleming_viot(model, N, T, rng=stream(cfg.seed, 0), snapshots=grid)
    integrand = qv_integrand(model, run, obs)
    qv = float(np.trapezoid(integrand, grid))
    o = model.oracle
    v0 = sigma2_path(o, obs, 0.0, T)
    target = sigma2_final(o, obs, T) - v0

    def limit(s):
        ps, dps = o.survival(s), o.survival_derivative(s)
        g = o.eta_expectation(s, lambda x: o.carre_du_champ(T - s, obs.func, x))
        v = o.eta_variance(s, lambda x: o.semigroup(T - s, obs.func, x))
        return g * ps * ps - v * ps * dps

    rel = qv / target - 1 if target else None
    reports = []
    if args.rel_tol is not None:
        ok = abs(qv - target) <= args.rel_tol * abs(target) if target else abs(qv) <= args.rel_tol
        reports.append(CheckReport("qv_diagnostic", bool(ok), qv, target, tolerance=args.rel_tol))
    payload = {"config": cfg.to_dict(), "N": N, "T": T, "grid_points": len(grid), "observable": obs.name,
               "qv_integral": qv, "target": target, "relative_error": rel, "checks": [c.to_dict() for c in reports]}
    em.result("qv", payload, ["N", "qv_integral", "target", "relative_error"], [[N, qv, target, rel]])
    em.plot("qv_integrand.csv", ["t", "integrand", "limit_integrand"], [[t, v, limit(t)] for t, v in zip(grid, integrand)])
    for c in reports:
        print(c.line(), file=sys.stderr)
    if not all(c.passed for c in reports):
        raise CheckFailed(reports[0].line())
    return 0


def cmd_exact_law(args, em: Emitter) -> int:
    if args.config:
        cfg = _load_config(args, em)
        if cfg.model.kind != "constant_rate":
            raise ConfigError("exact-law applies to the constant_rate model only")
        lam, N, T = cfg.model.lam, cfg.run.N, cfg.run.T
    else:
        lam = args.lam if args.lam is not None else 1.0
        N = args.N or 100
        T = args.T if args.T is not None else 1.0
    if args.N:
        N = args.N
    law = ptn_exact_law(N, lam, T)
    payload = {"N": N, "lambda": lam, "T": T, "mean": law.mean, "variance": law.variance,
               "scaled_variance": N * law.variance, "numeric_mean": law.numeric_mean,
               "tail_mass": law.tail_mass, "support_size": len(law.k)}
    rows = list(zip(law.k, law.values, law.probs))
    em.result("exact_law", payload, ["k", "p_hat_value", "probability"], rows)
    em.plot("exact_law.csv", ["k", "p_hat_value", "probability"], rows)
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, help="replication threads (default: all cores)")
    common.add_argument("--out-dir", help="directory for JSON/CSV artifacts")
    common.add_argument("--format", choices=["json", "csv"], default="json", help="stdout format")

    p = argparse.ArgumentParser(prog="fv-lab", description="Fleming-Viot particle systems and CLT verification")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", parents=[common], help="one run, with optional event log")
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("replicate", parents=[common], help="R runs, summary and checks")
    sp.set_defaults(func=cmd_replicate)

    sp = sub.add_parser("variance", parents=[common], help="analytic asymptotic variance")
    sp.add_argument("--model", choices=sorted(_MODEL_FLAGS))
    sp.add_argument("--p", type=float)
    sp.add_argument("--lambda1", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--T", type=float)
    sp.add_argument("--grid", action="append", metavar="NAME=V1,V2,...", help="sweep a model parameter (repeatable)")
    sp.add_argument("--grid-points", type=int, default=64)
    sp.set_defaults(func=cmd_variance)

    sp = sub.add_parser("compare-discrete", parents=[common], help="discrete-time variance versus continuous time")
    sp.add_argument("--n-values", default="5,20,80,320")
    sp.add_argument("--simulate", default="", help="comma separated n values to also simulate")
    sp.set_defaults(func=cmd_compare_discrete)

    sp = sub.add_parser("diagnose-qv", parents=[common], help="quadratic-variation diagnostic of one run")
    sp.add_argument("--N", type=int)
    sp.add_argument("--observable")
    sp.add_argument("--rel-tol", type=float)
    sp.set_defaults(func=cmd_diagnose_qv)

    sp = sub.add_parser("exact-law", parents=[common], help="law of p_hat at constant killing rate")
    sp.add_argument("--N", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--T", type=float)
    sp.set_defaults(func=cmd_exact_law)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        em = Emitter(args.out_dir, args.format)
        return args.func(args, em)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except (FvLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
