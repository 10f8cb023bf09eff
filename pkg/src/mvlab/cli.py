"""Command-line front end: ``mvlab run <command> --config scenario.toml``.

Exit codes: 0 success, 2 an inequality or convergence check failed beyond
its tolerance, 1 any other error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import (ConfigError, build_ensemble, build_grid, build_krylov_field, build_spec,
                     build_test_function, config_hash, dump_resolved, list_scenarios, load_config, resolve)

COMMANDS = ("simulate", "picard", "transport", "krylov", "harnack", "shift-harnack", "zvonkin", "validate")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


def _clean(obj):
    """Make a result tree JSON-safe (numpy scalars, arrays, non-finite floats)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _ensemble_summary(ens) -> dict:
    pts = ens.points
    m = pts.shape[0]
    return {"size": m, "mean": pts.mean(axis=0), "mean_se": pts.std(axis=0, ddof=1) / np.sqrt(m) if m > 1 else 0.0,
            "var": pts.var(axis=0, ddof=1) if m > 1 else 0.0, "second_moment": float(np.mean(np.sum(pts**2, axis=1)))}


def cmd_simulate(cfg, seed, threads):
    from .simulate import particle_system

    spec, grid = build_spec(cfg), build_grid(cfg)
    x0 = build_ensemble(cfg["initial"], spec.dim, seed, "initial", cfg["initial"]["size"])
    bundle, flow = particle_system(spec, x0, grid, seed, threads=threads)
    res = {"terminal": _ensemble_summary(bundle.terminal()), "noise_variance_ratio": _noise_ratio(bundle),
           "means": flow.means()[:: max(1, grid.n_steps // 10)]}
    return res, [], {"terminal.csv": bundle.terminal().to_csv()}


def _noise_ratio(bundle):
    from .model import noise_variance_ratio

    return noise_variance_ratio(bundle)


def cmd_picard(cfg, seed, threads):
    from .simulate import PicardDidNotConverge, picard

    spec, grid = build_spec(cfg), build_grid(cfg)
    x0 = build_ensemble(cfg["initial"], spec.dim, seed, "initial", cfg["initial"]["size"])
    p = cfg["picard"]
    try:
        r = picard(spec, x0, grid, float(p["theta"]), float(p["tol"]), p["max_iter"], seed, threads=threads)
    except PicardDidNotConverge as exc:
        return {"converged": False, "gaps": exc.gaps}, [str(exc)], {}
    ratios = r.ratios
    res = {"converged": True, "iterations": r.iterations, "gaps": r.gaps, "ratios": ratios,
           "max_ratio_after_2": max(ratios[1:]) if len(ratios) > 1 else None,
           "terminal": _ensemble_summary(r.flow[len(r.flow) - 1])}
    csv = "iteration,gap\n" + "".join(f"{i + 1},{g!r}\n" for i, g in enumerate(r.gaps))
    return res, [], {"gaps.csv": csv}


def cmd_transport(cfg, seed, threads):
    from .transport import CapExceededError, w_theta, w_theta_exact

    dim = cfg["scenario"]["dim"]
    t = cfg["transport"]
    mu = build_ensemble(cfg["initial"], dim, seed, "initial", cfg["initial"]["size"])
    nu = build_ensemble(t["other"], dim, seed, "other", cfg["initial"]["size"])
    theta = float(t["theta"])
    d = w_theta(mu, nu, theta, t["method"], t["cap"], float(t["epsilon"]))
    files = {}
    res = {"distance": d, "theta": theta, "method": t["method"], "size": mu.size,
           "mu": _ensemble_summary(mu), "nu": _ensemble_summary(nu)}
    try:
        _, plan = w_theta_exact(mu, nu, theta, t["cap"])
        files["plan.csv"] = plan.to_csv()
    except CapExceededError:
        pass
    return res, [], files


def cmd_krylov(cfg, seed, threads):
    from .krylov import khasminskii_exp, krylov_fit, markov_spot_check, occupation_functional
    from .simulate import particle_system

    spec, grid = build_spec(cfg), build_grid(cfg)
    x0 = build_ensemble(cfg["initial"], spec.dim, seed, "initial", cfg["initial"]["size"])
    bundle, _ = particle_system(spec, x0, grid, seed, threads=threads)
    k = cfg["krylov"]
    f = build_krylov_field(cfg)
    p, q = float(k["p"]), float(k["q"])
    from .model import in_class_K

    occ, occ_se = occupation_functional(bundle, f, grid.t_start, grid.t_end)
    fit = krylov_fit(bundle, f, p, q)
    kh = khasminskii_exp(bundle, f, float(k["lam"]), delta=fit.delta_hat, c=fit.C_hat, norm=fit.norm)
    res = {"pair_in_K": in_class_K(p, q, spec.dim), "occupation": occ, "occupation_se": occ_se,
           "fit": fit.to_dict(), "khasminskii": kh.to_dict()}
    if k["markov_checks"] > 0:
        mid = grid.time(grid.n_steps // 2)
        mc = markov_spot_check(spec, bundle, f, mid, grid.t_end, k["markov_checks"], 100, seed)
        res["markov"] = {"mean_gap": mc.mean_gap, "mean_gap_se": mc.mean_gap_se, "consistent": mc.consistent}
    viol = []
    if not (fit.delta_positive and math.isfinite(fit.C_hat)):
        viol.append("Krylov fit: delta_hat <= 0 or C_hat not finite")
    if kh.estimate < kh.jensen_lower - 3 * kh.se:
        viol.append("Khasminskii estimate below the Jensen lower bound")
    csv = "s,t,estimate,se\n" + "".join(f"{d['s']!r},{d['t']!r},{d['estimate']!r},{d['se']!r}\n"
                                         for d in fit.points)
    return res, viol, {"ladder.csv": csv}


def cmd_harnack(cfg, seed, threads):
    from .harnack import coupled_simulate, log_harnack_check, power_harnack_check

    spec, grid = build_spec(cfg), build_grid(cfg)
    h = cfg["harnack"]
    size = cfg["initial"]["size"]
    mu0 = build_ensemble(h["mu0"], spec.dim, seed, "mu0", size)
    nu0 = build_ensemble(h["nu0"], spec.dim, seed, "nu0", size)
    t0 = float(h["t0"])
    kw = {"merge_factor": float(h["merge_factor"]), "lam": float(h["lam"])}
    if "delta" in h:
        kw["delta"] = float(h["delta"])
    run = coupled_simulate(spec, mu0, nu0, t0, grid, seed=seed, threads=threads, **kw)
    k_se = float(cfg["tolerances"]["se_factor"])
    lh = log_harnack_check(spec, build_test_function(h["f"]), mu0, nu0, t0, grid, seed,
                           C=h.get("C"), run=run, threads=threads)
    pf = build_test_function(h["p_f"])
    power = [power_harnack_check(spec, pf, float(p), mu0, nu0, t0, grid, seed, h.get("c"), run, threads).to_dict()
             for p in h["p_values"]]
    viol = []
    if lh["slack"] > k_se * lh["slack_se"]:
        viol.append("log-Harnack coupling bound violated")
    if "C" in h and lh["slack_C"] > k_se * lh["slack_C_se"]:
        viol.append("log-Harnack bound with configured C violated")
    if not run.weights.martingale_ok:
        viol.append("mean Girsanov weight differs from 1 by more than 3 SE")
    viol += [f"power Harnack violated at p={r['p']}" for r in power if r.get("violated")]
    res = {"log_harnack": lh.to_dict(), "power_harnack": power,
           "weights": {"mean": run.weights.mean, "se": run.weights.se}, "merge": run.merge_stats()}
    return res, viol, {"weights.csv": run.weights.to_csv()}


def cmd_shift_harnack(cfg, seed, threads):
    from .shift_harnack import shift_coupled_simulate, shift_log_harnack_check, shift_power_harnack_check

    spec, grid = build_spec(cfg), build_grid(cfg)
    s = cfg["shift_harnack"]
    mu0 = build_ensemble(cfg["initial"], spec.dim, seed, "initial", cfg["initial"]["size"])
    t0, v = float(s["t0"]), np.asarray(s["v"], dtype=float)
    run = shift_coupled_simulate(spec, mu0, v, t0, grid, seed, threads)
    lh = shift_log_harnack_check(spec, build_test_function(s["f"]), mu0, v, t0, grid, seed, run=run)
    pf = build_test_function(s["p_f"])
    power = [shift_power_harnack_check(spec, pf, float(p), mu0, v, t0, grid, seed, run=run).to_dict()
             for p in s["p_values"]]
    k_se = float(cfg["tolerances"]["se_factor"])
    viol = []
    if lh["slack"] > k_se * lh["slack_se"]:
        viol.append("shift log-Harnack bound violated")
    if not run.weights.martingale_ok:
        viol.append("mean Girsanov weight differs from 1 by more than 3 SE")
    viol += [f"shift power Harnack (statement form) violated at p={r['p']}" for r in power
             if r["slack_statement"] > k_se * r["se"]]
    res = {"log_harnack": lh.to_dict(), "power_harnack": power,
           "weights": {"mean": run.weights.mean, "se": run.weights.se}}
    return res, viol, {"weights.csv": run.weights.to_csv()}


def cmd_zvonkin(cfg, seed, threads):
    from .model import Ensemble, TimeGrid
    from .zvonkin import (Lattice, boundary_sensitivity, gradient_bounds, ito_consistency, lambda_threshold,
                          solve_backward_pde, spec_fields, theta_monotone)

    spec, grid = build_spec(cfg), build_grid(cfg)
    z = cfg["zvonkin"]
    lat = Lattice(float(z["x_lo"]), float(z["x_hi"]), z["nx"], grid.t_end, z["nt"], grid.t_start)
    b, s = spec_fields(spec)
    lam = float(z["lam"])
    u = solve_backward_pde(b, s, lam, lat)
    res = {"lambda": lam, "bounds": gradient_bounds(u), "theta_monotone": theta_monotone(u),
           "boundary_sensitivity": boundary_sensitivity(b, s, lam, lat)}
    viol = []
    if z["find_threshold"]:
        try:
            res["threshold"] = lambda_threshold(b, s, lat, float(z["target"]))
        except ValueError as exc:
            viol.append(str(exc))
    x0 = Ensemble.dirac([float(z["x0"])], z["size"])
    ladder = []
    for dt in z["dt_ladder"]:
        n = int(round((grid.t_end - grid.t_start) / float(dt)))
        ladder.append(ito_consistency(u, spec, x0, TimeGrid(grid.t_start, grid.t_end, n), seed, threads))
    rms = [r["rms"] for r in ladder]
    res["ito_ladder"] = ladder
    res["rms_ratios"] = [rms[i] / rms[i + 1] if rms[i + 1] > 0 else None for i in range(len(rms) - 1)]
    if any(rms[i + 1] >= rms[i] for i in range(len(rms) - 1)):
        viol.append("Ito-consistency RMS is not decreasing over the dt ladder")
    return res, viol, {"u.csv": u.to_gridfield().to_csv()}


def cmd_validate(cfg, seed, threads):
    from .coefficients import ProbePlan, validate_bounds
    from .dini import dini_check

    spec = build_spec(cfg)
    v = cfg["validate"]
    plan = ProbePlan(n_points=v["n_points"], n_measures=v["n_measures"], ensemble_size=v["ensemble_size"],
                     box=float(v["box"]), theta=float(v["theta"]), seed=seed)
    rep = validate_bounds(spec, plan)
    res = {"bounds": rep.to_dict(), "flags": {
        "diffusion_distribution_free": spec.diffusion_distribution_free,
        "diffusion_state_free": spec.diffusion_state_free, "has_singular_drift": spec.has_singular_drift}}
    if spec.phi is not None:
        dc = dini_check(spec.phi)
        res["dini_modulus"] = {"modulus": spec.phi.to_dict(), "passed": dc.passed, "monotone": dc.monotone,
                               "concave_square": dc.concave_square, "integral": dc.integral,
                               "diverged": dc.diverged}
    return res, [], {}


HANDLERS = {"simulate": cmd_simulate, "picard": cmd_picard, "transport": cmd_transport, "krylov": cmd_krylov,
            "harnack": cmd_harnack, "shift-harnack": cmd_shift_harnack, "zvonkin": cmd_zvonkin,
            "validate": cmd_validate}


def versions() -> dict:
    return {"mvlab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run(command: str, config, seed: int | None = None, out=None, threads: int | None = None,
        fmt: str = "json") -> tuple[int, dict]:
    """Execute one subcommand; returns (exit code, report)."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    tree, text = load_config(config) if not isinstance(config, dict) else (config, "")
    cfg = resolve(tree, text)
    seed = cfg["scenario"]["seed"] if seed is None else int(seed)
    cfg["scenario"]["seed"] = seed
    results, violations, files = HANDLERS[command](cfg, seed, threads)
    report = {"command": command, "scenario": cfg["scenario"]["name"], "seed": seed,
              "config_hash": config_hash(cfg), "versions": versions(),
              "status": "violation" if violations else "ok", "violations": violations,
              "results": _clean(results),
              "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        dump_resolved(cfg, out / "resolved_config.toml")
        if fmt == "csv":
            for name, body in files.items():
                (out / name).write_text(body)
    return (EXIT_VIOLATION if violations else EXIT_OK), report


def strip_timestamp(report_text: str) -> str:
    """Report JSON without its timestamp, for determinism comparisons."""
    rep = json.loads(report_text)
    rep.pop("timestamp", None)
    return json.dumps(rep, sort_keys=True, indent=2)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("command", choices=COMMANDS)
    r.add_argument("--config", required=True, help="scenario TOML/JSON file or shipped scenario name")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None, help="directory for report.json and detail files")
    r.add_argument("--threads", type=int, default=None, help="worker threads (default: $MVLAB_THREADS or 1)")
    r.add_argument("--format", choices=("json", "csv"), default="json")
    sub.add_parser("scenarios", help="list shipped scenarios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.action == "scenarios":
        print("\n".join(list_scenarios()))
        return EXIT_OK
    try:
        code, report = run(args.command, args.config, args.seed, args.out, args.threads, args.format)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.out is None:
        print(json.dumps(report, sort_keys=True, indent=2))
    else:
        print(f"{args.command}: {report['status']} -> {Path(args.out) / 'report.json'}")
    for v in report["violations"]:
        print(f"violation: {v}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
