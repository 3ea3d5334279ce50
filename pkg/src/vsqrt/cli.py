"""Command-line entry point: ``vsqrt <command> --config run.json``."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import platform
import sys
from importlib import metadata, resources

import jsonschema
import numpy as np
import scipy

from .errors import NumericalError, ValidationError, VsqrtError
from .kernels import GridSpec, KernelSpec, ScalarKernel, check_admissibility
from .model import MeasureForcing, ModelParams

COMMANDS = (
    "resolvent",
    "riccati",
    "cf",
    "limit",
    "stationary-cf",
    "moments",
    "acov",
    "simulate",
    "density",
    "check",
)

DEFAULT_STEP = 1e-3
DEFAULT_HORIZON = 10.0
DEFAULT_PATHS = 10_000


def load_schema():
    text = resources.files("vsqrt").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"config invalid at {where}: {exc.message}") from None


# -- config -> objects ---------------------------------------------------------


def _complex(v):
    if isinstance(v, dict):
        return complex(v["re"], v["im"])
    return complex(v)


def _cvector(v, m):
    vals = [_complex(x) for x in v] if isinstance(v, list) else [_complex(v)]
    if len(vals) == 1 and m > 1:
        vals = vals * m
    if len(vals) != m:
        raise ValidationError(f"expected {m} complex entries")
    return np.array(vals)


def build_kernel(d):
    if "components" in d:
        return KernelSpec.from_dict(d)
    sk = ScalarKernel.from_dict({k: v for k, v in d.items() if k != "m"})
    return KernelSpec.uniform(sk, int(d.get("m", 1)))


def build_params(d):
    kernel = build_kernel(d["kernel"])
    m = kernel.m
    beta = d["beta"]
    if not isinstance(beta, list):
        beta = np.eye(m) * beta if m > 1 else [[beta]]
    return ModelParams(
        b=d.get("b", 0.0),
        beta=beta,
        sigma=d.get("sigma", 0.0),
        kernel=kernel,
        x0=d.get("x0", 0.0),
    )


def build_forcing(d, m):
    d = d or {}
    atoms = tuple((a["time"], _cvector(a["weight"], m)) for a in d.get("atoms", []))
    dens = d.get("density")
    if dens is None:
        return MeasureForcing(m, atoms)
    values = np.array([_cvector(r, m) for r in dens["values"]])
    return MeasureForcing(m, atoms, values, dens["step"])


def build_grid(cfg, horizon=None):
    g = cfg.get("grid", {})
    step = g.get("step", DEFAULT_STEP)
    T = horizon if horizon is not None else g.get("horizon", DEFAULT_HORIZON)
    n = max(1, round(T / step))
    if abs(n * step - T) > 1e-9 * max(1.0, T):
        raise ValidationError(f"horizon {T} is not a multiple of step {step}")
    return GridSpec(float(step), int(n))


# -- output ---------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
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
    if isinstance(obj, complex):
        return [_clean(obj.real), _clean(obj.imag)]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


class Run:
    def __init__(self, command, cfg, outdir):
        self.command = command
        self.cfg = cfg
        self.outdir = outdir
        self.files = []
        os.makedirs(outdir, exist_ok=True)

    def write(self, name, text):
        with open(os.path.join(self.outdir, name), "w", newline="\n") as fh:
            fh.write(text)
        self.files.append(name)

    def write_json(self, name, obj):
        self.write(name, dumps(obj))

    def add_file(self, name):
        self.files.append(name)

    def manifest(self, status):
        # where the files go and how many threads ran do not change them
        ident = {k: v for k, v in self.cfg.items() if k not in ("output", "threads")}
        canon = json.dumps(ident, sort_keys=True, separators=(",", ":"))
        return {
            "command": self.command,
            "config_sha256": hashlib.sha256(canon.encode()).hexdigest(),
            "seed": self.cfg.get("seed"),
            "status": status,
            "outputs": sorted(self.files),
            "versions": _versions(),
        }


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {
        "vsqrt": own,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "jsonschema": metadata.version("jsonschema"),
        "python": platform.python_version(),
    }


# -- commands -----------------------------------------------------------------


def cmd_resolvent(run, cfg, params):
    from .resolvents import resolvent_integrals, resolvent_second_kind

    grid = build_grid(cfg)
    pair = resolvent_second_kind(params.kernel, params.beta, grid)
    run.write("resolvent.csv", pair.to_csv())
    run.write_json("resolvent.json", resolvent_integrals(pair).to_dict())


def cmd_riccati(run, cfg, params):
    from .riccati import norm_bounds, solve_riccati, tail_integrals

    grid = build_grid(cfg)
    forcing = build_forcing(cfg.get("forcing"), params.m)
    sol = solve_riccati(params, forcing, grid)
    run.write("riccati.csv", sol.to_csv())
    out = {"residual": sol.residual, "near_cells": len(sol.near_cells), "bounds": norm_bounds(sol)}
    out.update({k: v for k, v in sol.tail.items()})
    try:
        out["integrals"] = tail_integrals(sol).to_dict()
    except NumericalError as exc:
        out["integrals"] = {"error": str(exc)}
    run.write_json("riccati.json", out)


def cmd_cf(run, cfg, params):
    from .affine import log_cf

    t = cfg.get("t", cfg.get("grid", {}).get("horizon", DEFAULT_HORIZON))
    step = cfg.get("grid", {}).get("step")
    forcing = build_forcing(cfg.get("forcing"), params.m)
    res = log_cf(params, forcing, t) if step is None else log_cf(params, forcing, t, step=step)
    run.write_json("cf.json", dict(res.to_dict(), t=t))


def _limit_grid(cfg, params):
    from .moments import default_limit_grid

    base = default_limit_grid(params.kernel)
    g = cfg.get("grid") or {}
    if "step" in g and g.get("horizon", 0.0) >= base.horizon:
        return build_grid(cfg)
    return base


def cmd_limit(run, cfg, params):
    from .affine import limit_log_laplace
    from .moments import limit_summary

    grid = _limit_grid(cfg, params)
    summary = limit_summary(params, grid)
    out = {"summary": summary.to_dict(), "grid": {"step": grid.step, "horizon": grid.horizon}}
    if "u" in cfg:
        out["log_laplace"] = limit_log_laplace(params, _cvector(cfg["u"], params.m), grid, summary).to_dict()
    run.write_json("limit.json", out)


def cmd_stationary_cf(run, cfg, params):
    from .affine import stationary_fdd_log_cf

    if "times" not in cfg or "weights" not in cfg:
        raise ValidationError("stationary-cf needs 'times' and 'weights'")
    W = np.array([_cvector(w, params.m) for w in cfg["weights"]])
    grid = _limit_grid(cfg, params)
    res = stationary_fdd_log_cf(params, cfg["times"], W, step=grid.step, horizon=grid.horizon)
    run.write_json("stationary_cf.json", dict(res.to_dict(), times=cfg["times"]))


def cmd_moments(run, cfg, params):
    import csv
    import io

    from .moments import limit_summary, mean_curve, mean_curve_transposed

    grid = build_grid(cfg)
    a = mean_curve(params, grid)
    b = mean_curve_transposed(params, grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"mean[{i}]" for i in range(params.m)])
    for k, t in enumerate(grid.nodes):
        w.writerow([repr(float(t))] + [repr(float(x)) for x in a[k]])
    run.write("moments.csv", buf.getvalue())
    rel = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))
    out = {"mean_form_rel_diff": rel}
    try:
        out["limit"] = limit_summary(params, _limit_grid({}, params)).to_dict()
    except NumericalError as exc:
        out["limit"] = None
        out["limit_error"] = {"message": str(exc), "diagnostics": exc.diagnostics}
    run.write_json("moments.json", out)


def cmd_acov(run, cfg, params):
    import csv
    import io

    from .moments import limit_summary, stationary_autocov

    lags = cfg.get("lags")
    if not lags:
        raise ValidationError("acov needs 'lags'")
    grid = _limit_grid(cfg, params)
    if max(lags) > grid.horizon / 2:
        n = math.ceil(2 * max(lags) / grid.step)
        grid = GridSpec(grid.step, n)
    summary = limit_summary(params, grid)
    lag_nodes = [grid.step * round(l / grid.step) for l in lags]
    ac = stationary_autocov(params, lag_nodes, grid=grid, summary=summary)
    m = params.m
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lag"] + [f"acov[{i}][{j}]" for i in range(m) for j in range(m)])
    for lag, M in zip(lag_nodes, ac):
        w.writerow([repr(float(lag))] + [repr(float(x)) for x in M.ravel()])
    run.write("acov.csv", buf.getvalue())
    run.write_json("acov.json", {"A": summary.A, "grid": {"step": grid.step, "horizon": grid.horizon}})


def cmd_simulate(run, cfg, params, threads):
    from .simulate import simulate_paths

    sim = cfg.get("simulation", {})
    grid = build_grid(cfg)
    ens = simulate_paths(
        params,
        grid,
        sim.get("paths", DEFAULT_PATHS),
        cfg.get("seed", 0),
        scheme=sim.get("scheme", "direct"),
        threads=threads,
        stride=sim.get("stride", 1),
        antithetic=sim.get("antithetic", False),
    )
    run.write("paths_summary.csv", ens.summary_csv())
    if sim.get("dump", True):
        ens.dump(os.path.join(run.outdir, "ensemble.bin"))
        run.add_file("ensemble.bin")
    run.write_json(
        "simulate.json",
        {
            "n_paths": ens.n_paths,
            "scheme": ens.scheme,
            "seed": ens.seed,
            "step": grid.step,
            "stored_step": ens.grid.step,
            "n_steps": grid.n_steps,
            "negativity_fraction": ens.negativity_fraction,
            "antithetic": bool(sim.get("antithetic", False)),
        },
    )


def cmd_density(run, cfg, params, threads):
    from .density import besov_increment_curve, limit_density_diagnostics, shift_ladder, weighted_density
    from .simulate import simulate_paths

    dcfg = cfg.get("density", {})
    sim = cfg.get("simulation", {})
    paths = sim.get("paths", 100_000)
    seed = cfg.get("seed", 0)
    step = cfg.get("grid", {}).get("step", DEFAULT_STEP)
    t = dcfg.get("time", cfg.get("grid", {}).get("horizon", 1.0))
    shifts = dcfg.get("shifts")
    if dcfg.get("limit", False):
        rep = limit_density_diagnostics(params, t, paths, seed, step=step, shifts=shifts, threads=threads)
        wd, curve = rep.density, rep.curve
        extra = {"degenerate": rep.degenerate, "burn_in": t}
    else:
        n = max(1, math.ceil(t / step - 1e-9))
        ens = simulate_paths(params, GridSpec(t / n, n), paths, seed, threads=threads, stride=n)
        wd = weighted_density(ens.values[:, -1, :], bins=dcfg.get("bin_width"))
        curve = None if wd.degenerate else besov_increment_curve(wd, shifts or shift_ladder(wd))
        extra = {"time": t, "negativity_fraction": ens.negativity_fraction}
    run.write("density.csv", wd.to_csv())
    if curve is not None and curve.applicable:
        run.write("increments.csv", curve.to_csv())
    out = {"density": wd.summary(), "increments": None if curve is None else curve.summary()}
    out.update(extra)
    run.write_json("density.json", out)


def cmd_check(run, cfg, params):
    from .affine import log_cf
    from .moments import limit_summary, mean_at, sufficient_condition_checks
    from .riccati import norm_bounds, solve_riccati

    out = {}
    out["admissibility"] = check_admissibility(params.kernel, GridSpec(1e-2, 100)).to_dict()
    out["sufficient_conditions"] = sufficient_condition_checks(params).to_dict()
    try:
        s = limit_summary(params)
        out["limit"] = {"independent_of_x0": s.independent_of_x0, "A": s.A, "R_integral": s.R_integral}
    except NumericalError as exc:
        out["limit"] = {"error": str(exc), "diagnostics": exc.diagnostics}
    grid = GridSpec(1e-2, 500)
    inv = []
    for u in (-1.0, -1.0 + 2.0j, 3.0j):
        mu = MeasureForcing.dirac(np.full(params.m, u))
        sol = solve_riccati(params, mu, grid)
        b = norm_bounds(sol)
        maxre = float(np.max(sol.psi.real))
        inv.append({"u": u, "max_re_psi": maxre, "sign_ok": maxre <= 1e-10, **b})
        cf = log_cf(params, mu, 2.0, step=1e-2)
        inv[-1]["cf_rel_diff"] = cf.rel_diff
    out["riccati_invariants"] = inv
    out["mean_forms_rel_diff"] = mean_at(params, 2.0, GridSpec(1e-3, 2000)).rel_diff
    ok = all(r["sign_ok"] and r["l2_ok"] and r.get("l1_ok", True) for r in inv)
    out["all_invariants_ok"] = bool(ok)
    run.write_json("check.json", out)


# -- entry point ----------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="vsqrt", description="Volterra square-root process toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="JSON run configuration")
        p.add_argument("--output", "-o", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--paths", type=int, help="override simulation.paths")
        p.add_argument("--threads", type=int, help="cap on worker threads")
        if name == "simulate":
            p.add_argument("--step", type=float, help="override grid.step")
            p.add_argument("--horizon", type=float, help="override grid.horizon")
            p.add_argument("--scheme", choices=("direct", "resolvent"), help="override simulation.scheme")
    return ap


def _apply_overrides(cfg, args):
    cfg = copy.deepcopy(cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.paths is not None:
        cfg.setdefault("simulation", {})["paths"] = args.paths
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.output is not None:
        cfg["output"] = args.output
    for key in ("step", "horizon"):
        val = getattr(args, key, None)
        if val is not None:
            cfg.setdefault("grid", {})[key] = val
    if getattr(args, "scheme", None) is not None:
        cfg.setdefault("simulation", {})["scheme"] = args.scheme
    return cfg


def run_command(command, cfg, outdir=None):
    """Validate ``cfg`` and run ``command``; returns the exit status."""
    outdir = outdir or cfg.get("output") or "vsqrt-out"
    run = Run(command, cfg, outdir)
    try:
        validate_config(cfg)
        params = build_params(cfg["model"])
        threads = int(cfg.get("threads", 1))
        handler = {
            "resolvent": cmd_resolvent,
            "riccati": cmd_riccati,
            "cf": cmd_cf,
            "limit": cmd_limit,
            "stationary-cf": cmd_stationary_cf,
            "moments": cmd_moments,
            "acov": cmd_acov,
            "check": cmd_check,
        }.get(command)
        if command == "simulate":
            cmd_simulate(run, cfg, params, threads)
        elif command == "density":
            cmd_density(run, cfg, params, threads)
        elif handler is None:
            raise ValidationError(f"unknown command {command!r}")
        else:
            handler(run, cfg, params)
    except NumericalError as exc:
        run.write_json("error.json", {"error": str(exc), "kind": "numerical", "diagnostics": exc.diagnostics})
        run.write_json("manifest.json", run.manifest("numerical_error"))
        print(f"vsqrt: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, KeyError, TypeError) as exc:
        run.write_json("error.json", {"error": str(exc), "kind": "validation"})
        run.write_json("manifest.json", run.manifest("validation_error"))
        print(f"vsqrt: invalid input: {exc}", file=sys.stderr)
        return 1
    except VsqrtError as exc:
        print(f"vsqrt: {exc}", file=sys.stderr)
        return 1
    run.write_json("manifest.json", run.manifest("ok"))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"vsqrt: cannot read config: {exc}", file=sys.stderr)
        return 1
    if not isinstance(cfg, dict):
        print("vsqrt: config must be a JSON object", file=sys.stderr)
        return 1
    cfg = _apply_overrides(cfg, args)
    return run_command(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
