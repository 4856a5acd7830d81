"""Command-line front end.

Commands::

    hypcomp validate <cfg>
    hypcomp design   <cfg> -o <design.json>
    hypcomp simulate <cfg> -d <design.json> -o <dir>
    hypcomp verify   <cfg> -d <design.json>

Exit codes: 0 success, 1 check or design failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .characteristics import settling_times
from .config import Config, ConfigError, load_config
from .design import DesignError, run_design
from .export import DesignFileError, DesignOutput
from .expr import ExpressionError
from .model import Grid, validate_plant
from .simulator import (SimulationError, plot_trace, simulate_closed_loop, write_snapshots_csv,
                        write_trace_csv)

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_FAIL", "EXIT_USAGE"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("hypcomp")


class UsageError(Exception):
    """Bad input files or arguments (exit code 2)."""


def _load(args) -> Config:
    try:
        cfg = load_config(args.config)
    except (ConfigError, ExpressionError) as exc:
        raise UsageError(f"{args.config}: {exc}") from exc
    changes = {}
    if getattr(args, "grid", None) is not None:
        changes["N"] = args.grid
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if changes:
        cfg.params = dataclasses.replace(cfg.params, **changes)
    return cfg


def _load_design(path) -> DesignOutput:
    try:
        return DesignOutput.load(path)
    except DesignFileError as exc:
        raise UsageError(str(exc)) from exc


def _invalid(cfg: Config) -> list:
    rep = validate_plant(cfg.spec, Grid(max(cfg.params.N, 1)))
    return list(rep.violations) + cfg.params.violations(cfg.spec.n_xi)


def cmd_validate(args) -> int:
    cfg = _load(args)
    problems = _invalid(cfg)
    if problems:
        for v in problems:
            print(f"violation: {v}")
        return EXIT_FAIL
    print("plant valid: all structural assumptions hold")
    return EXIT_OK


def cmd_design(args) -> int:
    cfg = _load(args)
    problems = _invalid(cfg)
    if problems:
        for v in problems:
            print(f"validation: failed ({v})")
        return EXIT_FAIL
    try:
        design = run_design(cfg.spec, cfg.params)
    except DesignError as exc:
        print(str(exc))
        return EXIT_FAIL
    out = DesignOutput.from_design(design, cfg.source_hash)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    out.save(path)
    csv_dir = path.parent / f"{path.stem}_gains"
    out.write_csvs(csv_dir)
    d = design.diagnostics
    for key in ("controller_eigenvalues", "observer_eigenvalues"):
        print(f"{key}: " + ", ".join(f"{re:.10g}{im:+.3g}j" for re, im in d[key]))
    print(f"kernel residuals: bc {d['kernel_bc']:.2e}, observer bc {d['observer_bc']:.2e}, "
          f"recrelp1z {d['recrelp1z']:.2e}, kerntrafo {d['kerntrafo']:.2e}")
    print(f"condition numbers: Gamma {d['gamma_cond']:.3e}, Sigma {d['sigma_cond']:.3e}")
    print(f"design written to {path} (gain tables in {csv_dir})")
    return EXIT_OK


def _late_ratio(t, v, t0):
    peak = float(np.max(v))
    sel = t > t0
    if peak == 0 or not np.any(sel):
        return 0.0
    return float(np.max(v[sel])) / peak


def cmd_simulate(args) -> int:
    cfg = _load(args)
    design = _load_design(args.design)
    grid = Grid(args.grid) if args.grid is not None else design.grid
    gains = design.simulation_gains().on(grid)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        trace = simulate_closed_loop(cfg.spec, gains, cfg.sim, grid)
    except SimulationError as exc:
        print(f"simulation aborted: {exc} (last finite time {exc.t_last:.6g})")
        return EXIT_FAIL
    write_trace_csv(trace, out / "trace.csv")
    write_snapshots_csv(trace, out / "x.csv", "x")
    write_snapshots_csv(trace, out / "xhat.csv", "xhat")
    files = ["trace.csv", "x.csv", "xhat.csv"]
    if args.plots:
        files += [f.name for f in plot_trace(trace, out)]
    tc, to = settling_times(cfg.spec, grid)
    t = trace.t
    print(f"t_c = {tc:.6g}, t_o = {to:.6g}, dt = {trace.dt:.4g}, steps stored = {len(t)}")
    print(f"max |eps_xi| after t = 2.5: {_late_ratio(t, trace.eps_xi_norm, 2.5):.3%} of peak")
    print(f"max sup|x| after t = 3.8: {_late_ratio(t, trace.x_sup, 3.8):.3%} of peak")
    print(f"max |xi| after t = 3.8: {_late_ratio(t, trace.xi_norm, 3.8):.3%} of peak")
    print(f"wrote {', '.join(files)} to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verification import verify_design

    cfg = _load(args)
    design = _load_design(args.design)
    problems = _invalid(cfg)
    if problems:
        for v in problems:
            print(f"validation: failed ({v})")
        return EXIT_FAIL
    rep = verify_design(cfg.spec, cfg.params, design, cfg.source_hash,
                        convergence=not args.no_convergence)
    print(rep)
    return EXIT_OK if rep.ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypcomp", description=(
        "Backstepping compensator design and simulation for hyperbolic PDE-ODE systems."))
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, grid=True):
        p.add_argument("config", help="plant configuration file (TOML)")
        if grid:
            p.add_argument("--grid", type=int, metavar="N", help="override the grid cell count")
        p.add_argument("--seed", type=int, metavar="S", help="override the pole-placement seed")

    p = sub.add_parser("validate", help="check the structural assumptions of a plant")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("design", help="compute controller and observer gains")
    common(p)
    p.add_argument("-o", "--output", required=True, help="design output file (JSON)")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", help="simulate the output-feedback closed loop")
    common(p)
    p.add_argument("-d", "--design", required=True, help="design output file")
    p.add_argument("-o", "--output", required=True, help="directory for trace files")
    p.add_argument("--plots", action="store_true", help="also write SVG plots (needs matplotlib)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="recompute and check a stored design")
    common(p, grid=False)
    p.add_argument("-d", "--design", required=True, help="design output file")
    p.add_argument("--no-convergence", action="store_true",
                   help="skip the grid self-convergence check")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
