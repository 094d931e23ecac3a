"""Batch front door.

Config-file-first: every subcommand accepts --config pointing at a JSON file
whose fields are the option defaults; command-line flags override file
fields, so any published number is reproducible from one artifact.  All
outputs embed the effective config, its hash, the tool version and a
timestamp.

Exit codes: 0 ok, 2 config problem, 3 assumption failure, 4 solver failure,
5 estimation failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fbp, lattice, reporting, sensitivity, sim
from .errors import (
    AssumptionError,
    ConfigError,
    EstimationError,
    RobdivError,
    SolverError,
)
from .model import SurplusModel, check_assumptions

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_SOLVER = 4
EXIT_ESTIMATION = 5


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("ROBDIV_OUTPUT_DIR") or "robdiv_out"
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_model(args) -> SurplusModel:
    if not args.model:
        raise ConfigError("--model is required (path to a model JSON file)")
    path = Path(args.model)
    if not path.exists():
        raise ConfigError(f"model file {path} does not exist")
    return SurplusModel.from_json(path)


def _effective(args, fields) -> dict:
    cfg = {k: getattr(args, k) for k in fields}
    cfg["model"] = str(args.model)
    return cfg


def _all_dests(parser) -> set:
    dests = {a.dest for a in parser._actions}
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            for sub in a.choices.values():
                dests |= {b.dest for b in sub._actions}
    return dests


def _apply_config_file(parser, argv):
    """Parse once to find --config, load its values as defaults, re-parse.

    The defaults are installed on the invoked subparser (subcommands parse
    into a fresh namespace since Python 3.7), so file values lose only to
    explicit flags.
    """
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None):
        cfg_path = Path(pre.config)
        if not cfg_path.exists():
            raise ConfigError(f"config file {cfg_path} does not exist")
        with open(cfg_path) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_values) - _all_dests(parser)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                action.choices[pre.command].set_defaults(**file_values)
    return parser.parse_args(argv)


def _add_common(sp):
    sp.add_argument("--config", help="JSON file with option defaults")
    sp.add_argument("--model", help="model JSON file")
    sp.add_argument("--out", help="output directory (env ROBDIV_OUTPUT_DIR)")


def _solution_from_csv(path) -> fbp.FreeBoundarySolution:
    data = np.genfromtxt(path, delimiter=",", names=True)
    header_path = Path(str(path).replace(".csv", ".json"))
    if not header_path.exists():
        raise ConfigError(f"solution header {header_path} not found next to {path}")
    with open(header_path) as fh:
        head = json.load(fh)["solution"]
    n_in = int(np.sum(data["x"] <= head["b_star"]))
    return fbp.FreeBoundarySolution(
        b_star=head["b_star"],
        x_grid=data["x"], v=data["v"], v_prime=data["v_prime"],
        v_double_prime=data["v_double_prime"],
        residual_interior=data["residual"][:n_in],
        residual_exterior=data["residual"][n_in:],
        smooth_fit_gap=head["smooth_fit_gap"],
        shooting_residual=head["shooting_residual"],
        route_gap=head["route_gap"],
        mu_bar=head["mu_bar"],
        step_stats=fbp.StepStats(**head["step_stats"]),
        rho=head["rho"], R=head["R"], xi0=head["xi0"],
    )


def _write_solution(out, model, sol, extra_cfg):
    residual = np.concatenate([sol.residual_interior, sol.residual_exterior])
    csv_path = reporting.write_csv(
        out / "solution.csv",
        ["x", "v", "v_prime", "v_double_prime", "residual"],
        zip(sol.x_grid, sol.v, sol.v_prime, sol.v_double_prime, residual),
    )
    payload = reporting.wrap_payload(extra_cfg, {
        "model": model.to_dict(),
        "solution": sol.to_header(),
        "vi": fbp.verify_vi(sol, model).to_dict(),
    })
    json_path = reporting.write_json(out / "solution.json", payload)
    return csv_path, json_path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_check(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    report = check_assumptions(
        model,
        x_max=args.x_max,
        n_points=args.n_points,
        b_lower_override=args.b_lower_override,
    )
    cfg = _effective(args, ["x_max", "n_points", "b_lower_override"])
    payload = reporting.wrap_payload(cfg, {
        "model": model.to_dict(),
        "report": report.to_dict(),
    })
    reporting.write_json(out / "assumption_report.json", payload)
    print(f"check: all_pass={report.all_pass} b_lower={report.b_lower:.6g} "
          f"b_upper={report.b_upper:.6g} b_hat={report.b_hat}")
    return EXIT_OK if report.all_pass else EXIT_ASSUMPTION


def cmd_solve(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    report = check_assumptions(model).require()
    b_star = fbp.shoot(model, tol_b=args.tol_b, tol_value=args.tol_value,
                       report=report)
    sol = fbp.build_value_function(model, b_star, x_max=args.x_max,
                                   n_grid=args.n_grid, report=report)
    cfg = _effective(args, ["tol_b", "tol_value", "x_max", "n_grid"])
    csv_path, json_path = _write_solution(out, model, sol, cfg)
    print(f"solve: b_star={b_star:.12g} residual={sol.shooting_residual:.3e} "
          f"-> {csv_path}, {json_path}")
    return EXIT_OK


def _resolve_solution(args, model, why="worst-case kernel") -> fbp.FreeBoundarySolution:
    if args.solution:
        return _solution_from_csv(args.solution)
    if args.inline_solve:
        report = check_assumptions(model).require()
        b = fbp.shoot(model, report=report)
        return fbp.build_value_function(model, b, report=report)
    raise ConfigError(
        f"{why} needs --solution <solution.csv> or --inline-solve; "
        "silently substituting the zero kernel is not allowed")


def cmd_simulate(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    solution = None
    if args.kernel == sim.KERNEL_WORST:
        solution = _resolve_solution(args, model)
    b = args.b if args.b is not None else (
        solution.b_star if solution is not None else None)
    if b is None:
        raise ConfigError("--b is required for the zero kernel")
    x0 = args.x0 if args.x0 is not None else b
    cfg = sim.SimConfig(x0=x0, b=b, dt=args.dt, t_max=args.t_max,
                        n_paths=args.n_paths, seed=args.seed, kernel=args.kernel)
    est = sim.estimate_value(model, cfg, solution=solution, mode=args.mode)
    eff = _effective(args, ["x0", "b", "dt", "t_max", "n_paths", "seed",
                            "kernel", "mode", "solution", "inline_solve"])
    eff["b"] = b
    eff["x0"] = x0
    payload = reporting.wrap_payload(eff, {
        "model": model.to_dict(),
        "estimate": est.to_dict(),
    })
    reporting.write_json(out / "mc_estimate.json", payload)
    if args.paths_csv:
        rows = []
        records = sim.path_records(model, cfg, solution=solution,
                                   n=args.paths_csv)
        for i, rec in enumerate(records):
            rows.append([i, rec.ruin_time if rec.ruin_time is not None else "",
                         rec.discounted_dividends, rec.tilted_dividends,
                         rec.tilt_integral, rec.terminal_payout_factor,
                         int(rec.censored)])
        reporting.write_csv(out / "paths.csv",
                            ["path", "ruin_time", "discounted_dividends",
                             "tilted_dividends", "tilt_integral",
                             "terminal_payout_factor", "censored"], rows)
    print(f"simulate: mode={args.mode} mean={est.mean:.6g} stderr={est.stderr:.3g} "
          f"censored={est.censored_fraction:.4f}")
    return EXIT_OK


def cmd_lattice(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    if args.b is not None:
        b = args.b
    else:
        solution = _resolve_solution(args, model, why="lattice without --b")
        b = solution.b_star
    val = lattice.valuate(model, b, n_space=args.n_space, t_max=args.t_max,
                          dt=args.dt)
    body = {"model": model.to_dict(), "report": val.to_report()}
    if args.refine:
        ref = lattice.refinement_report(model, b, args.n_space, args.t_max)
        body["refinement"] = {k: ref[k] for k in ("gap_ratio",)}
        body["refinement"]["fine"] = ref["fine"]
    cfg = _effective(args, ["b", "n_space", "t_max", "dt", "refine",
                            "solution", "inline_solve"])
    cfg["b"] = b
    reporting.write_json(out / "lattice_report.json",
                         reporting.wrap_payload(cfg, body))
    if args.slice_csv:
        reporting.write_csv(
            out / "lattice_slices.csv",
            ["x", "v_ez", "v_rob", "k_classical", "u_lower", "theta_star"],
            zip(np.linspace(0.0, b, args.n_space), val.v_ez, val.v_rob,
                val.k_classical, val.u_lower, val.theta_star))
    print(f"lattice: equivalence_gap={val.equivalence_gap:.3e} "
          f"picard_max={int(np.max(val.picard_iters))}")
    return EXIT_OK


def _parse_r_grid(args) -> list:
    if args.r_grid:
        return [float(tok) for tok in args.r_grid.split(",")]
    model = _load_model(args)
    lo, hi = sensitivity.valid_r_interval(model, r_max=args.r_max)
    return list(np.linspace(lo, hi, args.r_count))


def cmd_sweep(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)
    r_grid = _parse_r_grid(args)
    probes = [float(tok) for tok in args.x_probes.split(",")]
    result = sensitivity.sweep(model, r_grid, probes, n_jobs=args.n_jobs)
    body = {"model": model.to_dict(), "summary": result.to_summary()}
    if args.continuity:
        cont = sensitivity.continuity_report(model, result, refine=args.refine)
        body["continuity"] = {k: cont[k] for k in
                              ("coarse_jump", "at_interval", "refine_factor",
                               "fine_jump", "jump_ratio", "fine_monotone")}
    cfg = _effective(args, ["r_grid", "r_max", "r_count", "x_probes",
                            "continuity", "refine", "n_jobs"])
    reporting.write_json(out / "sweep_summary.json",
                         reporting.wrap_payload(cfg, body))
    reporting.write_csv(
        out / "v_matrix.csv",
        ["x"] + [f"R={r:.6g}" for r in result.r_grid],
        ([x] + list(result.v_at[i, :]) for i, x in enumerate(result.x_probes)))
    reporting.write_csv(
        out / "b_star.csv", ["R", "b_star", "valid"],
        ((r, b, int(v)) for r, b, v in
         zip(result.r_grid, result.b_star, result.assumption_valid)))
    print(f"sweep: {int(np.sum(result.assumption_valid))}/{result.r_grid.size} "
          f"valid columns, max_b_jump={result.max_b_jump:.4g}")
    return EXIT_OK


def cmd_full(args) -> int:
    model = _load_model(args)
    out = _out_dir(args)

    report = check_assumptions(model)
    cfg = _effective(args, ["dt", "t_max", "n_paths", "seed", "n_space",
                            "lattice_t_max", "r_count", "x_probes"])
    reporting.write_json(out / "assumption_report.json", reporting.wrap_payload(
        cfg, {"model": model.to_dict(), "report": report.to_dict()}))
    if not report.all_pass:
        print("full: assumption check failed")
        return EXIT_ASSUMPTION

    b_star = fbp.shoot(model, report=report)
    sol = fbp.build_value_function(model, b_star, report=report)
    _write_solution(out, model, sol, cfg)

    probes = ([float(t) for t in args.x_probes.split(",")] if args.x_probes
              else [0.5 * b_star, b_star, 1.5 * b_star])
    v_ref = {x: float(sol.value_at(x)) for x in probes}
    estimates = {}
    gaps = {}
    for i, x0 in enumerate(probes):
        c = sim.SimConfig(x0=x0, b=b_star, dt=args.dt, t_max=args.t_max,
                          n_paths=args.n_paths, seed=args.seed + i,
                          kernel=sim.KERNEL_WORST)
        est = sim.estimate_value(model, c, solution=sol, mode=sim.MODE_MAENHOUT)
        estimates[f"{x0:.6g}"] = est.to_dict()
        gaps[f"{x0:.6g}"] = {
            "mc_minus_pde": est.mean - v_ref[x0],
            "stderr": est.stderr,
            "within_3_stderr_plus_bias": None,  # filled below
        }
    reporting.write_json(out / "mc_estimate.json", reporting.wrap_payload(
        cfg, {"model": model.to_dict(), "estimates": estimates}))

    # small dt-bias probe at the first x0
    swp = sim.convergence_sweep(
        model,
        sim.SimConfig(x0=probes[0], b=b_star, dt=args.dt, t_max=args.t_max,
                      n_paths=max(2000, args.n_paths // 5), seed=args.seed + 101,
                      kernel=sim.KERNEL_WORST),
        dt_list=[args.dt, 4.0 * args.dt], n_list=[max(2000, args.n_paths // 5)],
        solution=sol)
    bias = swp["bias_at_finest"]
    for x0 in probes:
        g = gaps[f"{x0:.6g}"]
        g["within_3_stderr_plus_bias"] = bool(
            abs(g["mc_minus_pde"]) <= 3.0 * g["stderr"] + 5.0 * bias)

    val = lattice.valuate(model, b_star, n_space=args.n_space,
                          t_max=args.lattice_t_max)
    reporting.write_json(out / "lattice_report.json", reporting.wrap_payload(
        cfg, {"model": model.to_dict(), "report": val.to_report()}))

    lo, hi = sensitivity.valid_r_interval(model, r_max=0.5)
    r_grid = np.linspace(lo, min(hi, max(model.R * 2, 0.1)), args.r_count)
    result = sensitivity.sweep(model, r_grid, probes)
    reporting.write_json(out / "sweep_summary.json", reporting.wrap_payload(
        cfg, {"model": model.to_dict(), "summary": result.to_summary()}))
    reporting.write_csv(
        out / "v_matrix.csv",
        ["x"] + [f"R={r:.6g}" for r in result.r_grid],
        ([x] + list(result.v_at[i, :]) for i, x in enumerate(result.x_probes)))
    reporting.write_csv(
        out / "b_star.csv", ["R", "b_star", "valid"],
        ((r, b, int(v)) for r, b, v in
         zip(result.r_grid, result.b_star, result.assumption_valid)))

    summary = {
        "model": model.to_dict(),
        "b_star": b_star,
        "pde": sol.to_header(),
        "mc_vs_pde": gaps,
        "dt_bias_estimate": bias,
        "equivalence_gap": val.equivalence_gap,
        "sweep": result.to_summary(),
    }
    reporting.write_json(out / "full_summary.json",
                         reporting.wrap_payload(cfg, summary))
    ok = all(g["within_3_stderr_plus_bias"] for g in gaps.values())
    print(f"full: b_star={b_star:.8g} equivalence_gap={val.equivalence_gap:.3e} "
          f"mc_within_tolerance={ok}")
    return EXIT_OK if ok else EXIT_ESTIMATION


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robdiv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("check", help="evaluate solvability landmarks")
    _add_common(sp)
    sp.add_argument("--x-max", type=float, default=None)
    sp.add_argument("--n-points", type=int, default=2001)
    sp.add_argument("--b-lower-override", type=float, default=None)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("solve", help="free-boundary solve")
    _add_common(sp)
    sp.add_argument("--tol-b", type=float, default=fbp.DEFAULT_TOL_B)
    sp.add_argument("--tol-value", type=float, default=fbp.DEFAULT_TOL_VALUE)
    sp.add_argument("--x-max", type=float, default=None)
    sp.add_argument("--n-grid", type=int, default=2001)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("simulate", help="Monte Carlo estimate")
    _add_common(sp)
    sp.add_argument("--x0", type=float, default=None)
    sp.add_argument("--b", type=float, default=None)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.add_argument("--t-max", type=float, default=1000.0)
    sp.add_argument("--n-paths", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=12345)
    sp.add_argument("--kernel", choices=[sim.KERNEL_ZERO, sim.KERNEL_WORST],
                    default=sim.KERNEL_ZERO)
    sp.add_argument("--mode", choices=[sim.MODE_CLASSICAL, sim.MODE_MAENHOUT],
                    default=sim.MODE_CLASSICAL)
    sp.add_argument("--solution", help="solution.csv from `solve`")
    sp.add_argument("--inline-solve", action="store_true")
    sp.add_argument("--paths-csv", type=int, default=0,
                    help="dump the first N path records")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("lattice", help="recursive-utility lattice run")
    _add_common(sp)
    sp.add_argument("--b", type=float, default=None)
    sp.add_argument("--n-space", type=int, default=200)
    sp.add_argument("--t-max", type=float, default=300.0)
    sp.add_argument("--dt", type=float, default=None,
                    help="default: the CFL bound")
    sp.add_argument("--refine", action="store_true")
    sp.add_argument("--solution", help="solution.csv from `solve`")
    sp.add_argument("--inline-solve", action="store_true")
    sp.add_argument("--slice-csv", action="store_true")
    sp.set_defaults(func=cmd_lattice)

    sp = sub.add_parser("sweep", help="ambiguity-aversion sweep")
    _add_common(sp)
    sp.add_argument("--r-grid", help="comma-separated R values")
    sp.add_argument("--r-max", type=float, default=0.5)
    sp.add_argument("--r-count", type=int, default=6)
    sp.add_argument("--x-probes", default="0.4,0.8,1.2")
    sp.add_argument("--continuity", action="store_true")
    sp.add_argument("--refine", type=float, default=2.0)
    sp.add_argument("--n-jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("full", help="check + solve + simulate + lattice + sweep")
    _add_common(sp)
    sp.add_argument("--dt", type=float, default=2e-3)
    sp.add_argument("--t-max", type=float, default=1000.0)
    sp.add_argument("--n-paths", type=int, default=20000)
    sp.add_argument("--seed", type=int, default=12345)
    sp.add_argument("--n-space", type=int, default=120)
    sp.add_argument("--lattice-t-max", type=float, default=200.0)
    sp.add_argument("--r-count", type=int, default=5)
    sp.add_argument("--x-probes", default=None)
    sp.set_defaults(func=cmd_full)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionError as exc:
        print(f"assumption failure: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except EstimationError as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except RobdivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
