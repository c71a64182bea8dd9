"""Experiment runner: deterministic orchestration of the solver modules.

Subcommands map onto the library:

* ``solve-bsde``     both windowed-BSDE solvers, their agreement, the audit;
* ``solve-absde``    Picard solution, optional dense oracle and measure ladder;
* ``check-smp``      adjoint, optimality residuals over a direction family,
                     and the duality gap ladder for a control problem;
* ``run-model``      the same pipeline for a packaged application model;
* ``convergence-study``  measure-approximation or remainder ladders.

Reports are JSON with the resolved config embedded; processes go to CSV.
Runs are deterministic given (config, seed): the ``--threads`` flag is an
orchestration hint only and never alters numerics or output bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, absde, bsde, config, smp
from .absde import ConvergenceError
from .drivers import DriverError, GirsanovPositivityError
from .bsde import SingularStepError
from .config import ConfigError
from .grids import GridError
from .measures import GridResolutionError, MeasureSupportError
from .sdde import CoefficientError

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_SOLVER = 3
EXIT_ORACLE = 4

_SCHEMA_ERRORS = (ConfigError, GridError, MeasureSupportError, GridResolutionError,
                  FileNotFoundError, KeyError)
_SOLVER_ERRORS = (ConvergenceError, GirsanovPositivityError, SingularStepError,
                  DriverError, CoefficientError, ValueError, RuntimeError)


class OracleDisagreement(RuntimeError):
    pass


def _out_dir(args):
    base = args.out or os.environ.get("DELAYSMP_OUT", "delaysmp-out")
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_pair_csv(path, pair, grid):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,time,sample,p,q\n")
        for k in range(grid.ext_steps + 1):
            t = grid.time(k)
            for j in range(pair.n_samples):
                fh.write(
                    f"{k},{t:.12g},{j},{pair.p[k, j]:.17g},{pair.q[k, j]:.17g}\n"
                )


def _write_process_csv(path, values, grid, start_step=0):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,time,sample,value\n")
        for i, row in enumerate(values):
            k = start_step + i
            t = grid.time(k)
            for j, v in enumerate(np.atleast_1d(row)):
                fh.write(f"{k},{t:.12g},{j},{v:.17g}\n")


def _report_stub(cfg, args):
    # the thread hint is deliberately not embedded: runs must be byte-identical
    # across worker counts
    return {
        "version": __version__,
        "config": cfg,
        "seed": args.seed,
    }


def _cmd_solve_bsde(args):
    cfg = config.load_config(args.config)
    grid = config.build_grid(cfg)
    driver = config.build_driver(cfg, grid, args.seed)
    prob = config.build_bsde(cfg, driver)
    rec = bsde.solve_recursion(prob)
    exp = bsde.solve_explicit(prob)
    agreement = rec.sup_diff(exp)
    solver_cfg = cfg.get("solver", {}) or {}
    beta = float(solver_cfg.get("beta") or 1.0)
    audit = bsde.audit_estimates(prob, rec, beta)
    out = _out_dir(args)
    report = _report_stub(cfg, args)
    report.update(
        {
            "p0": driver.expectation(rec.p[0]),
            "solver_agreement": agreement,
            "audit": {
                "beta": audit.beta,
                "lhs_p": audit.lhs_p,
                "lhs_q": audit.lhs_q,
                "data_xi": audit.data_xi,
                "data_f": audit.data_f,
                "implied_c": audit.implied_c,
                "certified_c": audit.certified_c,
                "certified_inequality_holds": audit.holds,
            },
        }
    )
    _write_pair_csv(out / "bsde_pair.csv", rec, grid)
    _write_json(out / "bsde_report.json", report)
    print(f"p(0) = {report['p0']:.12g}; solver agreement {agreement:.3e}")
    tol = float(solver_cfg.get("oracle_tol") or 1e-9)
    if agreement > tol:
        raise OracleDisagreement(
            f"explicit and recursive solvers disagree by {agreement:.3e} > {tol:g}"
        )
    return EXIT_OK


def _cmd_solve_absde(args):
    cfg = config.load_config(args.config)
    grid = config.build_grid(cfg)
    driver = config.build_driver(cfg, grid, args.seed)
    prob = config.build_absde(cfg, driver)
    pair, trace = absde.picard_solve(prob)
    out = _out_dir(args)
    report = _report_stub(cfg, args)
    report.update(
        {
            "p0": driver.expectation(pair.p[0]),
            "picard": {
                "iterations": trace.iterations,
                "converged": trace.converged,
                "beta": trace.beta,
                "theoretical_ratio": trace.theoretical_ratio,
                "observed_ratio": trace.observed_ratio,
                "increments": trace.increments,
            },
        }
    )
    solver_cfg = cfg.get("solver", {}) or {}
    oracle_requested = args.oracle or bool(solver_cfg.get("oracle"))
    if oracle_requested:
        oracle = absde.direct_solve(prob)
        diff = pair.sup_diff(oracle)
        report["oracle_agreement"] = diff
    ladder = args.approx_ladder or solver_cfg.get("approx_ladder")
    if ladder:
        ns = [int(v) for v in ladder]
        rows = absde.solve_with_measure_approx(prob, ns)
        report["measure_approx"] = [
            {"n": r.n, "err_p": r.err_p, "err_q": r.err_q, "err": r.err}
            for r in rows
        ]
    _write_pair_csv(out / "absde_pair.csv", pair, grid)
    _write_json(out / "absde_report.json", report)
    print(
        f"p(0) = {report['p0']:.12g}; {trace.iterations} Picard iterations "
        f"(ratio {trace.observed_ratio:.3f} <= bound {trace.theoretical_ratio:.3f})"
    )
    if "oracle_agreement" in report:
        tol = float(solver_cfg.get("oracle_tol") or 1e-9)
        print(f"oracle agreement {report['oracle_agreement']:.3e}")
        if report["oracle_agreement"] > tol:
            raise OracleDisagreement(
                f"Picard and dense solutions disagree by "
                f"{report['oracle_agreement']:.3e} > {tol:g}"
            )
    return EXIT_OK


def _smp_pipeline(cp, candidate_values, cfg, args, label):
    grid = cp.grid
    ctrl = cp.control(
        config.rows(candidate_values, grid.n_steps, "candidate")
    ).broadcast(cp.driver.n_samples)
    traj = cp.simulate(ctrl)
    pair, trace, adj = smp.solve_adjoint(cp, traj, ctrl)
    solver_cfg = cfg.get("solver", {}) or {}
    count = args.directions or int(solver_cfg.get("directions") or 6)
    family = smp.comparison_family(cp, ctrl, count=count)
    residuals = {}
    worst = 0.0
    for name, comp in family:
        rep = smp.optimality_residual(cp, traj, ctrl, comp, pair=pair)
        residuals[name] = {
            "min_residual": rep.min_residual,
            "violation_fraction": rep.violation_fraction,
            "scale": rep.scale,
            "tol": rep.tol_opt,
        }
        worst = min(worst, rep.min_residual)
    rhos = solver_cfg.get("rho_ladder") or [1e-2, 1e-3]
    direction = np.ones(grid.n_steps)
    duality = smp.duality_check(cp, ctrl, direction, rhos, pair=pair, traj=traj)
    out = _out_dir(args)
    report = _report_stub(cfg, args)
    report.update(
        {
            "model": label,
            "cost": cp.cost(ctrl, traj),
            "picard": {
                "iterations": trace.iterations,
                "observed_ratio": trace.observed_ratio,
                "theoretical_ratio": trace.theoretical_ratio,
            },
            "residuals": residuals,
            "worst_min_residual": worst,
            "duality": [
                {
                    "rho": r.rho,
                    "pairing": r.pairing,
                    "fd_one_sided": r.fd_one_sided,
                    "fd_centered": r.fd_centered,
                    "gap_one_sided": r.gap_one_sided,
                    "gap_centered": r.gap_centered,
                }
                for r in duality
            ],
        }
    )
    _write_pair_csv(out / f"{label}_adjoint.csv", pair, grid)
    _write_process_csv(
        out / f"{label}_state.csv", traj.values, grid, start_step=-grid.delay_steps
    )
    _write_json(out / f"{label}_report.json", report)
    print(
        f"{label}: cost {report['cost']:.9g}; worst min residual {worst:.3e}; "
        f"duality gap (centered, rho={duality[-1].rho:g}) "
        f"{duality[-1].gap_centered:.3e}"
    )
    return report


def _cmd_check_smp(args):
    cfg = config.load_config(args.config)
    grid = config.build_grid(cfg)
    driver = config.build_driver(cfg, grid, args.seed)
    cp = config.build_control_problem(cfg, driver)
    candidate = cfg["problem"].get("candidate", 0.0)
    if args.candidate:
        candidate = np.loadtxt(args.candidate, delimiter=",", ndmin=1)
    _smp_pipeline(cp, candidate, cfg, args, "smp")
    return EXIT_OK


def _cmd_run_model(args):
    cfg = config.load_config(args.config)
    if cfg["problem"]["kind"] != args.model:
        raise ConfigError(
            f"config problem kind {cfg['problem']['kind']!r} does not match "
            f"requested model {args.model!r}"
        )
    grid = config.build_grid(cfg)
    driver = config.build_driver(cfg, grid, args.seed)
    model = config.build_model(cfg)
    if args.model == "advertising":
        cp = model.problem(driver)
        _smp_pipeline(cp, 0.0, cfg, args, "advertising")
        return EXIT_OK
    # portfolio: split-system pipeline
    from .sdde import ControlPath

    pi = ControlPath.constant(grid, model.pi_box[1], box=model.pi_box)
    c = ControlPath.constant(grid, model.c_box[0], box=model.c_box)
    outcome = model.simulate(driver, pi, c)
    price_prob = model.price_adjoint_problem(driver, outcome)
    price_pair = absde.direct_solve(price_prob) if driver.is_exact and \
        grid.n_steps <= absde.DIRECT_SOLVE_CAP else absde.picard_solve(price_prob)[0]
    price_sup = float(
        max(np.max(np.abs(price_pair.p)), np.max(np.abs(price_pair.q)))
    )
    wealth_prob = model.wealth_adjoint_problem(driver, outcome)
    pair2 = bsde.solve_recursion(wealth_prob)
    res_c, res_pi = model.optimality_residuals(
        driver, outcome, pair2, pi, c,
        comparison_pi=np.full(grid.n_steps, model.pi_box[0]),
        comparison_c=np.full(grid.n_steps, model.c_box[1]),
    )
    out = _out_dir(args)
    report = _report_stub(cfg, args)
    report.update(
        {
            "model": "portfolio",
            "utility": model.utility_value(driver, outcome),
            "price_adjoint_sup": price_sup,
            "wealth_p0": driver.expectation(pair2.p[0]),
            "min_residual_consumption": float(res_c.min()),
            "min_residual_investment": float(res_pi.min()),
        }
    )
    _write_pair_csv(out / "portfolio_wealth_adjoint.csv", pair2, grid)
    _write_process_csv(
        out / "portfolio_price.csv", outcome.price.values, grid,
        start_step=-grid.delay_steps,
    )
    _write_json(out / "portfolio_report.json", report)
    print(
        f"portfolio: utility {report['utility']:.9g}; "
        f"price-adjoint sup {price_sup:.3e}; "
        f"min residuals (c, pi) = ({res_c.min():.3e}, {res_pi.min():.3e})"
    )
    return EXIT_OK


def _cmd_convergence_study(args):
    cfg = config.load_config(args.config)
    kind = cfg["problem"]["kind"]
    grid = config.build_grid(cfg)
    driver = config.build_driver(cfg, grid, args.seed)
    out = _out_dir(args)
    report = _report_stub(cfg, args)
    if kind == "measure_approx":
        base_cfg = {"grid": cfg["grid"], "problem": cfg["problem"]["base"]}
        config.validate({**base_cfg, "driver": cfg.get("driver", {})})
        prob = config.build_absde(base_cfg, driver, solver=cfg.get("solver", {}))
        ns = [int(v) for v in cfg["problem"]["ladder"]]
        rows = absde.solve_with_measure_approx(prob, ns)
        report["ladder"] = [
            {"n": r.n, "err_p": r.err_p, "err_q": r.err_q, "err": r.err}
            for r in rows
        ]
        for r in rows:
            print(f"n={r.n:4d}  err={r.err:.6e}")
    elif kind == "remainder":
        from . import sdde as sdde_mod

        sub = {"grid": cfg["grid"], "problem": {
            k: v for k, v in cfg["problem"].items()
            if k in _control_keys()
        }}
        sub["problem"]["kind"] = "control"
        cp = config.build_control_problem(sub, driver)
        ctrl = cp.control(
            config.rows(cfg["problem"].get("candidate", 0.0), grid.n_steps, "candidate")
        )
        direction = config.rows(
            cfg["problem"].get("direction", 1.0), grid.n_steps, "direction"
        )
        rhos = cfg["problem"].get("rho_ladder") or [1e-1, 3e-2, 1e-2, 3e-3]
        rows = sdde_mod.expansion_remainder(
            cp.drift, cp.diffusion, ctrl.broadcast(driver.n_samples),
            cp.x0_segment, driver, direction, rhos,
        )
        report["ladder"] = [{"rho": r.rho, "ratio": r.ratio} for r in rows]
        for r in rows:
            print(f"rho={r.rho:.3e}  E sup|R|^2 / rho^2 = {r.ratio:.6e}")
    else:
        raise ConfigError(f"unknown study kind {kind!r}")
    _write_json(out / "study_report.json", report)
    return EXIT_OK


def _control_keys():
    return {"kind", "drift", "diffusion", "running", "terminal", "x0", "eta", "box",
            "candidate"}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="delaysmp",
        description="windowed BSDE / anticipated BSDE / delayed maximum-principle runner",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="driver seed override")
        p.add_argument(
            "--threads", type=int, default=1,
            help="worker hint; numerics are deterministic regardless",
        )

    p = sub.add_parser("solve-bsde", help="solve a windowed linear BSDE both ways")
    common(p)

    p = sub.add_parser("solve-absde", help="solve an anticipated BSDE")
    common(p)
    p.add_argument("--oracle", action="store_true", help="cross-check dense solve")
    p.add_argument(
        "--approx-ladder", type=lambda s: [int(v) for v in s.split(",")],
        default=None, help="measure-mollification ladder, e.g. 4,8,16",
    )

    p = sub.add_parser("check-smp", help="optimality residuals for a candidate")
    common(p)
    p.add_argument("--candidate", default=None, help="CSV with per-step control values")
    p.add_argument("--directions", type=int, default=None)

    p = sub.add_parser("run-model", help="full pipeline for a packaged model")
    p.add_argument("model", choices=["advertising", "portfolio"])
    common(p)
    p.add_argument("--directions", type=int, default=None)

    p = sub.add_parser("convergence-study", help="measure or remainder ladders")
    common(p)

    args = parser.parse_args(argv)
    handlers = {
        "solve-bsde": _cmd_solve_bsde,
        "solve-absde": _cmd_solve_absde,
        "check-smp": _cmd_check_smp,
        "run-model": _cmd_run_model,
        "convergence-study": _cmd_convergence_study,
    }
    try:
        return handlers[args.command](args)
    except OracleDisagreement as exc:
        print(f"oracle disagreement: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except _SCHEMA_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except _SOLVER_ERRORS as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
