"""Experiment configuration: YAML schema, validation, and object builders.

Configs are nested key/value sections; unknown keys are rejected so typos
fail loudly.  The resolved config is embedded verbatim in every report for
reproducibility.
"""

from __future__ import annotations

import numpy as np
import yaml

from .drivers import BinaryLattice, MonteCarloDriver
from .grids import TimeGrid
from .measures import RegularMeasure
from .models import AdvertisingModel, PortfolioModel
from .sdde import DelayedCoefficient, TerminalCost
from .smp import ControlProblem


class ConfigError(ValueError):
    """Schema violation in an experiment config."""


_SCHEMA = {
    "grid": {"T": None, "N": None, "D": None},
    "driver": {"kind": None, "paths": None, "seed": None, "basis_degree": None},
    "problem": None,  # validated per kind
    "solver": {
        "beta": None,
        "tol": None,
        "max_iter": None,
        "oracle": None,
        "oracle_tol": None,
        "approx_ladder": None,
        "mollify_cells": None,
        "rho_ladder": None,
        "directions": None,
    },
    "output": {"dir": None, "processes": None},
}

_PROBLEM_KEYS = {
    "bsde": {"kind", "f", "g", "h", "xi", "window"},
    "absde": {"kind", "f", "xi", "window", "p_terms", "q_terms"},
    "control": {
        "kind", "drift", "diffusion", "running", "terminal",
        "x0", "eta", "box", "candidate",
    },
    "advertising": None,  # model dataclass fields checked at build
    "portfolio": None,
    "measure_approx": {"kind", "base", "ladder"},
    "remainder": {
        "kind", "drift", "diffusion", "running", "terminal",
        "x0", "eta", "box", "candidate", "direction", "rho_ladder",
    },
}


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    validate(cfg)
    return cfg


def validate(cfg):
    for key in cfg:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown top-level key: {key!r}")
    for section, allowed in _SCHEMA.items():
        if allowed is None or section not in cfg:
            continue
        body = cfg[section]
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key in body:
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}")
    if "grid" not in cfg:
        raise ConfigError("missing required section 'grid'")
    grid = cfg["grid"]
    for key in ("T", "N", "D"):
        if key not in grid:
            raise ConfigError(f"grid.{key} is required")
    prob = cfg.get("problem")
    if prob is not None:
        if not isinstance(prob, dict) or "kind" not in prob:
            raise ConfigError("problem section needs a 'kind'")
        kind = prob["kind"]
        if kind not in _PROBLEM_KEYS:
            raise ConfigError(f"unknown problem kind {kind!r}")
        allowed = _PROBLEM_KEYS[kind]
        if allowed is not None:
            for key in prob:
                if key not in allowed:
                    raise ConfigError(f"unknown key problem.{key} for kind {kind!r}")


def build_grid(cfg) -> TimeGrid:
    g = cfg["grid"]
    try:
        return TimeGrid(float(g["T"]), int(g["N"]), int(g["D"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_driver(cfg, grid, seed_override=None):
    d = cfg.get("driver", {}) or {}
    kind = d.get("kind", "lattice")
    if kind == "lattice":
        return BinaryLattice(grid)
    if kind == "mc":
        seed = seed_override if seed_override is not None else d.get("seed", 0)
        return MonteCarloDriver(
            grid,
            n_paths=int(d.get("paths", 4096)),
            seed=int(seed),
            basis_degree=int(d.get("basis_degree", 2)),
        )
    raise ConfigError(f"unknown driver kind {kind!r}")


def build_measure(spec, a, b) -> RegularMeasure:
    if spec is None:
        return RegularMeasure.zero(a, b)
    if "support" in spec:
        sa, sb = spec["support"]
        if abs(sa - a) > 1e-9 or abs(sb - b) > 1e-9:
            raise ConfigError(
                f"measure support {spec['support']} does not match [{a}, {b}]"
            )
    try:
        return RegularMeasure.from_config({**spec, "support": [a, b]})
    except ValueError as exc:
        raise ConfigError(f"bad measure: {exc}") from exc


def rows(spec, n_rows, name):
    """Deterministic per-step values: scalar or list of length n_rows."""
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(n_rows, float(arr))
    if arr.shape != (n_rows,):
        raise ConfigError(f"{name}: expected a scalar or {n_rows} values")
    return arr


def build_bsde(cfg, driver):
    from .bsde import LinearBsdeProblem

    prob = cfg["problem"]
    grid = driver.grid
    window = build_measure(
        prob.get("window"), grid.horizon - grid.delay, grid.horizon
    )
    return LinearBsdeProblem(
        driver=driver,
        f=rows(prob.get("f", 0.0), grid.n_steps, "f"),
        g=rows(prob.get("g", 0.0), grid.n_steps, "g"),
        h=rows(prob.get("h", 0.0), grid.n_steps, "h"),
        xi=rows(prob.get("xi", 0.0), grid.delay_steps + 1, "xi"),
        window=window,
    )


def build_absde(cfg, driver, solver=None):
    from .absde import AbsdeProblem

    prob = cfg["problem"]
    solver = solver if solver is not None else cfg.get("solver", {}) or {}
    grid = driver.grid
    window = build_measure(
        prob.get("window"), grid.horizon - grid.delay, grid.horizon
    )

    def terms(key):
        out = []
        for item in prob.get(key, []) or []:
            coeff = rows(item.get("coeff", 0.0), grid.n_steps, f"{key}.coeff")
            measure = build_measure(item.get("measure"), -grid.delay, 0.0)
            out.append((coeff, measure))
        return out

    kwargs = {}
    if solver.get("beta") is not None:
        kwargs["beta"] = float(solver["beta"])
    if solver.get("tol") is not None:
        kwargs["tol"] = float(solver["tol"])
    if solver.get("max_iter") is not None:
        kwargs["max_iter"] = int(solver["max_iter"])
    return AbsdeProblem(
        driver=driver,
        f=rows(prob.get("f", 0.0), grid.n_steps, "f"),
        p_terms=terms("p_terms"),
        q_terms=terms("q_terms"),
        xi=rows(prob.get("xi", 0.0), grid.delay_steps + 1, "xi"),
        window=window,
        **kwargs,
    )


def build_coefficient(spec, grid, role):
    d = grid.delay
    state_measure = build_measure(spec.get("state_measure"), -d, 0.0)
    control_measure = build_measure(spec.get("control_measure"), -d, 0.0)
    kind = spec.get("kind", "affine")
    if kind == "affine":
        return DelayedCoefficient.affine(
            float(spec.get("a", 0.0)),
            float(spec.get("b", 0.0)),
            float(spec.get("const", 0.0)),
            state_measure=state_measure,
            control_measure=control_measure,
        )
    if kind == "quadratic_cost":
        return DelayedCoefficient.quadratic_cost(
            float(spec.get("qx", 0.0)),
            float(spec.get("qu", 0.0)),
            state_measure=state_measure,
            control_measure=control_measure,
        )
    raise ConfigError(f"unknown coefficient kind {kind!r} for {role}")


def build_terminal(spec, grid):
    measure = build_measure(spec.get("measure"), -grid.delay, 0.0)
    kind = spec.get("kind", "linear")
    scale = float(spec.get("scale", 1.0))
    if kind == "linear":
        return TerminalCost.linear(measure, scale)
    if kind == "quadratic":
        return TerminalCost.quadratic(measure, scale)
    if kind == "smooth":
        from .models import _lipschitz_smooth

        value, dx = _lipschitz_smooth(scale)
        return TerminalCost(value=value, dx=dx, measure=measure)
    raise ConfigError(f"unknown terminal kind {kind!r}")


def build_control_problem(cfg, driver) -> ControlProblem:
    prob = cfg["problem"]
    grid = driver.grid
    box = tuple(prob.get("box", (-np.inf, np.inf)))
    return ControlProblem(
        driver=driver,
        drift=build_coefficient(prob["drift"], grid, "drift"),
        diffusion=build_coefficient(prob["diffusion"], grid, "diffusion"),
        running=build_coefficient(prob["running"], grid, "running"),
        terminal=build_terminal(prob["terminal"], grid),
        x0_segment=rows(prob.get("x0", 0.0), grid.delay_steps + 1, "x0"),
        eta=rows(prob.get("eta", 0.0), max(grid.delay_steps, 1), "eta")[
            : grid.delay_steps
        ],
        control_box=box,
    )


def build_model(cfg):
    prob = dict(cfg["problem"])
    kind = prob.pop("kind")
    d = float(prob.get("delay", cfg["grid"]["T"] * cfg["grid"]["D"] / cfg["grid"]["N"]))
    prob["delay"] = d
    measure_keys = {
        "advertising": ("mu_a", "mu_b", "mu_phi"),
        "portfolio": ("mu_utility",),
    }[kind]
    for key in measure_keys:
        if key in prob and prob[key] is not None:
            prob[key] = build_measure(prob[key], -d, 0.0)
    for key in ("box", "control_box", "pi_box", "c_box"):
        if key in prob:
            prob[key] = tuple(prob[key])
    try:
        if kind == "advertising":
            return AdvertisingModel(**prob)
        return PortfolioModel(**prob)
    except TypeError as exc:
        raise ConfigError(f"bad {kind} model parameters: {exc}") from exc
