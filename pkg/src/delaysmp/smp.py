"""Necessary optimality conditions for delayed control problems.

Given a candidate pair (trajectory, control), the adjoint anticipated
equation is assembled from the problem's coefficient derivatives along the
candidate and handed to :mod:`delaysmp.absde`.  The optimality residual then
pairs any comparison control against

    E^{F_t}[ sum_r w3_r (df/du p^)(t - th_r) + w4_r (dg/du q)(t - th_r)
             + w6_r (dl/du)(t - th_r) ],

with factors beyond the horizon dropped and p^ the post-step conditional
E[p_{k+1} | F_k].  That convention is not cosmetic: the discrete adjoint is
the exact transpose of the forward first-variation recursion, so the
directional derivative of the discrete cost equals the pairing to rounding
(``duality_check`` asserts it).  A control is discretely optimal exactly
when the residual is nonnegative for every admissible comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sdde
from .absde import AbsdeProblem, picard_solve
from .bsde import AdaptedPair
from .drivers import Driver, MonteCarloDriver
from .sdde import (
    ControlPath,
    DelayedCoefficient,
    TerminalCost,
    TrajectoryGrid,
    delay_contraction_weights,
    direction_segment,
    evaluate_cost,
    simulate_first_variation,
    simulate_state,
)


@dataclass
class ControlProblem:
    """A scalar delayed control problem: minimize running plus terminal cost."""

    driver: Driver
    drift: DelayedCoefficient
    diffusion: DelayedCoefficient
    running: DelayedCoefficient
    terminal: TerminalCost
    x0_segment: np.ndarray
    eta: np.ndarray
    control_box: tuple = (-np.inf, np.inf)
    validate: bool = True

    def __post_init__(self):
        if self.validate:
            for coeff in (self.drift, self.diffusion, self.running):
                coeff.validate()

    @property
    def grid(self):
        return self.driver.grid

    def control(self, values, box=None):
        return ControlPath(self.grid, values, self.eta, box or self.control_box)

    def simulate(self, control: ControlPath) -> TrajectoryGrid:
        traj = simulate_state(
            self.drift, self.diffusion, control, self.x0_segment, self.driver
        )
        if isinstance(self.driver, MonteCarloDriver):
            self.driver.add_regressor("state", traj.values[self.grid.delay_steps:])
        return traj

    def cost(self, control, traj=None) -> float:
        traj = traj if traj is not None else self.simulate(control)
        return evaluate_cost(traj, control, self.running, self.terminal, self.driver)

    def hamiltonian(self, t, x_segment, u_segment, p, q):
        """f p + g q + l at one (t, past-segment) point."""
        fx = delay_contraction_weights(self.drift.state_measure, self.grid)
        fu = delay_contraction_weights(self.drift.control_measure, self.grid)
        gx = delay_contraction_weights(self.diffusion.state_measure, self.grid)
        gu = delay_contraction_weights(self.diffusion.control_measure, self.grid)
        lx = delay_contraction_weights(self.running.state_measure, self.grid)
        lu = delay_contraction_weights(self.running.control_measure, self.grid)
        x_segment = np.asarray(x_segment, dtype=float)
        u_segment = np.asarray(u_segment, dtype=float)
        return (
            self.drift.value(t, fx @ x_segment, fu @ u_segment) * p
            + self.diffusion.value(t, gx @ x_segment, gu @ u_segment) * q
            + self.running.value(t, lx @ x_segment, lu @ u_segment)
        )


def _coefficient_rows(cp: ControlProblem, traj, ctrl):
    """Per-step contractions and derivative values along the candidate."""
    grid = cp.grid
    ctrl = ctrl.broadcast(cp.driver.n_samples)
    rows = {}
    for name, coeff in (
        ("f", cp.drift), ("g", cp.diffusion), ("l", cp.running)
    ):
        wx = delay_contraction_weights(coeff.state_measure, grid)
        wu = delay_contraction_weights(coeff.control_measure, grid)
        dx = np.empty((grid.n_steps, cp.driver.n_samples))
        du = np.empty_like(dx)
        for k in range(grid.n_steps):
            t_k = grid.time(k)
            x_c = wx @ traj.segment(k)
            u_c = wu @ ctrl.segment(k)
            dx[k] = coeff.dx(t_k, x_c, u_c)
            du[k] = coeff.du(t_k, x_c, u_c)
        rows[name] = (dx, du, wx, wu)
    return rows


def spread_anticipating(weights, vals, grid, driver):
    """Anticipating spread of a data process: for each step j, condition
    sum_r w_r vals(j + D - r) (factors beyond the horizon dropped)."""
    n, dd = grid.n_steps, grid.delay_steps
    out = np.zeros((n, driver.n_samples))
    for j in range(n):
        acc = np.zeros(driver.n_samples)
        for r in range(dd + 1):
            k = j + dd - r
            if weights[r] != 0.0 and k <= n - 1:
                acc += weights[r] * vals[k]
        out[j] = driver.cond_expect(acc, j)
    return out


def build_adjoint(cp: ControlProblem, traj: TrajectoryGrid, ctrl: ControlPath,
                  **absde_kwargs) -> AbsdeProblem:
    """Adjoint anticipated equation along a candidate pair.

    Source: the spread of dl/dx against the running-cost state measure;
    p-term: (df/dx along the candidate, drift state measure);
    q-term: (dg/dx, diffusion state measure); window: the terminal measure
    translated to [T-d, T] with xi = dh/dx at the candidate's terminal
    contraction (a final-time variable, handled by conditioned charges).
    """
    grid = cp.grid
    drv = cp.driver
    rows = _coefficient_rows(cp, traj, ctrl)
    l_dx, _, wl_x, _ = rows["l"]
    source = spread_anticipating(wl_x, l_dx, grid, drv)

    wh = delay_contraction_weights(cp.terminal.measure, grid)
    hx = cp.terminal.dx(wh @ traj.window_segment())
    xi = np.repeat(
        np.asarray(hx, dtype=float)[None, :], grid.delay_steps + 1, axis=0
    )
    window = cp.terminal.measure.translate(grid.horizon)
    return AbsdeProblem(
        driver=drv,
        f=source,
        p_terms=[(rows["f"][0], cp.drift.state_measure)],
        q_terms=[(rows["g"][0], cp.diffusion.state_measure)],
        xi=xi,
        window=window,
        **absde_kwargs,
    )


def solve_adjoint(cp, traj, ctrl, **absde_kwargs):
    problem = build_adjoint(cp, traj, ctrl, **absde_kwargs)
    pair, trace = picard_solve(problem)
    return pair, trace, problem


def _post_step_p(pair: AdaptedPair, driver: Driver):
    n = pair.grid.n_steps
    return np.stack(
        [driver.cond_expect(pair.p[k + 1], k) for k in range(n)]
    )


@dataclass
class SmpReport:
    """Residual process and violation statistics for one comparison control."""

    residuals: np.ndarray  # (n_steps, n_samples)
    tol_opt: float
    scale: float
    violation_fraction: float
    min_residual: float
    hamiltonian_samples: list = field(default_factory=list)
    duality_gap: float | None = None


def _report(residuals, tol_opt, scale, hamiltonian_samples=None):
    viol = float(np.mean(residuals < -tol_opt))
    return SmpReport(
        residuals=residuals,
        tol_opt=tol_opt,
        scale=scale,
        violation_fraction=viol,
        min_residual=float(residuals.min()),
        hamiltonian_samples=hamiltonian_samples or [],
    )


def gradient_pairing(cp, traj, ctrl, pair):
    """The bracket rho(t) paired against control perturbations, per
    (step, sample), together with its cancellation-free magnitude."""
    grid = cp.grid
    drv = cp.driver
    n, dd = grid.n_steps, grid.delay_steps
    rows = _coefficient_rows(cp, traj, ctrl)
    p_hat = _post_step_p(pair, drv)
    bracket = np.zeros((n, drv.n_samples))
    bracket_abs = np.zeros_like(bracket)
    pieces = (
        (rows["f"][1], rows["f"][3], p_hat),
        (rows["g"][1], rows["g"][3], pair.q[:n]),
        (rows["l"][1], rows["l"][3], None),
    )
    for du, wu, weight in pieces:
        for m in range(n):
            acc = np.zeros(drv.n_samples)
            acc_abs = np.zeros(drv.n_samples)
            for r in range(dd + 1):
                k = m + dd - r
                if wu[r] == 0.0 or k > n - 1:
                    continue
                term = wu[r] * du[k] * (weight[k] if weight is not None else 1.0)
                acc += term
                acc_abs += np.abs(term)
            bracket[m] += drv.cond_expect(acc, m)
            bracket_abs[m] += acc_abs
    return bracket, float(np.mean(bracket_abs))


def optimality_residual(cp, traj, ctrl, comparison, pair=None, tol_opt=None):
    """r(t) = <v(t) - u(t), rho(t)>; nonnegative a.e. at an optimal candidate."""
    if pair is None:
        pair, _, _ = solve_adjoint(cp, traj, ctrl)
    drv = cp.driver
    bracket, mag = gradient_pairing(cp, traj, ctrl, pair)
    ctrl_b = ctrl.broadcast(drv.n_samples)
    comp = comparison.broadcast(drv.n_samples) if isinstance(
        comparison, ControlPath
    ) else None
    v_vals = comp.values if comp is not None else np.broadcast_to(
        np.asarray(comparison, dtype=float).reshape(cp.grid.n_steps, -1),
        ctrl_b.values.shape,
    )
    vbar = v_vals - ctrl_b.values
    residuals = vbar * bracket
    scale = float(np.mean(np.abs(vbar)) * mag)
    if tol_opt is None:
        tol_opt = 1e-8 if drv.is_exact else 3.0 * _bracket_se(residuals, drv)
    ham = _hamiltonian_samples(cp, traj, ctrl_b, pair)
    return _report(residuals, tol_opt, scale, ham)


def _bracket_se(residuals, driver):
    return float(np.std(residuals) / np.sqrt(driver.n_samples) + 1e-300)


def _hamiltonian_samples(cp, traj, ctrl, pair, count=5):
    grid = cp.grid
    steps = np.linspace(0, grid.n_steps - 1, count).astype(int)
    out = []
    for k in steps:
        h = cp.hamiltonian(
            grid.time(k),
            traj.segment(k),
            ctrl.segment(k),
            pair.p[k],
            pair.q[k],
        )
        out.append((float(grid.time(k)), float(np.mean(h))))
    return out


def variational_residual(cp, traj, ctrl, rho, direction, pair=None, tol_opt=None):
    """Same pairing with coefficient differences f(., u + rho vbar) - f(., u)
    in place of derivative terms (for non-differentiable running data)."""
    if pair is None:
        pair, _, _ = solve_adjoint(cp, traj, ctrl)
    grid = cp.grid
    drv = cp.driver
    n, dd = grid.n_steps, grid.delay_steps
    ctrl_b = ctrl.broadcast(drv.n_samples)
    p_hat = _post_step_p(pair, drv)
    vbar = np.asarray(direction, dtype=float)

    diffs = {}
    for name, coeff in (("f", cp.drift), ("g", cp.diffusion), ("l", cp.running)):
        wx = delay_contraction_weights(coeff.state_measure, grid)
        wu = delay_contraction_weights(coeff.control_measure, grid)
        d = np.empty((n, drv.n_samples))
        for k in range(n):
            t_k = grid.time(k)
            x_c = wx @ traj.segment(k)
            u_c = wu @ ctrl_b.segment(k)
            u_rho = u_c + rho * (wu @ direction_segment(vbar, k, grid, drv.n_samples))
            d[k] = coeff.value(t_k, x_c, u_rho) - coeff.value(t_k, x_c, u_c)
        diffs[name] = (d, wu)

    bracket = np.zeros((n, drv.n_samples))
    bracket_abs = np.zeros_like(bracket)
    for name, weight in (("f", p_hat), ("g", pair.q[:n]), ("l", None)):
        d, wu = diffs[name]
        for m in range(n):
            acc = np.zeros(drv.n_samples)
            acc_abs = np.zeros(drv.n_samples)
            for r in range(dd + 1):
                k = m + dd - r
                if wu[r] == 0.0 or k > n - 1:
                    continue
                term = wu[r] * d[k] * (weight[k] if weight is not None else 1.0)
                acc += term
                acc_abs += np.abs(term)
            bracket[m] += drv.cond_expect(acc, m)
            bracket_abs[m] += acc_abs
    if tol_opt is None:
        tol_opt = 1e-8 if drv.is_exact else 3.0 * _bracket_se(bracket, drv)
    return _report(bracket, tol_opt, float(np.mean(bracket_abs)))


@dataclass
class DualityRow:
    rho: float
    fd_one_sided: float
    fd_centered: float
    pairing: float

    @property
    def gap_one_sided(self) -> float:
        return abs(self.fd_one_sided - self.pairing)

    @property
    def gap_centered(self) -> float:
        return abs(self.fd_centered - self.pairing)


def duality_check(cp, ctrl, direction, rhos, pair=None, traj=None):
    """Directional derivative of the cost versus the adjoint pairing.

    The pairing equals the exact derivative of the discrete cost, so the
    one-sided finite-difference gap decays linearly in rho (it measures the
    cost's curvature) and the centered gap vanishes identically for
    problems whose cost is quadratic along the direction.
    """
    drv = cp.driver
    grid = cp.grid
    ctrl_b = ctrl.broadcast(drv.n_samples)
    if traj is None:
        traj = cp.simulate(ctrl_b)
    if pair is None:
        pair, _, _ = solve_adjoint(cp, traj, ctrl_b)
    bracket, _ = gradient_pairing(cp, traj, ctrl_b, pair)
    vbar = np.broadcast_to(
        np.asarray(direction, dtype=float).reshape(grid.n_steps, -1),
        (grid.n_steps, drv.n_samples),
    )
    # E[vbar * E^{F}[rho]] = E[vbar * rho] for adapted vbar
    pairing = float(
        sum(grid.dt * drv.expectation(vbar[m] * bracket[m]) for m in range(grid.n_steps))
    )
    j0 = cp.cost(ctrl_b, traj)
    rows = []
    for rho in rhos:
        up = ctrl_b.shifted(rho, vbar)
        dn = ctrl_b.shifted(-rho, vbar)
        j_up = cp.cost(up)
        j_dn = cp.cost(dn)
        rows.append(
            DualityRow(
                rho=float(rho),
                fd_one_sided=(j_up - j0) / rho,
                fd_centered=(j_up - j_dn) / (2 * rho),
                pairing=pairing,
            )
        )
    return rows


def comparison_family(cp, ctrl, count=6, seed=7):
    """A finite certificate family of admissible comparison controls:
    box-corner shifts, sinusoidal perturbations, and bang-bang switches."""
    grid = cp.grid
    rng = np.random.default_rng(seed)
    lo, hi = cp.control_box
    lo_eff = lo if np.isfinite(lo) else -1.0
    hi_eff = hi if np.isfinite(hi) else 1.0
    t = grid.times[: grid.n_steps]
    family = [
        ("corner_low", np.full(grid.n_steps, lo_eff)),
        ("corner_high", np.full(grid.n_steps, hi_eff)),
    ]
    for i in range(max(0, count - 4)):
        freq = i + 1
        mid = 0.5 * (lo_eff + hi_eff)
        amp = 0.5 * (hi_eff - lo_eff)
        family.append(
            (f"sine_{freq}", mid + amp * np.sin(freq * np.pi * t / grid.horizon))
        )
    switch = rng.integers(1, grid.n_steps, 2)
    for i, s in enumerate(switch):
        vals = np.where(np.arange(grid.n_steps) < s, lo_eff, hi_eff)
        family.append((f"bang_{i}", vals.astype(float)))
    return [
        (name, ControlPath(grid, vals, cp.eta, (-np.inf, np.inf)))
        for name, vals in family
    ]
