"""Forward simulation of controlled stochastic delay equations.

States and controls interact with their past through measure contractions:
a coefficient sees its arguments only as ``integral x(t + th) mu(d th)``
over the delay window [-d, 0].  Contractions are evaluated with the shared
interpolation quadrature of :mod:`delaysmp.measures`, precomputed into a
weight vector per measure, so a contraction is one dot product with the
(D+1)-row past segment.

Time stepping is explicit Euler-Maruyama with left-endpoint contractions.
The first-variation equation is the exact linearization of that recursion,
which is what makes remainder and duality checks exact for affine
coefficients rather than merely asymptotic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drivers import Driver
from .grids import TimeGrid
from .measures import RegularMeasure


class CoefficientError(ValueError):
    """A declared coefficient failed its derivative or Lipschitz probes."""


def delay_contraction_weights(measure: RegularMeasure, grid: TimeGrid):
    if abs(measure.a + grid.delay) > 1e-9 or abs(measure.b) > 1e-9:
        raise ValueError(
            f"delay measure lives on [{measure.a}, {measure.b}], "
            f"expected [{-grid.delay}, 0]"
        )
    return measure.grid_weights(grid.delay_steps + 1, allow_coarse=True)


@dataclass
class DelayedCoefficient:
    """A coefficient (t, <x_t, mu_x>, <u_t, mu_u>) -> value with analytic
    partial derivatives in the two contracted arguments.

    ``value``, ``dx`` and ``du`` are vectorized callables of
    (t, X, U); the measures define the contractions the coefficient is fed.
    """

    kind: str
    value: callable
    dx: callable
    du: callable
    state_measure: RegularMeasure
    control_measure: RegularMeasure
    lipschitz: float = 10.0
    probe_box: float = 3.0

    @classmethod
    def affine(cls, a, b, const=0.0, *, state_measure, control_measure, kind="affine"):
        return cls(
            kind=kind,
            value=lambda t, x, u: a * x + b * u + const,
            dx=lambda t, x, u: np.broadcast_to(float(a), np.shape(x)).copy(),
            du=lambda t, x, u: np.broadcast_to(float(b), np.shape(u)).copy(),
            state_measure=state_measure,
            control_measure=control_measure,
            lipschitz=abs(a) + abs(b) + 1e-9,
        )

    @classmethod
    def quadratic_cost(cls, qx, qu, *, state_measure, control_measure):
        return cls(
            kind="quadratic",
            value=lambda t, x, u: 0.5 * (qx * x**2 + qu * u**2),
            dx=lambda t, x, u: qx * np.asarray(x, dtype=float),
            du=lambda t, x, u: qu * np.asarray(u, dtype=float),
            state_measure=state_measure,
            control_measure=control_measure,
            lipschitz=100.0,
        )

    def validate(self, rng=None, n_probes=32, rel_tol=1e-6):
        """Probe the derivative fields against central differences and the
        declared Lipschitz constant; returns observed sup |dx|, sup |du|."""
        rng = rng or np.random.default_rng(2024)
        box = self.probe_box
        t = rng.uniform(0.0, 1.0, n_probes)
        x = rng.uniform(-box, box, n_probes)
        u = rng.uniform(-box, box, n_probes)
        eps = 1e-5 * box
        for name, grad, bump in (
            ("dx", self.dx, lambda e: (t, x + e, u)),
            ("du", self.du, lambda e: (t, x, u + e)),
        ):
            fd = (self.value(*bump(eps)) - self.value(*bump(-eps))) / (2 * eps)
            an = grad(t, x, u)
            scale = np.maximum(np.abs(an), 1.0)
            if np.max(np.abs(fd - an) / scale) > max(rel_tol, 1e3 * eps):
                raise CoefficientError(
                    f"{self.kind}: analytic {name} disagrees with finite "
                    f"differences (max rel err "
                    f"{np.max(np.abs(fd - an) / scale):.2e})"
                )
        x2 = rng.uniform(-box, box, n_probes)
        u2 = rng.uniform(-box, box, n_probes)
        num = np.abs(self.value(t, x, u) - self.value(t, x2, u2))
        den = np.abs(x - x2) + np.abs(u - u2)
        ok = den > 1e-9
        if np.any(num[ok] > self.lipschitz * den[ok] * (1 + 1e-9)):
            raise CoefficientError(
                f"{self.kind}: Lipschitz probe exceeds declared constant "
                f"{self.lipschitz}"
            )
        return (
            float(np.max(np.abs(self.dx(t, x, u)))),
            float(np.max(np.abs(self.du(t, x, u)))),
        )


@dataclass
class ControlPath:
    """Control values on the active grid plus a deterministic initial segment.

    ``values`` has a row per step 0 .. N-1 (scalar rows broadcast across
    samples); ``eta`` holds the D deterministic values on [-d, 0).
    """

    grid: TimeGrid
    values: np.ndarray
    eta: np.ndarray
    box: tuple = (-np.inf, np.inf)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] != self.grid.n_steps:
            raise ValueError(
                f"control needs {self.grid.n_steps} rows, got {self.values.shape[0]}"
            )
        self.eta = np.asarray(self.eta, dtype=float).reshape(-1)
        if self.eta.shape[0] != self.grid.delay_steps:
            raise ValueError(
                f"initial control segment needs {self.grid.delay_steps} values"
            )
        lo, hi = self.box
        if np.any(self.values < lo - 1e-12) or np.any(self.values > hi + 1e-12):
            raise ValueError("control leaves the admissible box")

    @classmethod
    def constant(cls, grid, level, n_samples=1, box=(-np.inf, np.inf)):
        return cls(
            grid,
            np.full((grid.n_steps, n_samples), float(level)),
            np.full(grid.delay_steps, float(level)),
            box,
        )

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def broadcast(self, n_samples):
        if self.n_samples == n_samples:
            return self
        if self.n_samples != 1:
            raise ValueError("cannot broadcast a stochastic control")
        return ControlPath(
            self.grid, np.repeat(self.values, n_samples, axis=1), self.eta, self.box
        )

    def segment(self, step, n_samples=None):
        """Values at steps step-D .. step, shape (D+1, n_samples)."""
        m = n_samples or self.n_samples
        dd = self.grid.delay_steps
        seg = np.empty((dd + 1, m))
        for i, s in enumerate(range(step - dd, step + 1)):
            if s < 0:
                seg[i] = self.eta[s + dd]
            else:
                row = self.values[s]
                seg[i] = row if row.size == m else np.repeat(row, m)
        return seg

    def shifted(self, rho, direction):
        """The control u + rho * direction (direction zero on [-d, 0))."""
        vbar = np.asarray(direction, dtype=float)
        if vbar.ndim == 1:
            vbar = vbar[:, None]
        vals = self.values + rho * vbar
        return ControlPath(self.grid, vals, self.eta, (-np.inf, np.inf))

    def squared_norm(self, driver: Driver) -> float:
        total = float(np.sum(self.eta**2) * self.grid.dt)
        for k in range(self.grid.n_steps):
            total += self.grid.dt * driver.expectation(
                np.broadcast_to(self.values[k], (driver.n_samples,)) ** 2
            )
        return total


def direction_segment(vbar, step, grid, n_samples):
    """Past segment of a perturbation direction (zero on [-d, 0))."""
    vbar = np.asarray(vbar, dtype=float)
    dd = grid.delay_steps
    seg = np.zeros((dd + 1, n_samples))
    for i, s in enumerate(range(step - dd, step + 1)):
        if s >= 0:
            row = vbar[s]
            seg[i] = row if np.ndim(row) and len(row) == n_samples else row
    return seg


@dataclass
class TrajectoryGrid:
    """State path on [-d, T]: row i holds the state at step i - D."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def at(self, step):
        return self.values[step + self.grid.delay_steps]

    def segment(self, step):
        """States at steps step-D .. step, shape (D+1, n_samples)."""
        i = step + self.grid.delay_steps
        return self.values[i - self.grid.delay_steps: i + 1]

    def window_segment(self):
        return self.segment(self.grid.n_steps)


def _initial_rows(x0_segment, grid, n_samples):
    x0 = np.asarray(x0_segment, dtype=float)
    if x0.ndim == 0:
        x0 = np.full(grid.delay_steps + 1, float(x0))
    if x0.shape[0] != grid.delay_steps + 1:
        raise ValueError(
            f"initial segment needs {grid.delay_steps + 1} values (steps -D .. 0)"
        )
    return np.repeat(x0[:, None], n_samples, axis=1)


def simulate_state(drift, diffusion, control, x0_segment, driver: Driver):
    """Explicit Euler-Maruyama for
    dx = f(t, <x_t>, <u_t>) dt + g(t, <x_t>, <u_t>) dW."""
    grid = driver.grid
    m = driver.n_samples
    ctrl = control.broadcast(m)
    wf_x = delay_contraction_weights(drift.state_measure, grid)
    wf_u = delay_contraction_weights(drift.control_measure, grid)
    wg_x = delay_contraction_weights(diffusion.state_measure, grid)
    wg_u = delay_contraction_weights(diffusion.control_measure, grid)

    rows = grid.delay_steps + grid.n_steps + 1
    values = np.empty((rows, m))
    values[: grid.delay_steps + 1] = _initial_rows(x0_segment, grid, m)
    traj = TrajectoryGrid(grid, values)
    for k in range(grid.n_steps):
        t_k = grid.time(k)
        xseg = traj.segment(k)
        useg = ctrl.segment(k)
        f_k = drift.value(t_k, wf_x @ xseg, wf_u @ useg)
        g_k = diffusion.value(t_k, wg_x @ xseg, wg_u @ useg)
        values[grid.delay_steps + k + 1] = (
            traj.at(k) + f_k * grid.dt + g_k * driver.dw[k]
        )
    return traj


def simulate_first_variation(drift, diffusion, base_traj, base_control,
                             direction, driver: Driver):
    """Exact linearization of the Euler recursion around (base_traj, base_control)
    in the control direction (zero on the initial segment)."""
    grid = driver.grid
    m = driver.n_samples
    ctrl = base_control.broadcast(m)
    wf_x = delay_contraction_weights(drift.state_measure, grid)
    wf_u = delay_contraction_weights(drift.control_measure, grid)
    wg_x = delay_contraction_weights(diffusion.state_measure, grid)
    wg_u = delay_contraction_weights(diffusion.control_measure, grid)

    rows = grid.delay_steps + grid.n_steps + 1
    values = np.zeros((rows, m))
    y = TrajectoryGrid(grid, values)
    for k in range(grid.n_steps):
        t_k = grid.time(k)
        xseg = base_traj.segment(k)
        useg = ctrl.segment(k)
        vseg = direction_segment(direction, k, grid, m)
        fx = drift.dx(t_k, wf_x @ xseg, wf_u @ useg)
        fu = drift.du(t_k, wf_x @ xseg, wf_u @ useg)
        gx = diffusion.dx(t_k, wg_x @ xseg, wg_u @ useg)
        gu = diffusion.du(t_k, wg_x @ xseg, wg_u @ useg)
        drift_lin = fx * (wf_x @ y.segment(k)) + fu * (wf_u @ vseg)
        diff_lin = gx * (wg_x @ y.segment(k)) + gu * (wg_u @ vseg)
        values[grid.delay_steps + k + 1] = (
            y.at(k) + drift_lin * grid.dt + diff_lin * driver.dw[k]
        )
    return y


@dataclass
class RemainderRow:
    rho: float
    ratio: float  # E sup_t |R^rho|^2 / rho^2


def expansion_remainder(drift, diffusion, control, x0_segment, driver,
                        direction, rhos):
    """Pathwise remainder x^rho - x - rho y against the rho ladder."""
    base = simulate_state(drift, diffusion, control, x0_segment, driver)
    y = simulate_first_variation(drift, diffusion, base, control, direction, driver)
    dd = driver.grid.delay_steps
    rows = []
    for rho in rhos:
        ctrl_rho = control.broadcast(driver.n_samples).shifted(rho, direction)
        xr = simulate_state(drift, diffusion, ctrl_rho, x0_segment, driver)
        rem = xr.values[dd:] - base.values[dd:] - rho * y.values[dd:]
        sup2 = np.max(rem**2, axis=0)
        rows.append(RemainderRow(float(rho), driver.expectation(sup2) / rho**2))
    return rows


@dataclass
class TerminalCost:
    """Terminal cost h(<x_T, mu>): value/derivative callables plus the
    window measure on [-d, 0]."""

    value: callable
    dx: callable
    measure: RegularMeasure

    @classmethod
    def linear(cls, measure, scale=1.0):
        return cls(
            value=lambda y: scale * np.asarray(y, dtype=float),
            dx=lambda y: np.full(np.shape(y), float(scale)),
            measure=measure,
        )

    @classmethod
    def quadratic(cls, measure, weight=1.0):
        return cls(
            value=lambda y: 0.5 * weight * np.asarray(y, dtype=float) ** 2,
            dx=lambda y: weight * np.asarray(y, dtype=float),
            measure=measure,
        )


def evaluate_cost(traj, control, running, terminal: TerminalCost, driver: Driver):
    """J = E sum_k l(t_k, <x_k>, <u_k>) dt + E h(<x_T, mu>), left-endpoint rule."""
    grid = driver.grid
    ctrl = control.broadcast(driver.n_samples)
    wl_x = delay_contraction_weights(running.state_measure, grid)
    wl_u = delay_contraction_weights(running.control_measure, grid)
    wh = delay_contraction_weights(terminal.measure, grid)
    total = 0.0
    for k in range(grid.n_steps):
        lk = running.value(grid.time(k), wl_x @ traj.segment(k), wl_u @ ctrl.segment(k))
        total += grid.dt * driver.expectation(
            np.broadcast_to(lk, (driver.n_samples,))
        )
    term = terminal.value(wh @ traj.window_segment())
    return float(total + driver.expectation(np.broadcast_to(term, (driver.n_samples,))))
