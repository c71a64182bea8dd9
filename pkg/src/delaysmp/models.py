"""Two ready-made applications: goodwill advertising and portfolio execution delay.

The advertising model maps exactly onto the generic control problem: the
pointwise drift terms are folded into the delay measures as atoms at zero,
so the drift is plain addition of its two contracted arguments and the
generic adjoint assembly reproduces the specialized adjoint equation term
by term (a test asserts the identity).

The portfolio model keeps the two-dimensional state (price S, wealth V) in
its natural split form: S is uncontrolled, so the price-component adjoint
system is homogeneous and identically zero, while the wealth-component
adjoint is a scalar windowed linear BSDE with the (random) rate process as
its drift coefficient.  The optimality pairing is derived by transposing
the wealth recursion, mirroring :mod:`delaysmp.smp`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bsde as bsde_mod
from .absde import AbsdeProblem
from .drivers import Driver
from .grids import TimeGrid
from .measures import RegularMeasure
from .sdde import ControlPath, DelayedCoefficient, TerminalCost, TrajectoryGrid
from .smp import ControlProblem


def _lipschitz_smooth(scale=1.0):
    """log-cosh terminal: smooth, slope bounded by ``scale``."""

    def value(y):
        return scale * np.logaddexp(y, -y) - scale * np.log(2.0)

    def dx(y):
        return scale * np.tanh(y)

    return value, dx


# --------------------------------------------------------------------------- #
# advertising


@dataclass
class AdvertisingModel:
    """Goodwill dynamics with delayed brand memory and delayed spend effect.

    dy = [a0 y + <y_t, mu_a> + b0 u + <u_t, mu_b>] dt + (sa y + sb u) dW.
    Defaults are desk-scale artifact choices, all overridable.
    """

    horizon: float = 1.0
    delay: float = 0.25
    a0: float = -0.5
    b0: float = 1.0
    sigma_a: float = 0.2
    sigma_b: float = 0.1
    mu_a: RegularMeasure | None = None
    mu_b: RegularMeasure | None = None
    mu_phi: RegularMeasure | None = None
    ell_q: float = 0.5   # running weights: ell = ell_q/2 y^2 + ell_r/2 u^2
    ell_r: float = 1.0
    phi_scale: float = 1.0
    phi_kind: str = "smooth"  # smooth | quadratic | linear
    y0: float = 1.0
    u0: float = 0.0
    control_box: tuple = (-5.0, 5.0)

    def _measures(self):
        d = self.delay
        mu_a = self.mu_a if self.mu_a is not None else RegularMeasure.zero(-d, 0.0)
        mu_b = self.mu_b if self.mu_b is not None else RegularMeasure.zero(-d, 0.0)
        mu_phi = (
            self.mu_phi
            if self.mu_phi is not None
            else RegularMeasure.dirac(0.0, -d, 0.0)
        )
        return mu_a, mu_b, mu_phi

    def terminal(self) -> TerminalCost:
        _, _, mu_phi = self._measures()
        if self.phi_kind == "quadratic":
            return TerminalCost.quadratic(mu_phi, self.phi_scale)
        if self.phi_kind == "linear":
            return TerminalCost.linear(mu_phi, self.phi_scale)
        value, dx = _lipschitz_smooth(self.phi_scale)
        return TerminalCost(value=value, dx=dx, measure=mu_phi)

    def problem(self, driver: Driver) -> ControlProblem:
        grid = driver.grid
        self._check_grid(grid)
        d = self.delay
        mu_a, mu_b, _ = self._measures()
        delta0 = RegularMeasure.dirac(0.0, -d, 0.0)
        drift = DelayedCoefficient(
            kind="advertising-drift",
            value=lambda t, x, u: x + u,
            dx=lambda t, x, u: np.ones(np.shape(x)),
            du=lambda t, x, u: np.ones(np.shape(u)),
            state_measure=self.a0 * delta0 + mu_a,
            control_measure=self.b0 * delta0 + mu_b,
            lipschitz=2.1,
        )
        diffusion = DelayedCoefficient.affine(
            self.sigma_a,
            self.sigma_b,
            state_measure=delta0,
            control_measure=delta0,
            kind="advertising-noise",
        )
        running = DelayedCoefficient.quadratic_cost(
            self.ell_q, self.ell_r, state_measure=delta0, control_measure=delta0
        )
        return ControlProblem(
            driver=driver,
            drift=drift,
            diffusion=diffusion,
            running=running,
            terminal=self.terminal(),
            x0_segment=np.full(grid.delay_steps + 1, self.y0),
            eta=np.full(grid.delay_steps, self.u0),
            control_box=self.control_box,
        )

    def _check_grid(self, grid: TimeGrid):
        if abs(grid.horizon - self.horizon) > 1e-12 or abs(
            grid.delay - self.delay
        ) > 1e-9:
            raise ValueError(
                f"grid (T={grid.horizon}, d={grid.delay}) does not match the "
                f"model (T={self.horizon}, d={self.delay})"
            )

    def hand_adjoint(self, driver, traj: TrajectoryGrid, ctrl: ControlPath,
                     **absde_kwargs) -> AbsdeProblem:
        """The specialized adjoint equation assembled term by term:
        running-cost slope source, a0 p(s) + anticipated p against mu_a,
        sigma_a q(s), and the terminal-slope window against mu_phi."""
        grid = driver.grid
        self._check_grid(grid)
        d = self.delay
        mu_a, _, mu_phi = self._measures()
        delta0 = RegularMeasure.dirac(0.0, -d, 0.0)
        ctrl_b = ctrl.broadcast(driver.n_samples)

        del ctrl_b  # ell depends on u only through ell_u, absent from the source
        n = grid.n_steps
        source = np.empty((n, driver.n_samples))
        for k in range(n):
            source[k] = self.ell_q * traj.at(k)  # d ell / d y at (y(s), u(s))
        p_terms = [(np.ones((n, driver.n_samples)), self.a0 * delta0 + mu_a)]
        q_terms = [(np.full((n, driver.n_samples), self.sigma_a), delta0)]
        wh = mu_phi.grid_weights(grid.delay_steps + 1, allow_coarse=True)
        hx = self.terminal().dx(wh @ traj.window_segment())
        xi = np.repeat(np.asarray(hx)[None, :], grid.delay_steps + 1, axis=0)
        return AbsdeProblem(
            driver=driver,
            f=source,
            p_terms=p_terms,
            q_terms=q_terms,
            xi=xi,
            window=mu_phi.translate(grid.horizon),
            **absde_kwargs,
        )


def advertising_problem(driver, **params) -> ControlProblem:
    return AdvertisingModel(**params).problem(driver)


# --------------------------------------------------------------------------- #
# portfolio with execution delay


@dataclass
class PriceCoefficient:
    """A price-functional coefficient (t, <S_t, mu>) -> value with slope."""

    value: callable
    dx: callable
    measure: RegularMeasure

    @classmethod
    def constant(cls, level, measure):
        return cls(
            value=lambda t, s: np.full(np.shape(s), float(level)),
            dx=lambda t, s: np.zeros(np.shape(s)),
            measure=measure,
        )

    @classmethod
    def affine(cls, base, slope, measure):
        return cls(
            value=lambda t, s: base + slope * np.asarray(s, dtype=float),
            dx=lambda t, s: np.full(np.shape(s), float(slope)),
            measure=measure,
        )


@dataclass
class PortfolioOutcome:
    price: TrajectoryGrid
    wealth: TrajectoryGrid
    rate: np.ndarray
    drift: np.ndarray
    vol: np.ndarray


@dataclass
class PortfolioModel:
    """One risky asset with delayed price functionals; investment acts with a
    pure execution lag d, consumption acts immediately.  The objective is to
    maximize E U(<V_T, mu_U>), run as minimization of its negative."""

    horizon: float = 1.0
    delay: float = 0.25
    rate: PriceCoefficient | None = None
    drift: PriceCoefficient | None = None
    vol: PriceCoefficient | None = None
    utility_scale: float = 1.0
    utility_kind: str = "linear"  # linear | smooth
    mu_utility: RegularMeasure | None = None
    s0: float = 1.0
    v0: float = 1.0
    pi0: float = 0.0
    pi_box: tuple = (0.0, 1.0)
    c_box: tuple = (0.0, 1.0)

    def __post_init__(self):
        d = self.delay
        delta0 = RegularMeasure.dirac(0.0, -d, 0.0)
        if self.rate is None:
            self.rate = PriceCoefficient.constant(0.05, delta0)
        if self.drift is None:
            self.drift = PriceCoefficient.constant(0.12, delta0)
        if self.vol is None:
            self.vol = PriceCoefficient.constant(0.3, delta0)
        if self.mu_utility is None:
            self.mu_utility = RegularMeasure.dirac(0.0, -d, 0.0)

    def utility(self) -> TerminalCost:
        if self.utility_kind == "linear":
            return TerminalCost.linear(self.mu_utility, self.utility_scale)
        value, dx = _lipschitz_smooth(self.utility_scale)
        return TerminalCost(value=value, dx=dx, measure=self.mu_utility)

    def _check_grid(self, grid: TimeGrid):
        if abs(grid.horizon - self.horizon) > 1e-12 or abs(
            grid.delay - self.delay
        ) > 1e-9:
            raise ValueError("grid does not match the model horizon/delay")

    def simulate(self, driver: Driver, pi: ControlPath, c: ControlPath):
        """Euler paths of price and wealth; also returns the realized
        coefficient processes (rate, drift, vol) along the price."""
        grid = driver.grid
        self._check_grid(grid)
        n, dd, m = grid.n_steps, grid.delay_steps, driver.n_samples
        pi_b, c_b = pi.broadcast(m), c.broadcast(m)
        w_r = self.rate.measure.grid_weights(dd + 1, allow_coarse=True)
        w_b = self.drift.measure.grid_weights(dd + 1, allow_coarse=True)
        w_s = self.vol.measure.grid_weights(dd + 1, allow_coarse=True)

        s_vals = np.empty((dd + n + 1, m))
        s_vals[: dd + 1] = self.s0
        price = TrajectoryGrid(grid, s_vals)
        v_vals = np.empty((dd + n + 1, m))
        v_vals[: dd + 1] = self.v0
        wealth = TrajectoryGrid(grid, v_vals)
        rate = np.empty((n, m))
        drift = np.empty((n, m))
        vol = np.empty((n, m))
        for k in range(n):
            t_k = grid.time(k)
            seg = price.segment(k)
            rate[k] = self.rate.value(t_k, w_r @ seg)
            drift[k] = self.drift.value(t_k, w_b @ seg)
            vol[k] = self.vol.value(t_k, w_s @ seg)
            s_k = price.at(k)
            s_vals[dd + k + 1] = s_k * (1.0 + drift[k] * grid.dt + vol[k] * driver.dw[k])
            lagged_pi = pi_b.segment(k)[0]  # pi(t - d)
            v_k = wealth.at(k)
            dv = (
                rate[k] * (v_k - lagged_pi) - c_b.values[k] + lagged_pi * drift[k]
            ) * grid.dt + lagged_pi * vol[k] * driver.dw[k]
            v_vals[dd + k + 1] = v_k + dv
        return PortfolioOutcome(price, wealth, rate, drift, vol)

    def utility_value(self, driver, outcome: PortfolioOutcome) -> float:
        w_u = self.mu_utility.grid_weights(
            driver.grid.delay_steps + 1, allow_coarse=True
        )
        util = self.utility().value(w_u @ outcome.wealth.window_segment())
        return float(driver.expectation(util))

    def price_adjoint_problem(self, driver, outcome, **absde_kwargs) -> AbsdeProblem:
        """The price-component adjoint system: homogeneous (no running or
        terminal source touches S), hence identically zero."""
        grid = driver.grid
        n, dd, m = grid.n_steps, grid.delay_steps, driver.n_samples
        d = self.delay
        delta0 = RegularMeasure.dirac(0.0, -d, 0.0)
        w_b = self.drift.measure.grid_weights(dd + 1, allow_coarse=True)
        w_s = self.vol.measure.grid_weights(dd + 1, allow_coarse=True)
        s_rows = np.stack([outcome.price.at(k) for k in range(n)])
        bx = np.empty((n, m))
        sx = np.empty((n, m))
        for k in range(n):
            seg = outcome.price.segment(k)
            bx[k] = self.drift.dx(grid.time(k), w_b @ seg)
            sx[k] = self.vol.dx(grid.time(k), w_s @ seg)
        p_terms = [
            (outcome.drift, delta0),
            (s_rows * bx, self.drift.measure),
        ]
        q_terms = [
            (outcome.vol, delta0),
            (s_rows * sx, self.vol.measure),
        ]
        zero_window = RegularMeasure.zero(grid.horizon - d, grid.horizon)
        return AbsdeProblem(
            driver=driver,
            f=np.zeros((n, m)),
            p_terms=p_terms,
            q_terms=q_terms,
            xi=np.zeros((dd + 1, m)),
            window=zero_window,
            **absde_kwargs,
        )

    def wealth_adjoint_problem(self, driver, outcome) -> bsde_mod.LinearBsdeProblem:
        """The wealth-component adjoint: a windowed linear BSDE whose drift
        coefficient is the realized rate process and whose window datum is
        the utility slope at the terminal wealth contraction."""
        grid = driver.grid
        dd = grid.delay_steps
        w_u = self.mu_utility.grid_weights(dd + 1, allow_coarse=True)
        ux = self.utility().dx(w_u @ outcome.wealth.window_segment())
        xi = np.repeat(np.asarray(ux)[None, :], dd + 1, axis=0)
        return bsde_mod.LinearBsdeProblem(
            driver=driver,
            f=0.0,
            g=outcome.rate,
            h=0.0,
            xi=xi,
            window=self.mu_utility.translate(grid.horizon),
        )

    def optimality_residuals(self, driver, outcome, pair, pi, c,
                             comparison_pi, comparison_c):
        """Residuals of the minimize(-U) problem for both control components.

        Transposing the wealth recursion: a consumption perturbation at step
        m pairs with +E[p_{m+1} | F_m]; an investment perturbation at step m
        acts at step m+d and pairs with -((drift - rate) p^ + vol q) there,
        dropped beyond the horizon.
        """
        grid = driver.grid
        n, dd, m = grid.n_steps, grid.delay_steps, driver.n_samples
        p_hat = np.stack(
            [driver.cond_expect(pair.p[k + 1], k) for k in range(n)]
        )
        res_c = np.zeros((n, m))
        res_pi = np.zeros((n, m))
        pi_b, c_b = pi.broadcast(m), c.broadcast(m)
        vbar_c = np.broadcast_to(
            np.asarray(comparison_c, dtype=float).reshape(n, -1), (n, m)
        ) - c_b.values
        vbar_pi = np.broadcast_to(
            np.asarray(comparison_pi, dtype=float).reshape(n, -1), (n, m)
        ) - pi_b.values
        for mm in range(n):
            res_c[mm] = vbar_c[mm] * p_hat[mm]
            k = mm + dd
            if k <= n - 1:
                gain = (outcome.drift[k] - outcome.rate[k]) * p_hat[k] + outcome.vol[
                    k
                ] * pair.q[k]
                res_pi[mm] = -vbar_pi[mm] * driver.cond_expect(gain, mm)
        return res_c, res_pi


def portfolio_problem(**params) -> PortfolioModel:
    return PortfolioModel(**params)
