"""Brownian drivers: an exact binary lattice and a regression Monte Carlo backend.

Both drivers expose the same surface: per-path increments ``dw`` of shape
(n_steps, n_samples), conditional expectations at a grid step, and the
martingale part of a one-step transition.  Delay functionals are path
dependent, so the lattice is non-recombining: sample j at full depth is the
path whose k-th increment sign is bit (N-1-k) of j.  Paths sharing their
first k increments then form contiguous blocks of size 2^(N-k), which makes
conditional expectations exact block means.

All reductions are fixed-order (numpy pairwise summation over a single
array), so results do not depend on any worker count.
"""

from __future__ import annotations

import numpy as np

from .grids import TimeGrid

LATTICE_DEPTH_CAP = 18


class DriverError(ValueError):
    """Raised for driver misuse (depth caps, non-adapted input, ...)."""


class GirsanovPositivityError(ValueError):
    """Discrete change-of-measure density would turn non-positive."""


class Driver:
    """Shared surface of the lattice and Monte Carlo drivers."""

    grid: TimeGrid
    dw: np.ndarray  # (n_steps, n_samples)
    n_samples: int
    is_exact: bool

    @property
    def dt(self) -> float:
        return self.grid.dt

    def brownian(self):
        """W on the grid, shape (n_steps + 1, n_samples), W_0 = 0."""
        w = np.zeros((self.grid.n_steps + 1, self.n_samples))
        np.cumsum(self.dw, axis=0, out=w[1:])
        return w

    def expectation(self, values) -> float:
        return float(np.mean(np.asarray(values, dtype=float)))

    def cond_expect(self, values, step):
        raise NotImplementedError

    def martingale_part(self, p_next, step):
        """q with p_next = E[p_next | F_step] + q dW_step (+ mean-zero rest).

        On the lattice the reconstruction is exact.  q is returned as the
        two-point (or regression) coefficient E[p_next dW | F_step] / dt.
        """
        return self.cond_expect(np.asarray(p_next) * self.dw[step], step) / self.dt


class BinaryLattice(Driver):
    """Non-recombining +/- sqrt(dt) tree with exact conditional expectations."""

    is_exact = True

    def __init__(self, grid: TimeGrid, depth_cap: int = LATTICE_DEPTH_CAP):
        if grid.n_steps > depth_cap:
            raise DriverError(
                f"lattice depth {grid.n_steps} exceeds cap {depth_cap}; "
                "use the Monte Carlo driver for finer grids"
            )
        self.grid = grid
        n = grid.n_steps
        self.n_samples = 1 << n
        paths = np.arange(self.n_samples)
        sqdt = np.sqrt(grid.dt)
        # bit (n-1-k) of the path index gives the sign of increment k
        bits = (paths[None, :] >> (n - 1 - np.arange(n)[:, None])) & 1
        self.dw = np.where(bits == 0, sqdt, -sqdt)

    def cond_expect(self, values, step):
        """Exact E[values | F_step], returned per path (constant on blocks)."""
        n = self.grid.n_steps
        if not 0 <= step <= n:
            raise DriverError(f"step {step} outside [0, {n}]")
        x = np.asarray(values, dtype=float)
        if x.shape != (self.n_samples,):
            raise DriverError(f"expected {self.n_samples} per-path values")
        if step == n:
            return x.copy()
        block = 1 << (n - step)
        means = x.reshape(-1, block).mean(axis=1)
        return np.repeat(means, block)

    def cell_values(self, values, step):
        """One value per F_step cell (2^step of them); input must be adapted."""
        if not self.is_adapted(values, step):
            raise DriverError(f"values are not adapted at step {step}")
        block = 1 << (self.grid.n_steps - step)
        return np.asarray(values, dtype=float).reshape(-1, block)[:, 0]

    def is_adapted(self, values, step, tol=1e-10):
        x = np.asarray(values, dtype=float)
        return bool(np.max(np.abs(x - self.cond_expect(x, step))) <= tol)


class MonteCarloDriver(Driver):
    """Gaussian increments with least-squares conditional expectations.

    Conditional expectations project on polynomial features of the
    registered per-step regressors (the Brownian value by default; solvers
    register their own state processes with :meth:`add_regressor`).
    """

    is_exact = False

    def __init__(self, grid: TimeGrid, n_paths, seed=0, basis_degree=2):
        if n_paths < 2:
            raise DriverError("need at least two paths")
        self.grid = grid
        self.n_samples = int(n_paths)
        self.seed = int(seed)
        self.basis_degree = int(basis_degree)
        rng = np.random.default_rng(self.seed)
        self.dw = rng.standard_normal((grid.n_steps, self.n_samples)) * np.sqrt(
            grid.dt
        )
        self._regressors = {"w": self.brownian()}

    def add_regressor(self, name, values):
        """Register an adapted process (n_steps + 1, n_paths) as a regressor."""
        values = np.asarray(values, dtype=float)
        expected = (self.grid.n_steps + 1, self.n_samples)
        if values.shape != expected:
            raise DriverError(f"regressor shape {values.shape} != {expected}")
        self._regressors[name] = values

    def drop_regressor(self, name):
        self._regressors.pop(name, None)

    def _features(self, step):
        cols = [np.ones(self.n_samples)]
        raw = [vals[step] for vals in self._regressors.values()]
        for z in raw:
            for deg in range(1, self.basis_degree + 1):
                cols.append(z**deg)
        if self.basis_degree >= 2:
            for i in range(len(raw)):
                for j in range(i + 1, len(raw)):
                    cols.append(raw[i] * raw[j])
        return np.column_stack(cols)

    def cond_expect(self, values, step):
        n = self.grid.n_steps
        if not 0 <= step <= n:
            raise DriverError(f"step {step} outside [0, {n}]")
        x = np.asarray(values, dtype=float)
        if x.shape != (self.n_samples,):
            raise DriverError(f"expected {self.n_samples} per-path values")
        if step == n:
            return x.copy()
        if step == 0:
            return np.full(self.n_samples, x.mean())
        basis = self._features(step)
        coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
        return basis @ coef


def girsanov_weights(h, driver: Driver):
    """Multiplicative density Z_{k+1} = Z_k (1 - h_k dW_k), Z_0 = 1.

    ``h`` is adapted of shape (n_steps, n_samples).  Under the reweighted
    measure, W + integral(h dt) is a driftless walk; on the lattice every
    Z_k has unit mean exactly.  Raises if any one-step factor is
    non-positive.
    """
    h = np.asarray(h, dtype=float)
    n = driver.grid.n_steps
    if h.shape != (n, driver.n_samples):
        raise DriverError(f"h must have shape {(n, driver.n_samples)}")
    factors = 1.0 - h * driver.dw
    if np.any(factors <= 0.0):
        step, path = np.unravel_index(int(np.argmin(factors)), factors.shape)
        raise GirsanovPositivityError(
            f"density factor {factors[step, path]:.3e} <= 0 at step {step}, "
            f"sample {path}: |h| sqrt(dt) must stay below 1 "
            "(refine the grid or shrink h)"
        )
    z = np.ones((n + 1, driver.n_samples))
    np.cumprod(factors, axis=0, out=z[1:])
    return z


def reweighted_cond_expect(driver: Driver, z, values, at_step, value_step=None):
    """E_Q[values | F_at_step] = E[Z_s values | F_t] / Z_t for the density z."""
    if value_step is None:
        value_step = driver.grid.n_steps
    num = driver.cond_expect(np.asarray(values) * z[value_step], at_step)
    return num / z[at_step]
