"""Anticipated backward SDEs with both anticipated integrands and a terminal window.

The equation couples the unknown pair (p, q) to its own future values,

    p(t) = int_t^T f ds
         + int_t^T E^{F_s} int_{-d}^0 g(s - th) p(s - th) mu_1(d th) ds
         + int_t^T E^{F_s} int_{-d}^0 q(s - th) h(s - th) mu_2(d th) ds
         + int_t^T q dW + int_{[t v (T-d), T]} xi(s) mu(ds),

with p, q prescribed (zero by default) on (T, T + d].  Discretely the
anticipated integrals become weighted sums over sample offsets of the delay
measures; the p-integrand is sampled one step after the shifted time and the
q-integrand at the shifted time, which is exactly the convention under which
the discrete solution is the transpose of the forward first-variation
recursion (see ``smp``), so adjoint/duality identities hold to rounding.

Three solution paths are provided and cross-checked: Picard iteration of the
one-step-solving map (the production path), a dense assembly of the full
linear system over all lattice node values (the oracle), and a
measure-mollification study that replaces the window measure by absolutely
continuous approximations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import bsde
from .bsde import AdaptedPair, LinearBsdeProblem, as_process
from .drivers import BinaryLattice, Driver
from .grids import TimeGrid
from .measures import DEFAULT_MOLLIFY_CELLS, RegularMeasure

DIRECT_SOLVE_CAP = 12


class ConvergenceError(RuntimeError):
    """Picard iteration failed to converge within max_iter."""


def delay_weights(measure: RegularMeasure, grid: TimeGrid):
    """Sample weights of a delay measure on [-d, 0] over the D+1 grid offsets.

    Entry r weighs the sample at lag theta = -d + r dt, i.e. time offset
    D - r ahead when the kernel is applied in anticipating direction.
    """
    if abs(measure.a + grid.delay) > 1e-9 or abs(measure.b) > 1e-9:
        raise ValueError(
            f"delay measure lives on [{measure.a}, {measure.b}], "
            f"expected [{-grid.delay}, 0]"
        )
    return measure.grid_weights(grid.delay_steps + 1, allow_coarse=True)


@dataclass
class AbsdeProblem:
    """Data of the anticipated equation on a driver's grid.

    ``p_terms`` and ``q_terms`` are lists of (coefficient process, delay
    measure) pairs; coefficients are defined per step (rows up to N + D - 1,
    shorter inputs are zero-padded, scalars broadcast).  ``ext_p`` and
    ``ext_q`` optionally prescribe the pair on (T, T + d] (zero by default).
    """

    driver: Driver
    f: np.ndarray
    p_terms: list
    q_terms: list
    xi: np.ndarray
    window: RegularMeasure
    ext_p: np.ndarray | None = None
    ext_q: np.ndarray | None = None
    beta: float | None = None
    tol: float | None = None
    max_iter: int = 50

    def __post_init__(self):
        grid = self.driver.grid
        n, dd, m = grid.n_steps, grid.delay_steps, self.driver.n_samples
        self.f = as_process(self.f, n, m, "f")
        self.xi = as_process(self.xi, dd + 1, m, "xi")
        self.p_norm = [self._norm_term(t, "p_term") for t in self.p_terms]
        self.q_norm = [self._norm_term(t, "q_term") for t in self.q_terms]
        self.ext_p = (
            np.zeros((dd, m)) if self.ext_p is None
            else as_process(self.ext_p, dd, m, "ext_p")
        )
        self.ext_q = (
            np.zeros((dd, m)) if self.ext_q is None
            else as_process(self.ext_q, dd, m, "ext_q")
        )
        self.charges = bsde.window_charges(self.window, grid)
        if self.tol is None:
            self.tol = 1e-12 if self.driver.is_exact else 1e-6

    def _norm_term(self, term, name):
        coeff, measure = term
        grid = self.driver.grid
        rows = grid.n_steps + grid.delay_steps
        m = self.driver.n_samples
        arr = np.asarray(coeff, dtype=float)
        if arr.ndim == 0:
            padded = np.zeros((rows, m))
            padded[: grid.n_steps] = float(arr)
        else:
            if arr.ndim == 1:
                arr = np.repeat(arr[:, None], m, axis=1)
            padded = np.zeros((rows, m))
            padded[: arr.shape[0]] = arr
        return padded, delay_weights(measure, grid)

    @property
    def grid(self) -> TimeGrid:
        return self.driver.grid

    def contraction_constant(self) -> float:
        """sum of sup|coefficient| * sum|sample weights| over all terms."""
        k = 0.0
        for coeff, w in self.p_norm + self.q_norm:
            k += float(np.max(np.abs(coeff))) * float(np.sum(np.abs(w)))
        return k

    def theoretical_ratio(self, beta) -> float:
        """Certified bound on the Picard contraction factor in the beta norm.

        Discrete derivation: the map's increment obeys
        ||out||^2 <= (T+1) g(beta) K ( Kp(beta) ||y||^2 + Kq(beta) ||z||^2 )
        with g = dt / (1 - e^{-beta dt}), K the total coupling mass, and
        Kp, Kq the per-term masses damped by e^{-beta dt shift} for the time
        shift each sample weight reaches forward.  The p-integrand is read
        one step ahead, so every p-term decays with beta; a q-term keeps an
        undamped part only where its measure charges lag zero.
        """
        dd = self.grid.delay_steps
        dt = self.grid.dt
        gain = dt / -np.expm1(-beta * dt)
        shifts = dd - np.arange(dd + 1)  # per sample index r
        kp = sum(
            float(np.max(np.abs(c))) * float(
                np.sum(np.abs(w) * np.exp(-beta * dt * (shifts + 1)))
            )
            for c, w in self.p_norm
        )
        kq = sum(
            float(np.max(np.abs(c))) * float(
                np.sum(np.abs(w) * np.exp(-beta * dt * shifts))
            )
            for c, w in self.q_norm
        )
        return float(
            self.contraction_constant()
            * max(kp, kq)
            * (self.grid.horizon + 1.0)
            * gain
        )

    def default_beta(self) -> float:
        k = self.contraction_constant()
        beta = max(1.0, 4.0 * k**2 * (self.grid.horizon + 1.0))
        best = beta
        for _ in range(60):
            ratio = self.theoretical_ratio(beta)
            if ratio <= 0.25:
                return beta
            if self.theoretical_ratio(2 * beta) > 0.995 * ratio:
                break  # hit the undamped floor; take it if it contracts at all
            beta *= 2.0
            best = beta
        floor = self.theoretical_ratio(best)
        if floor < 0.9:
            return best
        raise ConvergenceError(
            "no beta certifies contraction: the grid is too coarse for the "
            f"anticipated-term constant K={k:.3g} (certified ratio floor "
            f"{floor:.3g})"
        )


def _with_extension(pair: AdaptedPair, prob: AbsdeProblem) -> AdaptedPair:
    n, dd = prob.grid.n_steps, prob.grid.delay_steps
    if dd:
        pair.p[n + 1:] = prob.ext_p
        pair.q[n: n + dd] = prob.ext_q
    return pair


def anticipated_source(pair: AdaptedPair, prob: AbsdeProblem):
    """Per-step source a_j = E^{F_j}[ sum_r w_r ( g p )(j + D - r + 1) + ... ].

    The p-coefficient at shifted step k multiplies p at step k + 1, the
    q-coefficient multiplies q at step k; values beyond the horizon come
    from the pair's extension rows (zero unless prescribed).
    """
    grid = prob.grid
    n, dd = grid.n_steps, grid.delay_steps
    drv = prob.driver
    raw = np.zeros((n, drv.n_samples))
    for j in range(n):
        acc = raw[j]
        for coeff, w in prob.p_norm:
            for r in range(dd + 1):
                if w[r] == 0.0:
                    continue
                k = j + dd - r
                if k + 1 <= grid.ext_steps:
                    acc += w[r] * coeff[k] * pair.p[k + 1]
        for coeff, w in prob.q_norm:
            for r in range(dd + 1):
                if w[r] == 0.0:
                    continue
                k = j + dd - r
                if k <= grid.ext_steps:
                    acc += w[r] * coeff[k] * pair.q[k]
    return np.stack([drv.cond_expect(raw[j], j) for j in range(n)])


def gamma_step(pair: AdaptedPair, prob: AbsdeProblem) -> AdaptedPair:
    """One application of the fixed-point map: freeze the anticipated terms
    at the input pair and solve the resulting windowed linear BSDE."""
    source = anticipated_source(pair, prob)
    inner = LinearBsdeProblem(
        driver=prob.driver,
        f=prob.f + source,
        g=0.0,
        h=0.0,
        xi=prob.xi,
        window=prob.window,
    )
    return _with_extension(bsde.solve_recursion(inner), prob)


@dataclass
class PicardTrace:
    beta: float
    theoretical_ratio: float
    tol: float
    increments: list = field(default_factory=list)
    beta_increments: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def ratios(self):
        b = self.beta_increments
        return [
            b[i] / b[i - 1]
            for i in range(1, len(b))
            if b[i - 1] > 1e-300
        ]

    @property
    def observed_ratio(self):
        r = self.ratios
        return max(r) if r else 0.0


def beta_norm(pair: AdaptedPair, beta, *, driver: Driver, normalized=False):
    """Grid quadrature of E int_0^{T+d} (|p|^2 + |q|^2) e^{beta s} ds.

    With ``normalized`` the weights are rescaled by e^{-beta (T+d)} so the
    largest weight is one; this equivalent norm is what the Picard trace
    records, keeping large beta values representable.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    grid = pair.grid
    e = grid.ext_steps
    t = grid.time(np.arange(e))
    shift = grid.horizon + grid.delay if normalized else 0.0
    wts = np.exp(beta * (t - shift)) * grid.dt
    total = 0.0
    for j in range(e):
        total += wts[j] * (
            driver.expectation(pair.p[j] ** 2) + driver.expectation(pair.q[j] ** 2)
        )
    return float(total)


def picard_solve(prob: AbsdeProblem):
    """Iterate the fixed-point map from zero until the sup-norm increment
    falls below tol.  Returns the pair and the iteration trace.

    Geometric convergence is certified by choosing beta so the weighted-norm
    contraction bound is at most 1/4 (starting from 4 K^2 (T+1), doubling as
    needed); the trace records the weighted increments so the observed ratio
    can be compared against the bound.
    """
    beta = prob.beta if prob.beta is not None else prob.default_beta()
    trace = PicardTrace(
        beta=beta, theoretical_ratio=prob.theoretical_ratio(beta), tol=prob.tol
    )
    current = _with_extension(AdaptedPair.zeros(prob.grid, prob.driver.n_samples), prob)
    for it in range(1, prob.max_iter + 1):
        nxt = gamma_step(current, prob)
        diff = AdaptedPair(prob.grid, nxt.p - current.p, nxt.q - current.q)
        inc = nxt.sup_diff(current)
        trace.increments.append(inc)
        trace.beta_increments.append(
            beta_norm(diff, beta, driver=prob.driver, normalized=True)
        )
        trace.iterations = it
        current = nxt
        if inc < prob.tol:
            trace.converged = True
            return current, trace
    raise ConvergenceError(
        f"no convergence in {prob.max_iter} iterations; "
        f"last increment {trace.increments[-1]:.3e}, "
        f"observed ratio {trace.observed_ratio:.3f}"
    )


# --------------------------------------------------------------------------- #
# dense oracle


def direct_solve(prob: AbsdeProblem) -> AdaptedPair:
    """Assemble the discrete equations over all lattice node values and solve
    the sparse linear system directly.  Oracle-scale only (depth cap 12).
    """
    drv = prob.driver
    if not isinstance(drv, BinaryLattice):
        raise ValueError("direct_solve requires the lattice driver")
    grid = prob.grid
    n, dd = grid.n_steps, grid.delay_steps
    if n > DIRECT_SOLVE_CAP:
        raise ValueError(f"direct_solve capped at {DIRECT_SOLVE_CAP} steps, got {n}")
    dt = grid.dt
    m = drv.n_samples

    p_off = np.zeros(n + 2, dtype=int)
    p_off[1:] = np.cumsum([1 << k for k in range(n + 1)])
    q_off = p_off[n + 1] + np.concatenate(
        [[0], np.cumsum([1 << k for k in range(n)])]
    )
    size = int(q_off[-1])

    def cellmean(values, step):
        return np.asarray(values, dtype=float).reshape(1 << step, -1).mean(axis=1)

    rows, cols, vals = [], [], []
    rhs = np.zeros(size)

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # terminal condition p_N = w_D xi_N (per path)
    for c in range(1 << n):
        r = p_off[n] + c
        add(r, r, 1.0)
        rhs[r] = prob.charges[-1] * prob.xi[-1][c]

    for j in range(n):
        cells_j = 1 << j
        f_cell = cellmean(prob.f[j], j)
        xi_cell = None
        if j >= grid.window_start:
            xi_cell = cellmean(prob.xi[j - grid.window_start], j)
        for c in range(cells_j):
            r = p_off[j] + c
            add(r, r, 1.0)
            # E[p_{j+1} | F_j]: average of the two children
            add(r, p_off[j + 1] + 2 * c, -0.5)
            add(r, p_off[j + 1] + 2 * c + 1, -0.5)
            rhs[r] = dt * f_cell[c]
            if xi_cell is not None:
                rhs[r] += prob.charges[j - grid.window_start] * xi_cell[c]
        # anticipated couplings
        for coeff, w in prob.p_norm:
            for r_off in range(dd + 1):
                if w[r_off] == 0.0:
                    continue
                k = j + dd - r_off
                if k + 1 <= n:
                    cm = cellmean(coeff[k], k + 1)
                    span = 1 << (k + 1 - j)
                    for c in range(cells_j):
                        r = p_off[j] + c
                        for child in range(span):
                            cc = c * span + child
                            add(r, p_off[k + 1] + cc,
                                -dt * w[r_off] * cm[cc] / span)
                else:
                    ext = prob.ext_p[k - n] if k >= n else None
                    if ext is not None:
                        contrib = cellmean(coeff[k] * ext, j)
                        rhs[p_off[j]: p_off[j] + cells_j] += dt * w[r_off] * contrib
        for coeff, w in prob.q_norm:
            for r_off in range(dd + 1):
                if w[r_off] == 0.0:
                    continue
                k = j + dd - r_off
                if k <= n - 1:
                    cm = cellmean(coeff[k], k)
                    span = 1 << (k - j)
                    for c in range(cells_j):
                        r = p_off[j] + c
                        for child in range(span):
                            cc = c * span + child
                            add(r, q_off[k] + cc,
                                -dt * w[r_off] * cm[cc] / span)
                else:
                    ext = prob.ext_q[k - n]
                    contrib = cellmean(coeff[k] * ext, j)
                    rhs[p_off[j]: p_off[j] + cells_j] += dt * w[r_off] * contrib
        # martingale-part definition of q_j
        sq = np.sqrt(dt)
        for c in range(cells_j):
            r = q_off[j] + c
            add(r, r, dt)
            add(r, p_off[j + 1] + 2 * c, -0.5 * sq)
            add(r, p_off[j + 1] + 2 * c + 1, 0.5 * sq)

    mat = scipy.sparse.coo_matrix(
        (vals, (rows, cols)), shape=(size, size)
    ).tocsr()
    try:
        sol = scipy.sparse.linalg.spsolve(mat, rhs)
    except Exception as exc:  # singular system
        raise RuntimeError(f"direct solve failed: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise RuntimeError("direct solve produced non-finite values (singular system?)")

    pair = AdaptedPair.zeros(grid, m)
    for k in range(n + 1):
        block = 1 << (n - k)
        pair.p[k] = np.repeat(sol[p_off[k]: p_off[k] + (1 << k)], block)
    for k in range(n):
        block = 1 << (n - k)
        pair.q[k] = np.repeat(sol[q_off[k]: q_off[k] + (1 << k)], block)
    return _with_extension(pair, prob)


# --------------------------------------------------------------------------- #
# measure approximation and differential form


@dataclass
class ApproxRow:
    n: int
    err_p: float
    err_q: float

    @property
    def err(self) -> float:
        return float(np.hypot(self.err_p, self.err_q))


def solve_with_measure_approx(prob: AbsdeProblem, ns, cells=DEFAULT_MOLLIFY_CELLS):
    """Replace the window measure by mollified approximations and report the
    weighted L2 distance of each approximate solution to the exact one.

    The terminal atom is split off first and re-added unchanged, so only the
    interior part of the window is smoothed.
    """
    grid = prob.grid
    base, _ = picard_solve(prob)
    rest, atom = prob.window.split_terminal_atom()
    rows = []
    for n_apx in ns:
        smooth = rest.mollify(int(n_apx), cells=cells)
        window_n = smooth + RegularMeasure.dirac(
            prob.window.b, prob.window.a, prob.window.b, atom
        )
        sol, _ = picard_solve(replace(prob, window=window_n))
        dp2 = dq2 = 0.0
        for j in range(grid.ext_steps + 1):
            dp2 += grid.dt * prob.driver.expectation((sol.p[j] - base.p[j]) ** 2)
            dq2 += grid.dt * prob.driver.expectation((sol.q[j] - base.q[j]) ** 2)
        rows.append(ApproxRow(int(n_apx), float(np.sqrt(dp2)), float(np.sqrt(dq2))))
    return rows


@dataclass
class DifferentialFormReport:
    terminal_residual: float
    step_residuals: np.ndarray

    @property
    def max_residual(self) -> float:
        mx = float(np.max(self.step_residuals)) if self.step_residuals.size else 0.0
        return max(self.terminal_residual, mx)


def differential_form_check(prob: AbsdeProblem, pair: AdaptedPair | None = None):
    """For a window measure of the form c delta_T + density, check the solved
    pair against the differential-form one-step identity whose window source
    is xi(t) times the density value, and whose terminal value is c xi(T).

    Interior atoms are rejected: no density represents them, so the
    differential form is undefined for such measures.
    """
    w = prob.window
    interior = np.abs(w.atom_locations - w.b) > 1e-12
    if np.any(interior):
        raise ValueError(
            f"window measure has interior atoms at {w.atom_locations[interior]}; "
            "the differential form is undefined"
        )
    if pair is None:
        pair, _ = picard_solve(prob)
    grid = prob.grid
    drv = prob.driver
    n, ws, dt = grid.n_steps, grid.window_start, grid.dt
    _, c_atom = w.split_terminal_atom()
    term = float(np.max(np.abs(pair.p[n] - c_atom * prob.xi[-1])))

    source = anticipated_source(pair, prob)
    res = []
    for j in range(ws, n):
        t_j = grid.time(j)
        eta = 0.0
        if w.density is not None:
            cell = min(int((t_j - w.a) / (w.width / w.n_cells)), w.n_cells - 1)
            eta = float(w.density[cell])
        lhs = pair.p[j] - drv.cond_expect(pair.p[j + 1], j)
        rhs = dt * (prob.f[j] + source[j]) + eta * dt * drv.cond_expect(
            prob.xi[j - ws], j
        )
        res.append(float(np.max(np.abs(lhs - rhs))))
    return DifferentialFormReport(term, np.asarray(res))


def anticipated_q_bound(prob: AbsdeProblem, pair: AdaptedPair):
    """Both sides of the well-posedness bound for the anticipated q term:
    the weighted shifted-q mass is at most |mu_2| ||h||^2 E int |q|^2."""
    grid = prob.grid
    lhs = 0.0
    rhs = 0.0
    q_l2 = sum(
        grid.dt * prob.driver.expectation(pair.q[j] ** 2)
        for j in range(grid.ext_steps + 1)
    )
    for coeff, w in prob.q_norm:
        sup = float(np.max(np.abs(coeff)))
        wsum = float(np.sum(np.abs(w)))
        rhs += wsum * sup**2 * q_l2
        for j in range(grid.n_steps):
            for r in range(grid.delay_steps + 1):
                k = j + grid.delay_steps - r
                if k <= grid.ext_steps:
                    lhs += (
                        grid.dt
                        * abs(w[r])
                        * prob.driver.expectation((coeff[k] * pair.q[k]) ** 2)
                    )
    return lhs, rhs
