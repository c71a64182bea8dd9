import numpy as np
import pytest

from delaysmp import absde, bsde
from delaysmp.absde import AbsdeProblem, beta_norm, picard_solve, direct_solve
from delaysmp.bsde import AdaptedPair, LinearBsdeProblem
from delaysmp.drivers import BinaryLattice
from delaysmp.grids import TimeGrid
from delaysmp.measures import RegularMeasure

from conftest import random_delay_measure, random_window_measure


def random_absde(driver, rng, q_coupling=True):
    grid = driver.grid
    d = grid.delay
    w = driver.brownian()
    f = rng.uniform(-0.5, 0.8) + 0.5 * np.sin(w[: grid.n_steps])
    xi = 1.0 + 0.4 * np.cos(w[grid.window_start:])
    window = random_window_measure(rng, grid.horizon - d, grid.horizon)
    p_terms = [(0.5 * np.tanh(w[: grid.n_steps]) + 0.3,
                random_delay_measure(rng, d))]
    q_terms = []
    if q_coupling:
        q_terms = [(0.4 * np.cos(w[: grid.n_steps]),
                    random_delay_measure(rng, d, with_density=False))]
    return AbsdeProblem(driver=driver, f=f, p_terms=p_terms, q_terms=q_terms,
                        xi=xi, window=window)


def zero_problem(driver):
    grid = driver.grid
    return AbsdeProblem(
        driver=driver, f=0.0, p_terms=[], q_terms=[], xi=0.0,
        window=RegularMeasure.zero(grid.horizon - grid.delay, grid.horizon),
    )


class TestBetaNorm:
    def test_zero_pair(self, lattice8, grid8):
        pair = AdaptedPair.zeros(grid8, lattice8.n_samples)
        assert beta_norm(pair, 3.0, driver=lattice8) == 0.0

    def test_small_beta_matches_plain_l2(self, lattice8, grid8):
        rng = np.random.default_rng(0)
        pair = AdaptedPair.zeros(grid8, lattice8.n_samples)
        pair.p[:] = rng.standard_normal(pair.p.shape)
        pair.q[:] = rng.standard_normal(pair.q.shape)
        plain = sum(
            grid8.dt * lattice8.expectation(pair.p[j] ** 2)
            + grid8.dt * lattice8.expectation(pair.q[j] ** 2)
            for j in range(grid8.ext_steps)
        )
        assert beta_norm(pair, 1e-12, driver=lattice8) == pytest.approx(
            plain, rel=1e-9
        )

    def test_quadratic_scaling(self, lattice8, grid8):
        rng = np.random.default_rng(1)
        pair = AdaptedPair.zeros(grid8, lattice8.n_samples)
        pair.p[:] = rng.standard_normal(pair.p.shape)
        scaled = AdaptedPair(grid8, 3.0 * pair.p, 3.0 * pair.q)
        assert beta_norm(scaled, 2.0, driver=lattice8) == pytest.approx(
            9.0 * beta_norm(pair, 2.0, driver=lattice8), rel=1e-12
        )

    def test_rejects_nonpositive_beta(self, lattice8, grid8):
        with pytest.raises(ValueError):
            beta_norm(AdaptedPair.zeros(grid8, lattice8.n_samples), 0.0,
                      driver=lattice8)


class TestGammaStep:
    def test_zero_everything(self, lattice8):
        prob = zero_problem(lattice8)
        pair = absde.gamma_step(
            AdaptedPair.zeros(prob.grid, lattice8.n_samples), prob
        )
        assert np.max(np.abs(pair.p)) == 0.0
        assert np.max(np.abs(pair.q)) == 0.0

    def test_no_anticipation_ignores_input(self, lattice8):
        rng = np.random.default_rng(2)
        grid = lattice8.grid
        prob = AbsdeProblem(
            driver=lattice8, f=0.7, p_terms=[], q_terms=[], xi=1.0,
            window=RegularMeasure.dirac(1.0, grid.horizon - grid.delay, 1.0),
        )
        zero_in = AdaptedPair.zeros(grid, lattice8.n_samples)
        rand_in = AdaptedPair.zeros(grid, lattice8.n_samples)
        rand_in.p[:] = rng.standard_normal(rand_in.p.shape)
        rand_in.q[:] = rng.standard_normal(rand_in.q.shape)
        a = absde.gamma_step(zero_in, prob)
        b = absde.gamma_step(rand_in, prob)
        assert a.sup_diff(b) == 0.0

    def test_delta0_collapse_matches_local_bsde_asymptotically(self):
        # mu_1 = mu_2 = delta_0 collapses the anticipated terms to local
        # g p / h q couplings; the fixed point then solves the windowed
        # linear BSDE up to the implicit-vs-post-step O(dt) difference
        gamma_g, gamma_h = 0.5, 0.4
        errs = []
        for n in (8, 12, 16):
            grid = TimeGrid(1.0, n, 2)
            drv = BinaryLattice(grid)
            d0 = RegularMeasure.dirac(0.0, -grid.delay, 0.0)
            win = RegularMeasure.dirac(1.0, grid.horizon - grid.delay, 1.0)
            aprob = AbsdeProblem(driver=drv, f=0.3, p_terms=[(gamma_g, d0)],
                                 q_terms=[(gamma_h, d0)], xi=1.5, window=win)
            apair, _ = picard_solve(aprob)
            bprob = LinearBsdeProblem(driver=drv, f=0.3, g=gamma_g, h=gamma_h,
                                      xi=1.5, window=win)
            bpair = bsde.solve_recursion(bprob)
            errs.append(apair.sup_diff(bpair))
        assert errs[2] < errs[0]
        assert errs[2] < 1.5 * errs[1] * (12 / 16)  # roughly first order
        assert errs[0] < 0.2


class TestPicard:
    def test_zero_data_one_iteration(self, lattice8):
        pair, trace = picard_solve(zero_problem(lattice8))
        assert trace.iterations == 1
        assert trace.converged
        assert np.max(np.abs(pair.p)) == 0.0

    def test_no_anticipation_two_iterations(self, lattice8):
        grid = lattice8.grid
        prob = AbsdeProblem(
            driver=lattice8, f=0.7, p_terms=[], q_terms=[], xi=1.0,
            window=RegularMeasure.dirac(1.0, grid.horizon - grid.delay, 1.0),
        )
        pair, trace = picard_solve(prob)
        assert trace.iterations == 2
        assert trace.converged

    def test_generic_matches_direct(self, lattice8):
        rng = np.random.default_rng(3)
        prob = random_absde(lattice8, rng)
        pair, trace = picard_solve(prob)
        oracle = direct_solve(prob)
        assert pair.sup_diff(oracle) < 1e-10
        assert trace.observed_ratio <= 1.05 * trace.theoretical_ratio

    def test_zero_extension_enforced(self, lattice8):
        rng = np.random.default_rng(4)
        prob = random_absde(lattice8, rng)
        pair, _ = picard_solve(prob)
        n = lattice8.grid.n_steps
        assert np.max(np.abs(pair.p[n + 1:])) == 0.0
        assert np.max(np.abs(pair.q[n:])) == 0.0

    def test_prescribed_extension(self, lattice8):
        rng = np.random.default_rng(5)
        base = random_absde(lattice8, rng)
        ext_p = 0.5 * np.ones((lattice8.grid.delay_steps, lattice8.n_samples))
        prob = AbsdeProblem(
            driver=lattice8, f=base.f, p_terms=base.p_terms,
            q_terms=base.q_terms, xi=base.xi, window=base.window, ext_p=ext_p,
        )
        pair, _ = picard_solve(prob)
        n = lattice8.grid.n_steps
        assert np.max(np.abs(pair.p[n + 1:] - 0.5)) == 0.0
        # the anticipated source now reads the prescribed values: solution differs
        base_pair, _ = picard_solve(base)
        assert pair.sup_diff(base_pair) > 1e-6

    def test_anticipated_q_bound_holds(self, lattice8):
        rng = np.random.default_rng(6)
        prob = random_absde(lattice8, rng)
        pair, _ = picard_solve(prob)
        lhs, rhs = absde.anticipated_q_bound(prob, pair)
        assert lhs <= rhs + 1e-12

    def test_residual_certified_by_trace(self, lattice8):
        rng = np.random.default_rng(7)
        prob = random_absde(lattice8, rng)
        pair, trace = picard_solve(prob)
        residual = absde.gamma_step(pair, prob).sup_diff(pair)
        assert residual < 10.0 * prob.tol


class TestDirectSolve:
    def test_zero_data(self, lattice8):
        pair = direct_solve(zero_problem(lattice8))
        assert np.max(np.abs(pair.p)) == 0.0

    def test_superposition(self, lattice8):
        rng = np.random.default_rng(8)
        p1 = random_absde(lattice8, rng)
        f2 = 0.4 * np.cos(lattice8.brownian()[:8])
        xi2 = 0.2 * np.ones((3, lattice8.n_samples))
        p2 = AbsdeProblem(driver=lattice8, f=f2, p_terms=p1.p_terms,
                          q_terms=p1.q_terms, xi=xi2, window=p1.window)
        p12 = AbsdeProblem(driver=lattice8, f=p1.f + f2, p_terms=p1.p_terms,
                           q_terms=p1.q_terms, xi=p1.xi + xi2, window=p1.window)
        s1, s2, s12 = direct_solve(p1), direct_solve(p2), direct_solve(p12)
        assert np.max(np.abs(s12.p - s1.p - s2.p)) < 1e-11
        assert np.max(np.abs(s12.q - s1.q - s2.q)) < 1e-11

    def test_agreement_on_random_instances(self, lattice8):
        rng = np.random.default_rng(9)
        for _ in range(5):
            prob = random_absde(lattice8, rng, q_coupling=bool(rng.integers(2)))
            pair, _ = picard_solve(prob)
            assert pair.sup_diff(direct_solve(prob)) < 1e-10

    def test_depth_cap(self):
        grid = TimeGrid(1.0, 14, 2)
        drv = BinaryLattice(grid)
        with pytest.raises(ValueError):
            direct_solve(zero_problem(drv))


class TestMeasureApprox:
    def test_pure_density_plus_terminal_atom_small_errors(self, lattice8):
        grid = lattice8.grid
        d = grid.delay
        window = RegularMeasure.from_density(
            1.0 - d, 1.0, np.full(grid.delay_steps, 0.8)
        ) + RegularMeasure.dirac(1.0, 1.0 - d, 1.0, 0.5)
        tww = np.linspace(1.0 - d, 1.0, grid.delay_steps + 1)
        prob = AbsdeProblem(
            driver=lattice8, f=0.1, p_terms=[], q_terms=[],
            xi=np.repeat((0.5 + tww)[:, None], lattice8.n_samples, axis=1),
            window=window,
        )
        rows = absde.solve_with_measure_approx(prob, [256, 512])
        for r in rows:
            assert r.err < 5e-3

    def test_interior_atom_ladder(self):
        grid = TimeGrid(1.0, 10, 2)
        drv = BinaryLattice(grid)
        d = grid.delay
        loc = 1.0 - d / 2  # on the grid
        tww = np.linspace(1.0 - d, 1.0, grid.delay_steps + 1)
        prob = AbsdeProblem(
            driver=drv, f=0.2,
            p_terms=[(0.5, RegularMeasure.dirac(-d, -d, 0.0, 0.5))],
            q_terms=[],
            xi=np.repeat((0.25 + (1.0 - tww))[:, None], drv.n_samples, axis=1),
            window=RegularMeasure.dirac(loc, 1.0 - d, 1.0),
        )
        rows = absde.solve_with_measure_approx(prob, [4, 8, 16, 32, 64])
        errs = [r.err for r in rows]
        assert all(errs[i + 1] <= errs[i] + 1e-12 for i in range(len(errs) - 1))
        assert errs[-1] < 1e-3


class TestDifferentialForm:
    def test_terminal_atom_only(self, lattice8):
        grid = lattice8.grid
        prob = AbsdeProblem(
            driver=lattice8, f=0.0, p_terms=[], q_terms=[], xi=1.3,
            window=RegularMeasure.dirac(1.0, grid.horizon - grid.delay, 1.0),
        )
        report = absde.differential_form_check(prob)
        assert report.terminal_residual < 1e-13
        assert report.max_residual < 1e-13

    def test_pure_density_unit_xi_increments(self, lattice8):
        grid = lattice8.grid
        d = grid.delay
        dens = np.array([0.8, 1.4])  # aligned with the two window cells
        prob = AbsdeProblem(
            driver=lattice8, f=0.0, p_terms=[], q_terms=[], xi=1.0,
            window=RegularMeasure.from_density(1.0 - d, 1.0, dens),
        )
        pair, _ = picard_solve(prob)
        # interior one-step increments match the density mass per cell: the
        # aggregated sample weight at an interior sample is the cell average
        n, ws = grid.n_steps, grid.window_start
        inc = lattice8.expectation(pair.p[ws + 1] - pair.p[ws + 2])
        assert inc == pytest.approx(0.5 * (dens[0] + dens[1]) * grid.dt, abs=1e-12)
        # first-step increment carries exactly the first cell's left-half mass
        inc0 = lattice8.expectation(pair.p[ws] - pair.p[ws + 1])
        assert inc0 == pytest.approx(0.5 * dens[0] * grid.dt, abs=1e-12)
        # against the differential-form identity the aggregated charges sit
        # half a cell off: residuals live in the O(density * dt) band
        report = absde.differential_form_check(prob, pair)
        band = 0.5 * float(dens.max()) * grid.dt + 1e-12
        assert report.terminal_residual <= band
        assert report.max_residual <= band

    def test_interior_atom_rejected(self, lattice8):
        grid = lattice8.grid
        prob = AbsdeProblem(
            driver=lattice8, f=0.0, p_terms=[], q_terms=[], xi=1.0,
            window=RegularMeasure.dirac(0.9, grid.horizon - grid.delay, 1.0),
        )
        with pytest.raises(ValueError, match="interior atom"):
            absde.differential_form_check(prob)
