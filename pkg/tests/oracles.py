"""Independent oracles used by the tests: kept free of the solver code paths.

Each oracle derives its answer by a different route than the module it
certifies (Bellman recursion vs adjoint transposition, RK4 on the Riccati
ODE vs Monte Carlo cost evaluation, symbolic stepwise integration vs Euler).
"""

from __future__ import annotations

import numpy as np


def riccati_rk4(a, b, sigma_x, q_run, r_run, g_term, horizon, n=4096):
    """Backward scalar Riccati ODE for the linear-quadratic regulator

        -P' = 2 a P + sigma_x^2 P - b^2 P^2 / r + q,   P(T) = g,

    solved by RK4 on a fine grid; returns (times, P) forward in time.
    """

    def rhs(p):
        return 2.0 * a * p + sigma_x**2 * p - (b**2 / r_run) * p**2 + q_run

    dt = horizon / n
    p = np.empty(n + 1)
    p[n] = g_term
    for k in range(n, 0, -1):
        y = p[k]
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        p[k - 1] = y + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return np.linspace(0.0, horizon, n + 1), p


def lq_optimal_cost(a, b, sigma0, q_run, r_run, g_term, horizon, x0):
    """Closed-form optimal cost for additive noise:
    J* = P(0) x0^2 / 2 + (sigma0^2 / 2) int_0^T P dt."""
    t, p = riccati_rk4(a, b, 0.0, q_run, r_run, g_term, horizon)
    integral = np.trapz(p, t)
    return 0.5 * p[0] * x0**2 + 0.5 * sigma0**2 * integral


def discrete_lq_feedback(a, b, sigma_x, q_run, r_run, g_term, grid):
    """Bellman (dynamic-programming) recursion for the Euler-discretized LQ
    problem; returns per-step gains K with u*_k = -K_k x_k and the value
    curvatures P_k.  This is the discrete-exact optimizer, independent of
    any adjoint computation.
    """
    n, dt = grid.n_steps, grid.dt
    p = np.empty(n + 1)
    gains = np.empty(n)
    p[n] = g_term
    for k in range(n - 1, -1, -1):
        amp = 1.0 + a * dt
        gains[k] = p[k + 1] * b * amp * dt / (r_run * dt + p[k + 1] * b**2 * dt**2)
        p[k] = (
            q_run * dt
            + r_run * gains[k] ** 2 * dt
            + p[k + 1] * ((amp - b * dt * gains[k]) ** 2 + sigma_x**2 * dt)
        )
    return gains, p


def simulate_lq_feedback(a, b, sigma_x, sigma0, gains, x0, driver):
    """Forward Euler under the feedback u_k = -K_k x_k; returns (states with
    a row per step 0..N, controls with a row per step 0..N-1)."""
    n = driver.grid.n_steps
    dt = driver.grid.dt
    x = np.full(driver.n_samples, float(x0))
    xs = [x.copy()]
    us = []
    for k in range(n):
        u = -gains[k] * x
        us.append(u)
        x = x + (a * x + b * u) * dt + (sigma_x * x + sigma0) * driver.dw[k]
        xs.append(x.copy())
    return np.stack(xs), np.stack(us)


def stepwise_delay_solution(times, delay):
    """x' = x(t - delay), x = 1 on [-delay, 0]: exact polynomial-by-steps
    values on [0, 2 delay]."""
    t = np.asarray(times, dtype=float)
    if np.any(t > 2 * delay + 1e-12):
        raise ValueError("stepwise oracle coded for [0, 2 delay] only")
    first = 1.0 + t
    s = t - delay
    second = 1.0 + delay + s + 0.5 * s**2
    return np.where(t <= delay, first, second)
