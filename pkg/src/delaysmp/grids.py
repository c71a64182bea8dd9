"""Uniform time grids commensurate with the delay horizon."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Raised for malformed or incompatible time grids."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with a delay of exactly ``delay_steps`` grid steps.

    The grid implicitly extends to [-d, T + d]: step indices run from
    ``-delay_steps`` (start of the initial segment) to ``n_steps + delay_steps``
    (end of the zero-extension region used by anticipated equations).
    """

    horizon: float
    n_steps: int
    delay_steps: int

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise GridError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise GridError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 <= self.delay_steps <= self.n_steps:
            raise GridError(
                f"delay_steps must lie in [0, n_steps], got {self.delay_steps}"
            )

    @classmethod
    def from_delay(cls, horizon, n_steps, delay):
        """Build a grid from a real delay; rejects non-commensurate delays."""
        dt = horizon / n_steps
        steps = delay / dt
        rounded = round(steps)
        if abs(steps - rounded) > 1e-9 * max(1.0, abs(steps)):
            raise GridError(
                f"delay {delay} is not an integer multiple of dt={dt}; "
                "choose n_steps so the delay falls on the grid"
            )
        return cls(horizon, n_steps, int(rounded))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def delay(self) -> float:
        return self.delay_steps * self.dt

    def time(self, step):
        """Time of a (possibly negative or extended) step index."""
        return np.asarray(step) * self.dt

    @property
    def times(self):
        """Times t_0 .. t_N on [0, T]."""
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def window_start(self) -> int:
        """First step of the terminal window [T - d, T]."""
        return self.n_steps - self.delay_steps

    @property
    def ext_steps(self) -> int:
        """Last step of the zero-extension region (T, T + d]."""
        return self.n_steps + self.delay_steps

    def require_same(self, other: "TimeGrid"):
        if self != other:
            raise GridError(f"grids differ: {self} vs {other}")
