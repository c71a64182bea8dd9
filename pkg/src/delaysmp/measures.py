"""Finite signed measures on a closed interval: atoms plus a piecewise-constant density.

The class below covers every measure the solvers need (delay kernels on
[-d, 0], terminal-window measures on [T-d, T]): finitely many signed atoms
plus an integrable density stored as cell values on a uniform partition.

All integrals of grid-sampled functions go through one quadrature rule:
the measure is reduced to point masses (atoms as-is, each density cell as
a mass at its midpoint) and the function is linearly interpolated at those
points.  ``grid_weights`` exposes the rule as a weight vector so that
contractions against many functions become dot products, and so that every
consumer of a measure (quadrature, solver window charges, cost terms)
charges identical increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_MOLLIFY_CELLS = 256

_ATOL = 1e-12


class MeasureSupportError(ValueError):
    """Atom outside the support interval, or mismatched supports."""


class GridResolutionError(ValueError):
    """Function grid too coarse for the density partition."""


@dataclass(frozen=True)
class RegularMeasure:
    """Signed measure on [a, b]: finite atoms + piecewise-constant density.

    ``density`` holds weight-per-unit-length values on a uniform partition
    of [a, b]; ``None`` means no density part.  Atom locations are kept
    strictly increasing (duplicates are merged at construction).
    """

    a: float
    b: float
    atom_locations: np.ndarray = field(default_factory=lambda: np.empty(0))
    atom_weights: np.ndarray = field(default_factory=lambda: np.empty(0))
    density: np.ndarray | None = None

    def __post_init__(self):
        if not self.b > self.a:
            raise MeasureSupportError(f"empty support [{self.a}, {self.b}]")
        locs = np.atleast_1d(np.asarray(self.atom_locations, dtype=float))
        wts = np.atleast_1d(np.asarray(self.atom_weights, dtype=float))
        if locs.shape != wts.shape:
            raise ValueError("atom locations and weights differ in length")
        if locs.size:
            lo, hi = self.a - _ATOL, self.b + _ATOL
            if locs.min() < lo or locs.max() > hi:
                raise MeasureSupportError(
                    f"atom outside support [{self.a}, {self.b}]: "
                    f"{locs[(locs < lo) | (locs > hi)]}"
                )
            locs = np.clip(locs, self.a, self.b)
            order = np.argsort(locs, kind="stable")
            locs, wts = locs[order], wts[order]
            # merge coincident atoms so locations are strictly increasing
            keep_locs, keep_wts = [], []
            for loc, w in zip(locs, wts):
                if keep_locs and abs(loc - keep_locs[-1]) <= _ATOL:
                    keep_wts[-1] += w
                else:
                    keep_locs.append(loc)
                    keep_wts.append(w)
            locs = np.asarray(keep_locs)
            wts = np.asarray(keep_wts)
            nz = np.abs(wts) > 0.0
            locs, wts = locs[nz], wts[nz]
        object.__setattr__(self, "atom_locations", locs)
        object.__setattr__(self, "atom_weights", wts)
        if self.density is not None:
            dens = np.asarray(self.density, dtype=float)
            if dens.ndim != 1 or dens.size < 1:
                raise ValueError("density must be a 1-d array of cell values")
            if not np.all(np.isfinite(dens)):
                raise ValueError("density values must be finite")
            object.__setattr__(self, "density", dens)

    # ------------------------------------------------------------------ #
    # constructors

    @classmethod
    def zero(cls, a, b):
        return cls(a, b)

    @classmethod
    def dirac(cls, loc, a, b, weight=1.0):
        return cls(a, b, np.array([loc]), np.array([weight]))

    @classmethod
    def lebesgue(cls, a, b, scale=1.0, cells=1):
        return cls(a, b, density=np.full(cells, scale, dtype=float))

    @classmethod
    def from_density(cls, a, b, values):
        return cls(a, b, density=np.asarray(values, dtype=float))

    # ------------------------------------------------------------------ #
    # basic structure

    @property
    def width(self) -> float:
        return self.b - self.a

    @property
    def n_cells(self) -> int:
        return 0 if self.density is None else self.density.size

    def point_masses(self):
        """The measure as point masses: atoms plus density-cell midpoints."""
        locs = [self.atom_locations]
        masses = [self.atom_weights]
        if self.density is not None:
            h = self.width / self.n_cells
            mids = self.a + (np.arange(self.n_cells) + 0.5) * h
            locs.append(mids)
            masses.append(self.density * h)
        return np.concatenate(locs), np.concatenate(masses)

    def total_mass(self) -> float:
        dens = 0.0
        if self.density is not None:
            dens = float(self.density.sum() * self.width / self.n_cells)
        return float(self.atom_weights.sum()) + dens

    def total_variation(self) -> float:
        dens = 0.0
        if self.density is not None:
            dens = float(np.abs(self.density).sum() * self.width / self.n_cells)
        return float(np.abs(self.atom_weights).sum()) + dens

    # ------------------------------------------------------------------ #
    # quadrature

    def grid_weights(self, n, *, allow_coarse=False):
        """Weights w such that integrate(f) == w @ f for f sampled on
        linspace(a, b, n).

        Atoms and density-cell midpoint masses are split between the two
        neighbouring grid points by linear interpolation.  Unless
        ``allow_coarse`` is set, the grid must be at least as fine as the
        density partition.
        """
        if n < 2:
            raise GridResolutionError("need at least two grid points")
        if not allow_coarse and self.density is not None and (n - 1) < self.n_cells:
            raise GridResolutionError(
                f"grid with {n - 1} intervals is coarser than the density "
                f"partition with {self.n_cells} cells"
            )
        w = np.zeros(n)
        locs, masses = self.point_masses()
        if locs.size:
            h = self.width / (n - 1)
            pos = (locs - self.a) / h
            idx = np.minimum(pos.astype(int), n - 2)
            frac = pos - idx
            np.add.at(w, idx, masses * (1.0 - frac))
            np.add.at(w, idx + 1, masses * frac)
        return w

    def integrate(self, f, *, n=None):
        """Integrate a grid function against the measure.

        ``f`` is either an array of samples on a uniform grid over [a, b]
        (endpoints included) or a callable, which is sampled on a grid fine
        enough for the density partition (override with ``n``).
        """
        if callable(f):
            if n is None:
                n = max(1025, 4 * self.n_cells + 1)
            f = f(np.linspace(self.a, self.b, n))
        f = np.asarray(f, dtype=float)
        return float(self.grid_weights(f.size) @ f)

    # ------------------------------------------------------------------ #
    # terminal-atom split and mollification

    def split_terminal_atom(self):
        """Remove the atom at the right endpoint; return (remainder, weight)."""
        at_b = np.abs(self.atom_locations - self.b) <= _ATOL
        c = float(self.atom_weights[at_b].sum())
        rest = RegularMeasure(
            self.a,
            self.b,
            self.atom_locations[~at_b],
            self.atom_weights[~at_b],
            self.density,
        )
        return rest, c

    def mollify(self, n, cells=DEFAULT_MOLLIFY_CELLS):
        """Smooth the measure into a pure density with the same total mass.

        Every point mass is spread with a symmetric hat kernel of half-width
        (b - a) / (2 n), reflected at the interval endpoints so no mass
        escapes.  Density parts are first decomposed into sub-atoms fine
        enough that the extra smearing is negligible against the kernel
        width.  Requires no atom at the right endpoint (split it off first).
        """
        if n < 1:
            raise ValueError(f"mollification index must be >= 1, got {n}")
        if np.any(np.abs(self.atom_locations - self.b) <= _ATOL):
            raise MeasureSupportError(
                "measure has an atom at the right endpoint; "
                "split it off before mollifying"
            )
        hw = self.width / (2.0 * n)
        src_locs = [self.atom_locations]
        src_masses = [self.atom_weights]
        if self.density is not None:
            cell_w = self.width / self.n_cells
            q = int(np.clip(np.ceil(4.0 * cell_w / hw), 4, 64))
            sub = (np.arange(q) + 0.5) / q
            lefts = self.a + cell_w * np.arange(self.n_cells)
            src_locs.append((lefts[:, None] + cell_w * sub[None, :]).ravel())
            src_masses.append(np.repeat(self.density * cell_w / q, q))
        locs = np.concatenate(src_locs)
        masses = np.concatenate(src_masses)

        edges = np.linspace(self.a, self.b, cells + 1)
        out = np.zeros(cells)
        for loc, m in zip(locs, masses):
            cum = _reflected_hat_cdf(edges, loc, hw, self.a, self.b)
            out += m * np.diff(cum)
        return RegularMeasure(self.a, self.b, density=out / (self.width / cells))

    # ------------------------------------------------------------------ #
    # algebra

    def __add__(self, other):
        if not isinstance(other, RegularMeasure):
            return NotImplemented
        if abs(other.a - self.a) > _ATOL or abs(other.b - self.b) > _ATOL:
            raise MeasureSupportError("cannot add measures on different supports")
        dens = _add_densities(self, other)
        return RegularMeasure(
            self.a,
            self.b,
            np.concatenate([self.atom_locations, other.atom_locations]),
            np.concatenate([self.atom_weights, other.atom_weights]),
            dens,
        )

    def __mul__(self, scalar):
        scalar = float(scalar)
        dens = None if self.density is None else self.density * scalar
        return RegularMeasure(
            self.a, self.b, self.atom_locations, self.atom_weights * scalar, dens
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (other * -1.0)

    def translate(self, offset):
        """The same measure shifted by ``offset`` (e.g. [-d, 0] -> [T-d, T])."""
        return RegularMeasure(
            self.a + offset,
            self.b + offset,
            self.atom_locations + offset,
            self.atom_weights,
            self.density,
        )

    def refined(self, cells):
        """The same measure with the density re-sampled on ``cells`` cells
        (an exact refinement; ``cells`` must be a multiple of the current
        partition).  No-op for pure-atom measures."""
        if self.density is None or self.n_cells == cells:
            return self
        if cells % self.n_cells:
            raise ValueError(
                f"{cells} cells do not refine a {self.n_cells}-cell partition"
            )
        dens = np.repeat(self.density, cells // self.n_cells)
        return RegularMeasure(
            self.a, self.b, self.atom_locations, self.atom_weights, dens
        )

    # ------------------------------------------------------------------ #
    # serialization (config round-trip)

    def to_config(self):
        cfg = {
            "support": [float(self.a), float(self.b)],
            "atoms": [
                [float(l), float(w)]
                for l, w in zip(self.atom_locations, self.atom_weights)
            ],
        }
        if self.density is not None:
            cfg["density"] = {
                "partition_cells": int(self.n_cells),
                "values": [float(v) for v in self.density],
            }
        return cfg

    @classmethod
    def from_config(cls, cfg):
        a, b = cfg["support"]
        atoms = cfg.get("atoms", []) or []
        locs = np.array([at[0] for at in atoms], dtype=float)
        wts = np.array([at[1] for at in atoms], dtype=float)
        dens = None
        if cfg.get("density") is not None:
            spec = cfg["density"]
            values = np.asarray(spec["values"], dtype=float)
            if values.size != int(spec["partition_cells"]):
                raise ValueError("density values do not match partition_cells")
            dens = values
        return cls(a, b, locs, wts, dens)


def _add_densities(m1, m2):
    d1, d2 = m1.density, m2.density
    if d1 is None:
        return None if d2 is None else d2.copy()
    if d2 is None:
        return d1.copy()
    if d1.size == d2.size:
        return d1 + d2
    target = int(np.lcm(d1.size, d2.size))
    if target > 8192:
        raise ValueError(
            f"cannot combine density partitions with {d1.size} and {d2.size} cells"
        )
    return np.repeat(d1, target // d1.size) + np.repeat(d2, target // d2.size)


def _hat_cdf(y, center, hw):
    """CDF of the unit hat kernel on [center - hw, center + hw]."""
    z = (np.asarray(y, dtype=float) - center) / hw
    z = np.clip(z, -1.0, 1.0)
    return np.where(z <= 0.0, 0.5 * (1.0 + z) ** 2, 1.0 - 0.5 * (1.0 - z) ** 2)


def _reflected_hat_cdf(y, center, hw, a, b):
    """Mass of the endpoint-reflected hat kernel in [a, y]."""
    return _hat_cdf(y, center, hw) - _hat_cdf(2.0 * a - y, center, hw) \
        + 1.0 - _hat_cdf(2.0 * b - y, center, hw)
