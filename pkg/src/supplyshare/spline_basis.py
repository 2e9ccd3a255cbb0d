"""Cubic B-spline bases with knot placement anchored to the latest survey year.

Each population gets its own basis: a clamped cubic B-spline family over the
estimation window whose interior knots sit on a uniform lattice passing exactly
through that population's most recent survey year. Anchoring keeps the
coefficient nearest the last observation interpretable as the current level,
while the uniform lattice preserves the usual first-difference penalty reading.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigError, WindowError

SPLINE_DEGREE = 3
GRID_STEP = 0.5
_EPS_YEAR = 1e-9


@dataclass(frozen=True)
class BasisMatrix:
    """Evaluated B-spline basis for one population.

    Attributes
    ----------
    start_year, end_year : float
        Estimation window; the basis is clamped at both ends.
    nsegments : int
        Number of knot intervals; the basis has ``nsegments + 3`` columns.
    t_star : float
        Anchor year (latest survey year for the population). One interior
        knot coincides exactly with it whenever ``t_star < end_year``.
    year_grid : ndarray, shape (T,)
        Half-year evaluation grid covering the window.
    values : ndarray, shape (T, K)
        Basis functions evaluated on the grid.
    knots : ndarray
        Full knot vector including the replicated boundary knots.
    k_star : int
        0-based index of the column whose peak lies nearest ``t_star``
        (ties resolved toward the lower index).
    population : str or None
        Optional label attached by the model-input builder.
    """

    start_year: float
    end_year: float
    nsegments: int
    t_star: float
    year_grid: np.ndarray
    values: np.ndarray
    knots: np.ndarray
    k_star: int
    population: str | None = field(default=None)

    @property
    def n_coef(self) -> int:
        return self.values.shape[1]

    @property
    def n_grid(self) -> int:
        return self.values.shape[0]

    def with_population(self, label: str) -> "BasisMatrix":
        return replace(self, population=label)

    def grid_index(self, year: float) -> int:
        """Index of `year` on the half-year grid; the year must lie on it."""
        idx = (year - self.start_year) / GRID_STEP
        j = int(round(idx))
        if j < 0 or j >= self.n_grid or abs(idx - j) > 1e-6:
            raise WindowError(
                f"year {year} is not on the half-year grid "
                f"[{self.start_year}, {self.end_year}]"
            )
        return j

    def to_csv(self, path) -> None:
        """Debug dump: rows are grid years, columns the basis functions."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["year"] + [f"k{j}" for j in range(self.n_coef)])
            for year, row in zip(self.year_grid, self.values):
                writer.writerow([repr(float(year))] + [repr(float(v)) for v in row])


def _anchored_interior_knots(
    start: float, end: float, nsegments: int, t_star: float
) -> np.ndarray:
    """Interior knots on the lattice ``t_star + j*w`` restricted to (start, end).

    The lattice yields either ``nsegments - 1`` interior points (aligned case)
    or ``nsegments`` (generic case). In the generic case the point farthest
    from ``t_star`` is dropped so the coefficient count stays ``nsegments + 3``;
    on a tie the lower point goes.
    """
    width = (end - start) / nsegments
    j_lo = int(np.ceil((start - t_star) / width - 1e-12))
    j_hi = int(np.floor((end - t_star) / width + 1e-12))
    candidates = t_star + width * np.arange(j_lo, j_hi + 1)
    inside = (candidates > start + _EPS_YEAR) & (candidates < end - _EPS_YEAR)
    candidates = candidates[inside]
    if candidates.size == nsegments:
        dist = np.abs(candidates - t_star)
        worst = np.max(dist)
        drop = np.nonzero(np.abs(dist - worst) <= _EPS_YEAR)[0][0]
        candidates = np.delete(candidates, drop)
    if candidates.size != nsegments - 1:
        raise ConfigError(
            f"anchored knot lattice produced {candidates.size} interior knots, "
            f"expected {nsegments - 1}"
        )
    return candidates


def _half_year_grid(start: float, end: float) -> np.ndarray:
    n_steps = (end - start) / GRID_STEP
    t_count = int(round(n_steps))
    if abs(n_steps - t_count) > 1e-9:
        raise ConfigError(
            f"window [{start}, {end}] is not a whole number of half-year steps"
        )
    return start + GRID_STEP * np.arange(t_count + 1)


def build_basis(
    start_year: float, end_year: float, nsegments: int, t_star: float
) -> BasisMatrix:
    """Construct the anchored clamped cubic B-spline basis for one population.

    Parameters
    ----------
    start_year, end_year : float
        Estimation window; must span a whole number of half-years.
    nsegments : int
        Knot intervals of the underlying lattice (>= 4); gives
        ``nsegments + 3`` basis functions.
    t_star : float
        Anchor year, in ``(start_year, end_year]``.
    """
    if nsegments < 4:
        raise ConfigError(f"nsegments must be >= 4, got {nsegments}")
    if not start_year < end_year:
        raise ConfigError(f"empty window [{start_year}, {end_year}]")
    if not (start_year < t_star <= end_year):
        raise WindowError(
            f"anchor year {t_star} outside the window ({start_year}, {end_year}]"
        )
    interior = _anchored_interior_knots(start_year, end_year, nsegments, t_star)
    knots = np.concatenate(
        [
            np.full(SPLINE_DEGREE + 1, start_year),
            interior,
            np.full(SPLINE_DEGREE + 1, end_year),
        ]
    )
    year_grid = _half_year_grid(start_year, end_year)
    values = BSpline.design_matrix(year_grid, knots, SPLINE_DEGREE).toarray()

    # Peak location of each column, on a grid fine enough to separate columns.
    fine = np.linspace(start_year, end_year, 4 * len(year_grid) + 1)
    fine_vals = BSpline.design_matrix(fine, knots, SPLINE_DEGREE).toarray()
    peaks = fine[np.argmax(fine_vals, axis=0)]
    k_star = int(np.argmin(np.abs(peaks - t_star)))

    return BasisMatrix(
        start_year=float(start_year),
        end_year=float(end_year),
        nsegments=int(nsegments),
        t_star=float(t_star),
        year_grid=year_grid,
        values=values,
        knots=knots,
        k_star=k_star,
    )


def greville_sites(basis: BasisMatrix) -> np.ndarray:
    """Characteristic abscissa of each basis function (knot averages)."""
    knots = basis.knots
    return np.array(
        [knots[k + 1 : k + 1 + SPLINE_DEGREE].mean() for k in range(basis.n_coef)]
    )


def eval_basis(basis: BasisMatrix, t: float) -> np.ndarray:
    """Evaluate all basis functions at one year inside the window."""
    if not (basis.start_year - _EPS_YEAR <= t <= basis.end_year + _EPS_YEAR):
        raise WindowError(
            f"year {t} outside the window [{basis.start_year}, {basis.end_year}]"
        )
    t = min(max(t, basis.start_year), basis.end_year)
    row = BSpline.design_matrix(
        np.asarray([t], dtype=float), basis.knots, SPLINE_DEGREE
    ).toarray()
    return row[0]
