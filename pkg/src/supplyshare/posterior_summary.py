"""Point estimates and uncertainty intervals from retained draws.

Summaries are marginal empirical quantiles (linear interpolation between
order statistics) of the composition on the half-year grid: median plus 80%
and 95% intervals per (population, year, method, sector). Also extracts the
fixed-parameter priors and global covariances that single-population runs
consume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import SECTOR_ORDER, Method
from .errors import ConfigError, GridMismatchError
from .model_core import (
    N_LATENT,
    CrossMethod,
    FixedGlobal,
    InformativePriors,
    Level,
    Scope,
)
from .sampler import ChainOutput

QUANTILES = (0.025, 0.10, 0.50, 0.90, 0.975)
_FIELDS = ("lower95", "lower80", "median", "upper80", "upper95")


@dataclass(frozen=True)
class PosteriorSummary:
    """Median and 80/95% intervals of the composition, shape (Q, T, M, 3) each."""

    populations: tuple[str, ...]
    years: np.ndarray
    methods: tuple[Method, ...]
    median: np.ndarray
    lower80: np.ndarray
    upper80: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray

    def __post_init__(self):
        expected = (
            len(self.populations),
            len(self.years),
            len(self.methods),
            len(SECTOR_ORDER),
        )
        for name in _FIELDS:
            if getattr(self, name).shape != expected:
                raise ConfigError(f"summary field {name} must have shape {expected}")

    def restrict(self, populations) -> "PosteriorSummary":
        keep = [self.populations.index(p) for p in populations]
        return PosteriorSummary(
            populations=tuple(populations),
            years=self.years,
            methods=self.methods,
            median=self.median[keep],
            lower80=self.lower80[keep],
            upper80=self.upper80[keep],
            lower95=self.lower95[keep],
            upper95=self.upper95[keep],
        )

    def same_grid(self, other: "PosteriorSummary") -> bool:
        return (
            self.populations == other.populations
            and self.methods == other.methods
            and self.years.shape == other.years.shape
            and bool(np.all(self.years == other.years))
        )


def summary_from_phi_draws(phi: np.ndarray) -> dict[str, np.ndarray]:
    """Empirical quantiles over the draw axis of a (D, ...) array."""
    qs = np.quantile(phi, QUANTILES, axis=0, method="linear")
    return {
        "lower95": qs[0],
        "lower80": qs[1],
        "median": qs[2],
        "upper80": qs[3],
        "upper95": qs[4],
    }


def summarize(chains: ChainOutput) -> PosteriorSummary:
    """Quantile summary of the composition grid, one population at a time."""
    inputs = chains.inputs
    shape = (inputs.n_pop, inputs.bases[0].n_grid, inputs.n_methods, len(SECTOR_ORDER))
    parts = {name: np.empty(shape) for name in _FIELDS}
    for q in range(inputs.n_pop):
        phi = chains.phi_draws_for_population(q)
        for name, values in summary_from_phi_draws(phi).items():
            parts[name][q] = values
    return PosteriorSummary(
        populations=inputs.populations,
        years=inputs.bases[0].year_grid.copy(),
        methods=inputs.methods,
        **parts,
    )


ESTIMATE_COLUMNS = (
    "population",
    "year",
    "method",
    "sector",
    "median",
    "l80",
    "u80",
    "l95",
    "u95",
)


def export_estimates(summary: PosteriorSummary, path) -> None:
    """Write the tidy estimates CSV; floats round-trip exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMATE_COLUMNS)
        for q, pop in enumerate(summary.populations):
            for t, year in enumerate(summary.years):
                for m, method in enumerate(summary.methods):
                    for s, sector in enumerate(SECTOR_ORDER):
                        writer.writerow(
                            [
                                pop,
                                repr(float(year)),
                                method.value,
                                sector.value,
                                repr(float(summary.median[q, t, m, s])),
                                repr(float(summary.lower80[q, t, m, s])),
                                repr(float(summary.upper80[q, t, m, s])),
                                repr(float(summary.lower95[q, t, m, s])),
                                repr(float(summary.upper95[q, t, m, s])),
                            ]
                        )


def load_estimates(path) -> PosteriorSummary:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ESTIMATE_COLUMNS:
            raise ConfigError(f"{path} does not look like an estimates file")
        rows = list(reader)
    if not rows:
        raise ConfigError(f"{path} holds no estimates")
    populations, years, methods = [], [], []
    for row in rows:
        if row["population"] not in populations:
            populations.append(row["population"])
        year = float(row["year"])
        if year not in years:
            years.append(year)
        if row["method"] not in methods:
            methods.append(row["method"])
    sector_index = {s.value: i for i, s in enumerate(SECTOR_ORDER)}
    method_objs = tuple(Method(m) for m in methods)
    shape = (len(populations), len(years), len(methods), len(SECTOR_ORDER))
    parts = {name: np.empty(shape) for name in _FIELDS}
    pop_i = {p: i for i, p in enumerate(populations)}
    year_i = {y: i for i, y in enumerate(years)}
    meth_i = {m: i for i, m in enumerate(methods)}
    for row in rows:
        idx = (
            pop_i[row["population"]],
            year_i[float(row["year"])],
            meth_i[row["method"]],
            sector_index[row["sector"]],
        )
        parts["median"][idx] = float(row["median"])
        parts["lower80"][idx] = float(row["l80"])
        parts["upper80"][idx] = float(row["u80"])
        parts["lower95"][idx] = float(row["l95"])
        parts["upper95"][idx] = float(row["u95"])
    return PosteriorSummary(
        populations=tuple(populations),
        years=np.array(years),
        methods=method_objs,
        **parts,
    )


# ---------------------------------------------------------------------------
# Fixed-parameter inputs for single-population runs


def extract_informative_priors(chains: ChainOutput, country: str) -> InformativePriors:
    """Posterior-median priors at the target country's parent level.

    From a national multi-population run: the country's subcontinent level
    and the cross-country scale. From a subnational one: the country level
    and the cross-province scale.
    """
    if chains.spec.scope is not Scope.MULTI_COUNTRY:
        raise ConfigError("informative priors come from a multi-population run")
    geo = chains.inputs.geography
    if country not in geo.subcontinent_of:
        raise ConfigError(f"unknown country {country!r}")
    if chains.spec.level is Level.NATIONAL:
        subcon = geo.subcontinent_of[country]
        r = geo.subcon_index(subcon)
        loc = np.median(chains.stacked("theta_sub")[:, r], axis=0)
        sd = np.median(chains.stacked("sigma_alpha_c"), axis=0)
        level_name = subcon
    else:
        c = geo.country_index(country)
        loc = np.median(chains.stacked("alpha_country")[:, c], axis=0)
        sd = np.median(chains.stacked("sigma_alpha_p"), axis=0)
        level_name = country
    scale = np.broadcast_to(sd, (len(chains.inputs.methods), N_LATENT)).copy()
    return InformativePriors(
        level_name=level_name,
        methods=chains.inputs.methods,
        loc=loc,
        scale=scale,
    )


def extract_global_sigma(chains: ChainOutput) -> FixedGlobal:
    """Elementwise posterior median of the delta covariance, per sector."""
    spec = chains.spec
    m = spec.n_methods
    if isinstance(spec.correlation, FixedGlobal):
        return spec.correlation
    sig = chains.stacked("sigma_delta")  # (D, M, 2)
    if isinstance(spec.correlation, CrossMethod):
        rho = spec.correlation.rho
    else:
        rho = (np.eye(m), np.eye(m))
    out = []
    for s in range(N_LATENT):
        outer = sig[:, :, s][:, :, None] * sig[:, :, s][:, None, :]  # (D, M, M)
        out.append(np.median(rho[s][None, :, :] * outer, axis=0))
    return FixedGlobal(sigma=tuple(out))


def median_agreement_check(
    summary_a: PosteriorSummary, summary_b: PosteriorSummary, band: float = 0.05
):
    """Shared grid check used by the validation module."""
    if not summary_a.same_grid(summary_b):
        raise GridMismatchError("summaries are not on the same (q, t, m, s) grid")
    return np.abs(summary_a.median - summary_b.median) <= band
