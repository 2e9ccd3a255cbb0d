"""Synthetic dataset generation from the model's own generative chain.

Draws the geographic hierarchy top-down (world level, subcontinent, country,
optionally province), rates of change from the cross-method covariance, maps
them through the spline and composition, and then observes each survey year
with multinomial sector counts. The induced binomial standard errors are
exactly what ingestion expects, so simulated CSVs flow through the normal
pipeline unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import (
    METHOD_ORDER,
    SECTOR_ORDER,
    CleanDataset,
    GeographyIndex,
    IngestReport,
    IngestSettings,
    SurveyObservation,
)
from .errors import ConfigError
from .model_core import ParameterState, phi_grid_for_state
from .spline_basis import build_basis


@dataclass(frozen=True)
class SimScenario:
    """Counts, window, and true hyperparameters for one synthetic world."""

    n_countries: int = 2
    provinces_per_country: int = 0  # 0 -> national-level data
    n_methods: int = 2
    n_surveys: int = 3
    start_year: float = 2000.0
    end_year: float = 2020.0
    nsegments: int = 4
    n_subcontinents: int = 1
    theta_world: float | tuple = 0.3
    sigma_theta: float = 0.3
    sigma_alpha_c: float = 0.4
    sigma_alpha_p: float = 0.3
    rho: float = 0.0  # common off-diagonal correlation of rates of change
    sigma_delta: float = 0.2
    n_respondents: int = 500
    seed: int = 0
    survey_years: tuple[float, ...] = ()
    drop_method_in_pop: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.n_countries < 1 or self.n_methods < 1 or self.n_surveys < 1:
            raise ConfigError("scenario counts must be >= 1")
        if self.n_methods > len(METHOD_ORDER):
            raise ConfigError(f"at most {len(METHOD_ORDER)} methods are available")
        if self.n_subcontinents < 1 or self.n_subcontinents > self.n_countries:
            raise ConfigError("need 1 <= subcontinents <= countries")
        if self.n_respondents < 1:
            raise ConfigError("n_respondents must be >= 1")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (-1, 1)")
        if self.sigma_delta < 0 or self.sigma_theta < 0 or self.sigma_alpha_c < 0:
            raise ConfigError("scale parameters must be >= 0")

    @property
    def subnational(self) -> bool:
        return self.provinces_per_country > 0

    @property
    def n_pop(self) -> int:
        return self.n_countries * max(self.provinces_per_country, 1)

    def methods(self):
        return METHOD_ORDER[: self.n_methods]

    def years(self) -> tuple[float, ...]:
        if self.survey_years:
            return tuple(sorted(self.survey_years))
        raw = np.linspace(self.start_year, self.end_year, self.n_surveys + 2)[1:-1]
        snapped = np.round(raw * 2.0) / 2.0
        return tuple(float(y) for y in snapped)

    def rho_matrix(self) -> np.ndarray:
        m = self.n_methods
        return np.full((m, m), self.rho) + (1.0 - self.rho) * np.eye(m)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in _SCENARIO_FIELDS.items():
                raw = getattr(self, value)
                if isinstance(raw, tuple):
                    raw = ",".join(str(v) for v in raw)
                fh.write(f"{key} = {raw}\n")

    @classmethod
    def from_file(cls, path) -> "SimScenario":
        values = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"scenario line is not KEY = VALUE: {line!r}")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in _SCENARIO_FIELDS:
                    raise ConfigError(f"unknown scenario key {key!r}")
                values[_SCENARIO_FIELDS[key]] = raw
        kwargs = {}
        for name, raw in values.items():
            kwargs[name] = _parse_scenario_value(name, raw)
        return cls(**kwargs)


_SCENARIO_FIELDS = {
    "countries": "n_countries",
    "provinces_per_country": "provinces_per_country",
    "methods": "n_methods",
    "surveys": "n_surveys",
    "start": "start_year",
    "end": "end_year",
    "nsegments": "nsegments",
    "subcontinents": "n_subcontinents",
    "theta_world": "theta_world",
    "sigma_theta": "sigma_theta",
    "sigma_alpha_c": "sigma_alpha_c",
    "sigma_alpha_p": "sigma_alpha_p",
    "rho": "rho",
    "sigma_delta": "sigma_delta",
    "respondents": "n_respondents",
    "seed": "seed",
    "survey_years": "survey_years",
}

_INT_FIELDS = {
    "n_countries",
    "provinces_per_country",
    "n_methods",
    "n_surveys",
    "nsegments",
    "n_subcontinents",
    "n_respondents",
    "seed",
}


def _parse_scenario_value(name, raw):
    if name == "survey_years":
        return tuple(float(tok) for tok in raw.split(",") if tok.strip())
    if name in _INT_FIELDS:
        return int(raw)
    return float(raw)


def scenario_geography(scenario: SimScenario) -> GeographyIndex:
    countries = [f"Country {i + 1:02d}" for i in range(scenario.n_countries)]
    subcons = [f"Region {chr(ord('A') + i)}" for i in range(scenario.n_subcontinents)]
    provinces = {}
    if scenario.subnational:
        provinces = {
            c: tuple(
                f"Province {j + 1:02d}" for j in range(scenario.provinces_per_country)
            )
            for c in countries
        }
    return GeographyIndex(
        subcontinent_of={c: subcons[i % scenario.n_subcontinents] for i, c in enumerate(countries)},
        iso_of={c: 901 + i for i, c in enumerate(countries)},
        fp2030_of={c: True for c in countries},
        provinces_of=provinces,
    )


def simulate_dataset(
    scenario: SimScenario,
) -> tuple[CleanDataset, ParameterState, np.ndarray]:
    """Draw one synthetic world: clean dataset, true state, true composition grid.

    The returned composition grid has shape (Q, T, M, 3) on the half-year grid,
    with populations ordered the way ingestion orders them (sorted labels).
    """
    rng = np.random.default_rng(scenario.seed)
    geo = scenario_geography(scenario)
    m_count = scenario.n_methods
    methods = scenario.methods()

    if scenario.subnational:
        pairs = geo.provinces
        pop_labels = [f"{c}|{p}" for c, p in pairs]
        c_of_q = geo.country_index_of_province()
    else:
        pop_labels = list(geo.countries)
        c_of_q = np.arange(scenario.n_countries)
    r_of_c = geo.subcon_index_of_country()
    q_count = len(pop_labels)

    theta_world = np.broadcast_to(
        np.asarray(scenario.theta_world, dtype=float), (m_count, 2)
    ).copy()
    theta_sub = theta_world + scenario.sigma_theta * rng.standard_normal(
        (scenario.n_subcontinents, m_count, 2)
    )
    alpha_country = theta_sub[r_of_c] + scenario.sigma_alpha_c * rng.standard_normal(
        (scenario.n_countries, m_count, 2)
    )
    if scenario.subnational:
        alpha = alpha_country[c_of_q] + scenario.sigma_alpha_p * rng.standard_normal(
            (q_count, m_count, 2)
        )
    else:
        alpha = alpha_country

    years = scenario.years()
    t_star = max(years)
    bases = tuple(
        build_basis(scenario.start_year, scenario.end_year, scenario.nsegments, t_star)
        .with_population(pop_labels[q])
        for q in range(q_count)
    )
    h_count = bases[0].n_coef - 1

    delta = np.zeros((q_count, m_count, 2, h_count))
    if scenario.sigma_delta > 0:
        chol = np.linalg.cholesky(scenario.rho_matrix()) * scenario.sigma_delta
        z = rng.standard_normal((q_count, 2, h_count, m_count))
        delta = np.einsum("ij,qshj->qish", chol, z)

    state = ParameterState(
        alpha=alpha,
        delta=delta,
        alpha_country=alpha_country if scenario.subnational else None,
        theta_sub=theta_sub,
        theta_world=theta_world,
        sigma_alpha_c=np.full(2, scenario.sigma_alpha_c),
        sigma_alpha_p=np.full(2, scenario.sigma_alpha_p) if scenario.subnational else None,
        sigma_theta=np.full(2, scenario.sigma_theta),
        sigma_delta=np.full((m_count, 2), scenario.sigma_delta),
    )
    phi = phi_grid_for_state(state, bases)

    dropped = set(scenario.drop_method_in_pop)
    observations = []
    for q, label in enumerate(pop_labels):
        country, _, province = label.partition("|")
        for year in years:
            t_idx = bases[q].grid_index(year)
            for m in range(m_count):
                if (q, m) in dropped:
                    continue
                counts = rng.multinomial(scenario.n_respondents, phi[q, t_idx, m])
                p_hat = counts / scenario.n_respondents
                se = np.sqrt(p_hat * (1.0 - p_hat) / scenario.n_respondents)
                for s, sector in enumerate(SECTOR_ORDER):
                    observations.append(
                        SurveyObservation(
                            country=country,
                            province=province or None,
                            method=methods[m],
                            avg_year=year,
                            sector=sector,
                            proportion=float(p_hat[s]),
                            se=float(se[s]),
                            n=int(counts[s]),
                        )
                    )
    observations.sort(key=SurveyObservation.sort_key)

    settings = IngestSettings(
        national=not scenario.subnational,
        local=False,
        mycountry=None,
        fp2030=True,
        source=f"simulated(seed={scenario.seed})",
    )
    report = IngestReport(n_input_rows=len(observations), n_kept=len(observations))
    dataset = CleanDataset(
        observations=tuple(observations), geography=geo, settings=settings, report=report
    )
    return dataset, state, phi


def write_truth_csv(path, scenario: SimScenario, phi: np.ndarray, labels) -> None:
    """Tidy export of the true composition grid for downstream checks."""
    import csv

    basis_years = build_basis(
        scenario.start_year, scenario.end_year, scenario.nsegments, scenario.years()[-1]
    ).year_grid
    methods = scenario.methods()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["population", "year", "method", "sector", "phi"])
        for q, label in enumerate(labels):
            for t, year in enumerate(basis_years):
                for m, method in enumerate(methods):
                    for s, sector in enumerate(SECTOR_ORDER):
                        writer.writerow(
                            [label, repr(float(year)), method.value, sector.value,
                             repr(float(phi[q, t, m, s]))]
                        )


def write_geography_csv(path, geo: GeographyIndex) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Country or area", "ISO Code", "Major area", "Region", "FP2020"])
        for country in geo.countries:
            writer.writerow(
                [
                    country,
                    geo.iso_of[country],
                    "Synthetic",
                    geo.subcontinent_of[country],
                    "Yes" if geo.fp2030_of[country] else "No",
                ]
            )
