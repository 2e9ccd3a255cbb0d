import numpy as np
import pytest

ACCEPTANCE_RESULTS: dict[int, str] = {}
ACCEPTANCE_ROSTER = {
    1: "spline/composition algebra",
    2: "correlation oracle",
    3: "sampler correctness",
    4: "simulation-based calibration",
    5: "retention arithmetic",
    6: "two-stage correlation pipeline",
    7: "single-vs-multi agreement",
    8: "validation-report schema",
    9: "end-to-end fixture",
}


def record_criterion(number: int, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[number] = detail


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not any("test_acceptance" in str(i) for i in terminalreporter.stats.get("passed", [])
               ) and not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name in ACCEPTANCE_ROSTER.items():
        if number in ACCEPTANCE_RESULTS:
            detail = ACCEPTANCE_RESULTS[number]
            suffix = f" ({detail})" if detail else ""
            terminalreporter.write_line(f"criterion {number} [{name}]: PASS{suffix}")
        else:
            terminalreporter.write_line(
                f"criterion {number} [{name}]: FAIL or not run"
            )

from supplyshare.data_model import (
    METHOD_ORDER,
    SECTOR_ORDER,
    LogitObservation,
    Method,
    Sector,
    SurveyObservation,
)
from supplyshare.model_core import (
    HierarchyMaps,
    Level,
    ModelSpec,
    ParameterState,
    Scope,
    ZeroCovariance,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def make_survey_rows(country, province, method, year, proportions, ses=None, ns=None):
    """Three sector rows for one (population, method, year) group."""
    ses = ses or [0.02, 0.02, 0.02]
    ns = ns or [100, 100, 100]
    return [
        SurveyObservation(
            country=country,
            province=province,
            method=method,
            avg_year=year,
            sector=sector,
            proportion=p,
            se=se,
            n=n,
        )
        for sector, p, se, n in zip(SECTOR_ORDER, proportions, ses, ns)
    ]


def write_survey_csv(path, groups):
    """Write groups of SurveyObservation rows in the canonical layout."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "Country",
                "Region",
                "Method",
                "average_year",
                "sector_categories",
                "proportion",
                "SE.proportion",
                "n",
            ]
        )
        for rows in groups:
            for o in rows:
                writer.writerow(
                    [
                        o.country,
                        o.province or "",
                        o.method.value,
                        o.avg_year,
                        o.sector.value,
                        o.proportion,
                        o.se,
                        o.n,
                    ]
                )


def make_toy_inputs(
    level="national",
    n_pop=2,
    n_methods=2,
    start=2000.0,
    end=2020.0,
    nsegments=4,
    observations=(),
    c_of_q=None,
    r_of_c=None,
    t_stars=None,
):
    """Hand-assembled ModelInputs for sampler tests (no CSV round trip)."""
    from supplyshare.data_model import GeographyIndex, IngestSettings, ModelInputs
    from supplyshare.spline_basis import build_basis

    if c_of_q is None:
        c_of_q = np.arange(n_pop) if level == "national" else np.zeros(n_pop, dtype=int)
    c_of_q = np.asarray(c_of_q, dtype=int)
    n_countries = int(c_of_q.max()) + 1
    if r_of_c is None:
        r_of_c = np.zeros(n_countries, dtype=int)
    r_of_c = np.asarray(r_of_c, dtype=int)
    countries = [f"C{i + 1}" for i in range(n_countries)]
    subcons = [f"R{i + 1}" for i in range(int(r_of_c.max()) + 1)]
    geo = GeographyIndex(
        subcontinent_of={c: subcons[r_of_c[i]] for i, c in enumerate(countries)},
        iso_of={c: 900 + i for i, c in enumerate(countries)},
        fp2030_of={c: True for c in countries},
        provinces_of={},
    )
    if t_stars is None:
        t_stars = [end - 5.0] * n_pop
    if level == "national":
        populations = tuple(countries[c_of_q[q]] for q in range(n_pop))
    else:
        populations = tuple(f"{countries[c_of_q[q]]}|P{q + 1}" for q in range(n_pop))
    bases = tuple(
        build_basis(start, end, nsegments, t_star=t_stars[q]).with_population(populations[q])
        for q in range(n_pop)
    )
    methods = METHOD_ORDER[:n_methods]
    return ModelInputs(
        level=level,
        populations=populations,
        methods=methods,
        bases=bases,
        observations=tuple(observations),
        geography=geo,
        c_of_q=c_of_q,
        r_of_c=r_of_c,
        start_year=start,
        end_year=end,
        nsegments=nsegments,
        settings=IngestSettings(
            national=level == "national",
            local=False,
            mycountry=None,
            fp2030=True,
            source="synthetic",
        ),
        survey_years=tuple((t_stars[q],) for q in range(n_pop)),
    )


def random_multi_state(spec, maps, n_coef, rng):
    """A support-valid random state for a multi-country spec."""
    q, m = maps.n_pop, spec.n_methods
    state = ParameterState(
        alpha=rng.normal(0, 1, (q, m, 2)),
        delta=rng.normal(0, 0.3, (q, m, 2, n_coef - 1)),
        theta_sub=rng.normal(0, 1, (maps.n_subcontinents, m, 2)),
        theta_world=rng.normal(0, 1, (m, 2)),
        sigma_alpha_c=rng.uniform(0.2, 1.5, 2),
        sigma_theta=rng.uniform(0.2, 1.5, 2),
        sigma_delta=rng.uniform(0.2, 1.5, (m, 2)),
    )
    if spec.level is Level.SUBNATIONAL:
        state.alpha_country = rng.normal(0, 1, (maps.n_countries, m, 2))
        state.sigma_alpha_p = rng.uniform(0.2, 1.5, 2)
    return state


__all__ = [
    "METHOD_ORDER",
    "SECTOR_ORDER",
    "LogitObservation",
    "Method",
    "Sector",
    "SurveyObservation",
    "HierarchyMaps",
    "Level",
    "ModelSpec",
    "Scope",
    "ZeroCovariance",
    "make_survey_rows",
    "write_survey_csv",
    "random_multi_state",
]
