"""Domain types, survey-data ingestion, and observation-level transforms.

The survey file contract: a CSV with columns Country, Region, Method,
average_year, sector_categories, proportion, SE.proportion, n. Each
(country, region, method, year) group carries one row per supply sector
(Public, Commercial_medical, Other) and the three proportions sum to one.
National-level files leave Region empty or omit the column entirely.

Ingestion is strict about vocabulary and ranges and loud about anything it
drops: unknown tokens and out-of-range values raise, incomplete or
non-normalized sector groups are rejected and listed in the ingest report.
"""

from __future__ import annotations

import csv
import enum
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import logit

from .errors import (
    DegenerateCompositionError,
    DegenerateCompositionWarning,
    RangeError,
    SchemaError,
    UnknownCountryError,
    WindowError,
)
from .spline_basis import BasisMatrix, build_basis

YEAR_WINDOW = (1970.0, 2035.0)
SECTOR_SUM_TOL = 1e-3
PROPORTION_CLAMP = 1e-4
SE_FLOOR = 0.005

SURVEY_COLUMNS = (
    "Country",
    "Region",
    "Method",
    "average_year",
    "sector_categories",
    "proportion",
    "SE.proportion",
    "n",
)

GEOGRAPHY_COLUMNS = ("Country or area", "ISO Code", "Major area", "Region", "FP2020")


class Method(enum.Enum):
    FEMALE_STERILIZATION = "Female Sterilization"
    OC_PILLS = "OC Pills"
    IMPLANTS = "Implants"
    INJECTABLES = "Injectables"
    IUD = "IUD"


class Sector(enum.Enum):
    PUBLIC = "Public"
    COMMERCIAL_MEDICAL = "Commercial_medical"
    OTHER = "Other"


SECTOR_ORDER = (Sector.PUBLIC, Sector.COMMERCIAL_MEDICAL, Sector.OTHER)
METHOD_ORDER = tuple(Method)

_METHOD_LOOKUP = {m.value.lower(): m for m in Method}
_METHOD_LOOKUP["female sterilisation"] = Method.FEMALE_STERILIZATION

_SECTOR_LOOKUP = {s.value: s for s in Sector}


def _normalize_name(raw: str) -> str:
    return " ".join(raw.split())


@dataclass(frozen=True)
class SurveyObservation:
    """One aggregated survey proportion for a (population, method, year, sector)."""

    country: str
    province: str | None
    method: Method
    avg_year: float
    sector: Sector
    proportion: float
    se: float
    n: int

    def sort_key(self):
        return (
            self.country,
            self.province or "",
            METHOD_ORDER.index(self.method),
            self.avg_year,
            SECTOR_ORDER.index(self.sector),
        )


@dataclass(frozen=True)
class GeographyIndex:
    """World > subcontinent > country > province lookup with dense indices."""

    subcontinent_of: Mapping[str, str]
    iso_of: Mapping[str, int]
    fp2030_of: Mapping[str, bool]
    provinces_of: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        for country in self.subcontinent_of:
            if country not in self.iso_of or country not in self.fp2030_of:
                raise SchemaError(f"incomplete geography record for {country!r}")

    @property
    def countries(self) -> tuple[str, ...]:
        return tuple(sorted(self.subcontinent_of))

    @property
    def subcontinents(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.subcontinent_of.values())))

    @property
    def provinces(self) -> tuple[tuple[str, str], ...]:
        """(country, province) pairs, sorted."""
        out = []
        for country in self.countries:
            for prov in self.provinces_of.get(country, ()):
                out.append((country, prov))
        return tuple(out)

    def country_index(self, name: str) -> int:
        return self.countries.index(name)

    def subcon_index(self, name: str) -> int:
        return self.subcontinents.index(name)

    def province_index(self, country: str, province: str) -> int:
        return self.provinces.index((country, province))

    def subcon_index_of_country(self) -> np.ndarray:
        """Dense map: country index -> subcontinent index."""
        return np.array(
            [self.subcon_index(self.subcontinent_of[c]) for c in self.countries],
            dtype=int,
        )

    def country_index_of_province(self) -> np.ndarray:
        return np.array([self.country_index(c) for c, _ in self.provinces], dtype=int)

    def resolve_country(self, raw: str) -> str | None:
        """Match a raw name against known countries, trim + case-insensitive."""
        token = _normalize_name(raw).lower()
        for country in self.subcontinent_of:
            if country.lower() == token:
                return country
        return None

    def with_provinces(self, provinces: Mapping[str, Sequence[str]]) -> "GeographyIndex":
        merged = {c: tuple(sorted(set(ps))) for c, ps in provinces.items()}
        return GeographyIndex(
            subcontinent_of=dict(self.subcontinent_of),
            iso_of=dict(self.iso_of),
            fp2030_of=dict(self.fp2030_of),
            provinces_of=merged,
        )

    def restrict(self, countries: Iterable[str]) -> "GeographyIndex":
        keep = set(countries)
        return GeographyIndex(
            subcontinent_of={c: s for c, s in self.subcontinent_of.items() if c in keep},
            iso_of={c: v for c, v in self.iso_of.items() if c in keep},
            fp2030_of={c: v for c, v in self.fp2030_of.items() if c in keep},
            provinces_of={c: v for c, v in self.provinces_of.items() if c in keep},
        )


@dataclass(frozen=True)
class IngestSettings:
    """Arguments supplied to ingestion, carried unmodified downstream."""

    national: bool
    local: bool
    mycountry: str | None
    fp2030: bool
    source: str = field(compare=False)


@dataclass
class IngestReport:
    """What ingestion dropped or flagged, for the user-facing check report."""

    n_input_rows: int = 0
    n_kept: int = 0
    dropped_rows: list[tuple[int, str]] = field(default_factory=list)
    rejected_groups: list[tuple[str, str]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"rows read: {self.n_input_rows}", f"rows kept: {self.n_kept}"]
        for row, reason in self.dropped_rows:
            out.append(f"dropped row {row}: {reason}")
        for key, reason in self.rejected_groups:
            out.append(f"rejected group {key}: {reason}")
        out.extend(self.notes)
        return out


@dataclass(frozen=True)
class CleanDataset:
    """Validated survey observations plus geography and ingestion settings."""

    observations: tuple[SurveyObservation, ...]
    geography: GeographyIndex
    settings: IngestSettings
    report: IngestReport = field(compare=False, repr=False, default_factory=IngestReport)

    def countries(self) -> tuple[str, ...]:
        return tuple(sorted({o.country for o in self.observations}))

    def population_of(self, obs: SurveyObservation) -> str:
        if self.settings.national:
            return obs.country
        return f"{obs.country}|{obs.province}"

    def populations(self) -> tuple[str, ...]:
        return tuple(sorted({self.population_of(o) for o in self.observations}))

    def methods(self) -> tuple[Method, ...]:
        present = {o.method for o in self.observations}
        return tuple(m for m in METHOD_ORDER if m in present)

    def to_csv(self, path) -> None:
        """Emit the canonical CSV; re-ingesting it reproduces this dataset."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SURVEY_COLUMNS)
            for o in self.observations:
                writer.writerow(
                    [
                        o.country,
                        o.province or "",
                        o.method.value,
                        repr(float(o.avg_year)),
                        o.sector.value,
                        repr(float(o.proportion)),
                        repr(float(o.se)),
                        o.n,
                    ]
                )


@dataclass(frozen=True)
class LogitObservation:
    """One logit-scale observation feeding the likelihood.

    `s` is 1 for the public share and 2 for the commercial-medical share of
    the private total; the third sector is implied by composition. `clamped`
    marks inputs that hit the proportion clamp before the logit.
    """

    q: int
    t: int
    m: int
    s: int
    y_logit: float
    var_logit: float
    clamped: bool = False


def delta_method_var(p: float, se: float) -> float:
    """First-order variance of logit(p-hat) given the proportion-scale SE."""
    return (se / (p * (1.0 - p))) ** 2


def _clamp(p: float) -> tuple[float, bool]:
    lo, hi = PROPORTION_CLAMP, 1.0 - PROPORTION_CLAMP
    if p < lo:
        return lo, True
    if p > hi:
        return hi, True
    return p, False


def _floored_se(p: float, se: float, n: int) -> float:
    if se > 0.0:
        return se
    binom = math.sqrt(p * (1.0 - p) / n) if n > 0 else 0.0
    return max(SE_FLOOR, binom)


def to_logit_obs(
    obs_group: Sequence[SurveyObservation],
    *,
    q: int = 0,
    t: int = 0,
    m: int = 0,
    strict: bool = False,
) -> list[LogitObservation]:
    """Transform the three sector rows of one (population, year, method) group.

    Emits the public-share row (s=1) and, when the private total is positive,
    the ratio row (s=2) for commercial-medical over total private. With
    ``strict`` a zero private total raises instead of dropping the ratio row.
    """
    by_sector = {o.sector: o for o in obs_group}
    if set(by_sector) != set(SECTOR_ORDER) or len(obs_group) != 3:
        raise ValueError("obs_group must hold exactly one row per sector")
    pub = by_sector[Sector.PUBLIC]
    cm = by_sector[Sector.COMMERCIAL_MEDICAL]
    oth = by_sector[Sector.OTHER]

    out = []
    p1, clamped1 = _clamp(pub.proportion)
    se1 = _floored_se(p1, pub.se, pub.n)
    out.append(
        LogitObservation(
            q=q,
            t=t,
            m=m,
            s=1,
            y_logit=float(logit(p1)),
            var_logit=delta_method_var(p1, se1),
            clamped=clamped1,
        )
    )

    private_total = cm.proportion + oth.proportion
    if private_total <= 0.0:
        msg = (
            f"private total is zero for {pub.country}/{pub.province}/"
            f"{pub.method.value}/{pub.avg_year}; ratio observation dropped"
        )
        if strict:
            raise DegenerateCompositionError(msg)
        warnings.warn(msg, DegenerateCompositionWarning)
        return out

    ratio, clamped2 = _clamp(cm.proportion / private_total)
    se_ratio = _floored_se(ratio, cm.se, cm.n) / private_total
    out.append(
        LogitObservation(
            q=q,
            t=t,
            m=m,
            s=2,
            y_logit=float(logit(ratio)),
            var_logit=delta_method_var(ratio, se_ratio),
            clamped=clamped2,
        )
    )
    return out


def collapse_duplicates(observations: Iterable[LogitObservation]) -> list[LogitObservation]:
    """Merge duplicate (q, t, m, s) rows by precision weighting.

    The merged value is the 1/var-weighted mean and the merged variance the
    pooled 1/sum(1/var); the result does not depend on input order.
    """
    groups: dict[tuple[int, int, int, int], list[LogitObservation]] = {}
    for obs in observations:
        groups.setdefault((obs.q, obs.t, obs.m, obs.s), []).append(obs)
    merged = []
    for key in sorted(groups):
        rows = groups[key]
        if len(rows) == 1:
            merged.append(rows[0])
            continue
        weights = np.array([1.0 / r.var_logit for r in rows])
        values = np.array([r.y_logit for r in rows])
        merged.append(
            LogitObservation(
                q=key[0],
                t=key[1],
                m=key[2],
                s=key[3],
                y_logit=float(np.dot(weights, values) / weights.sum()),
                var_logit=float(1.0 / weights.sum()),
                clamped=any(r.clamped for r in rows),
            )
        )
    return merged


# ---------------------------------------------------------------------------
# Geography loading


def _data_path(name: str) -> Path:
    return Path(str(resources.files("supplyshare.data") / name))


def load_geography(source=None) -> GeographyIndex:
    """Load a geography table (Country or area / ISO Code / Major area / Region / FP2020).

    `source` may be a path, the builtin tag "default" or "demo", or None for
    the builtin country classification.
    """
    if source is None or source == "default":
        path = _data_path("country_classification.csv")
    elif source == "demo":
        path = _data_path("demo_geography.csv")
    else:
        path = Path(source)
    if not path.exists():
        raise SchemaError(f"geography file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        headers = reader.fieldnames or []
        missing = [c for c in GEOGRAPHY_COLUMNS if c not in headers]
        if missing:
            raise SchemaError(f"geography file missing column(s): {', '.join(missing)}")
        subcon, iso, fp = {}, {}, {}
        for row in reader:
            name = _normalize_name(row["Country or area"])
            if not name:
                continue
            region = _normalize_name(row["Region"])
            if name in subcon and subcon[name] != region:
                raise SchemaError(f"country {name!r} mapped to two subcontinents")
            subcon[name] = region
            iso[name] = int(float(row["ISO Code"]))
            fp[name] = _normalize_name(row["FP2020"]).lower() in {"yes", "true", "1"}
    return GeographyIndex(subcontinent_of=subcon, iso_of=iso, fp2030_of=fp, provinces_of={})


# ---------------------------------------------------------------------------
# Survey-data ingestion


_BUILTIN_SURVEYS = {
    "demo_national": "demo_national.csv",
    "demo_subnational": "demo_subnational.csv",
}


def _parse_float(raw: str) -> float | None:
    token = raw.strip()
    if not token:
        return None
    return float(token)


def load_survey_data(
    path=None,
    *,
    national: bool = True,
    local: bool = False,
    mycountry: str | None = None,
    fp2030: bool = True,
    geography=None,
) -> CleanDataset:
    """Retrieve and validate survey data for the requested estimation setup.

    Parameters
    ----------
    path
        CSV path, a builtin tag ("demo_national", "demo_subnational"), or
        None to pick the builtin demo dataset for the chosen level.
    national
        True for national-level data (empty Region), False for subnational.
    local
        Restrict to a single country; requires `mycountry`.
    mycountry
        Country kept when `local` is set.
    fp2030
        Keep only countries participating in the FP2030 initiative.
    geography
        GeographyIndex, a path/tag for `load_geography`, or None to infer
        (demo geography for builtin demo data, the builtin classification
        otherwise).
    """
    builtin = None
    if path is None:
        builtin = "demo_national" if national else "demo_subnational"
    elif isinstance(path, str) and path in _BUILTIN_SURVEYS:
        builtin = path
    if builtin is not None:
        csv_path = _data_path(_BUILTIN_SURVEYS[builtin])
        source_label = builtin
        if geography is None:
            geography = "demo"
    else:
        csv_path = Path(path)
        source_label = str(path)
        if csv_path.suffix.lower() in {".xlsx", ".xls"}:
            raise SchemaError(
                "spreadsheet binaries are not parsed; export the sheet to CSV first"
            )
    if not csv_path.exists():
        raise SchemaError(f"survey file not found: {csv_path}")

    geo = geography if isinstance(geography, GeographyIndex) else load_geography(geography)

    if local:
        if mycountry is None:
            raise UnknownCountryError("local ingestion requires mycountry")
        resolved = geo.resolve_country(mycountry)
        if resolved is None:
            raise UnknownCountryError(f"unknown country for local ingestion: {mycountry!r}")
        mycountry = resolved

    report = IngestReport()
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        headers = list(reader.fieldnames or [])
        required = [c for c in SURVEY_COLUMNS if not (national and c == "Region")]
        missing = [c for c in required if c not in headers]
        if missing:
            raise SchemaError(f"survey file missing column(s): {', '.join(missing)}")
        extra = [c for c in headers if c not in SURVEY_COLUMNS]
        if extra:
            report.notes.append(f"ignored unexpected column(s): {', '.join(extra)}")

        bad_tokens: list[str] = []
        bad_ranges: list[str] = []
        unknown_countries: set[str] = set()
        rows: list[SurveyObservation] = []

        for lineno, raw in enumerate(reader, start=2):
            report.n_input_rows += 1
            country_raw = _normalize_name(raw["Country"] or "")
            if not country_raw:
                report.dropped_rows.append((lineno, "empty Country"))
                continue
            country = geo.resolve_country(country_raw)
            if country is None:
                unknown_countries.add(country_raw)
                continue

            region_raw = _normalize_name((raw.get("Region") or ""))
            if national and region_raw:
                bad_tokens.append(
                    f"row {lineno}: Region must be empty for national-level data "
                    f"(got {region_raw!r})"
                )
                continue
            if not national and not region_raw:
                bad_tokens.append(f"row {lineno}: Region is required for subnational data")
                continue
            province = region_raw or None

            method = _METHOD_LOOKUP.get(_normalize_name(raw["Method"]).lower())
            if method is None:
                bad_tokens.append(f"row {lineno}: unknown Method {raw['Method']!r}")
                continue
            sector = _SECTOR_LOOKUP.get((raw["sector_categories"] or "").strip())
            if sector is None:
                bad_tokens.append(
                    f"row {lineno}: unknown sector_categories {raw['sector_categories']!r}"
                )
                continue

            try:
                year = _parse_float(raw["average_year"])
                proportion = _parse_float(raw["proportion"])
                se = _parse_float(raw["SE.proportion"])
                n_raw = (raw["n"] or "").strip()
                n = int(float(n_raw)) if n_raw else 0
            except ValueError:
                bad_tokens.append(f"row {lineno}: non-numeric value")
                continue

            if year is None:
                report.dropped_rows.append((lineno, "missing average_year"))
                continue
            if proportion is None:
                report.dropped_rows.append((lineno, "missing proportion"))
                continue
            if se is None:
                se = 0.0
                report.notes.append(f"row {lineno}: missing SE set to 0 (floor applies)")
            if not YEAR_WINDOW[0] <= year <= YEAR_WINDOW[1]:
                bad_ranges.append(
                    f"row {lineno}: average_year {year} outside "
                    f"[{YEAR_WINDOW[0]}, {YEAR_WINDOW[1]}]"
                )
                continue
            if not 0.0 <= proportion <= 1.0:
                bad_ranges.append(f"row {lineno}: proportion {proportion} outside [0, 1]")
                continue
            if se < 0.0:
                bad_ranges.append(f"row {lineno}: SE.proportion {se} is negative")
                continue
            if n < 0:
                bad_ranges.append(f"row {lineno}: n {n} is negative")
                continue

            rows.append(
                SurveyObservation(
                    country=country,
                    province=province,
                    method=method,
                    avg_year=year,
                    sector=sector,
                    proportion=proportion,
                    se=se,
                    n=n,
                )
            )

    if bad_tokens:
        raise SchemaError("; ".join(bad_tokens))
    if bad_ranges:
        raise RangeError("; ".join(bad_ranges))
    if unknown_countries:
        names = ", ".join(sorted(unknown_countries))
        raise UnknownCountryError(f"country name(s) not in the geography index: {names}")

    if fp2030:
        rows = [o for o in rows if geo.fp2030_of[o.country]]
    if local:
        rows = [o for o in rows if o.country == mycountry]

    observations = _validate_groups(rows, report)
    observations.sort(key=SurveyObservation.sort_key)
    report.n_kept = len(observations)

    kept_countries = {o.country for o in observations}
    provinces: dict[str, list[str]] = {}
    if not national:
        for o in observations:
            provinces.setdefault(o.country, []).append(o.province)
    geo_out = geo.restrict(kept_countries).with_provinces(
        {c: provinces.get(c, []) for c in kept_countries}
    )

    settings = IngestSettings(
        national=national,
        local=local,
        mycountry=mycountry,
        fp2030=fp2030,
        source=source_label,
    )
    return CleanDataset(
        observations=tuple(observations),
        geography=geo_out,
        settings=settings,
        report=report,
    )


def _validate_groups(
    rows: list[SurveyObservation], report: IngestReport
) -> list[SurveyObservation]:
    """Keep only complete sector triples whose proportions sum to one."""
    groups: dict[tuple, list[SurveyObservation]] = {}
    for o in rows:
        groups.setdefault((o.country, o.province, o.method, o.avg_year), []).append(o)
    kept: list[SurveyObservation] = []
    for key in sorted(groups, key=lambda k: (k[0], k[1] or "", k[2].value, k[3])):
        group = groups[key]
        label = f"{key[0]}/{key[1] or '-'}/{key[2].value}/{key[3]}"
        sectors = [o.sector for o in group]
        if sorted(s.value for s in sectors) != sorted(s.value for s in SECTOR_ORDER):
            reason = (
                "duplicate sector rows" if len(sectors) > len(set(sectors)) else "incomplete sector triple"
            )
            report.rejected_groups.append((label, reason))
            continue
        total = sum(o.proportion for o in group)
        if abs(total - 1.0) > SECTOR_SUM_TOL:
            report.rejected_groups.append(
                (label, f"sector proportions sum to {total:.6f}, not 1")
            )
            continue
        kept.extend(group)
    return kept


# ---------------------------------------------------------------------------
# Model-input assembly


@dataclass(frozen=True)
class ModelInputs:
    """Everything the samplers need: bases, logit observations, index maps."""

    level: str
    populations: tuple[str, ...]
    methods: tuple[Method, ...]
    bases: tuple[BasisMatrix, ...]
    observations: tuple[LogitObservation, ...]
    geography: GeographyIndex
    c_of_q: np.ndarray
    r_of_c: np.ndarray
    start_year: float
    end_year: float
    nsegments: int
    settings: IngestSettings
    survey_years: tuple[tuple[float, ...], ...]

    @property
    def n_pop(self) -> int:
        return len(self.populations)

    @property
    def n_methods(self) -> int:
        return len(self.methods)

    @property
    def n_countries(self) -> int:
        return int(self.c_of_q.max()) + 1 if self.c_of_q.size else 0

    @property
    def n_subcontinents(self) -> int:
        return int(self.r_of_c.max()) + 1 if self.r_of_c.size else 0

    @property
    def n_coef(self) -> int:
        return self.bases[0].n_coef

    def t_stars(self) -> tuple[float, ...]:
        return tuple(b.t_star for b in self.bases)


def build_model_inputs(
    dataset: CleanDataset,
    start_year: float = 1990.0,
    end_year: float = 2025.5,
    nsegments: int = 12,
) -> ModelInputs:
    """Assemble per-population bases and logit observations from clean data.

    Each population's basis is anchored at its most recent survey year.
    Observation years must lie on the half-year grid inside the window.
    """
    national = dataset.settings.national
    populations = dataset.populations()
    methods = dataset.methods()
    pop_index = {p: i for i, p in enumerate(populations)}
    method_index = {m: i for i, m in enumerate(methods)}

    geo = dataset.geography
    if national:
        c_of_q = np.arange(len(populations), dtype=int)
        countries = populations
    else:
        countries = tuple(sorted({p.split("|")[0] for p in populations}))
        c_of_q = np.array([countries.index(p.split("|")[0]) for p in populations], dtype=int)
    r_of_c = np.array(
        [geo.subcon_index(geo.subcontinent_of[c]) for c in countries], dtype=int
    )

    by_pop: dict[str, list[SurveyObservation]] = {p: [] for p in populations}
    for o in dataset.observations:
        by_pop[dataset.population_of(o)].append(o)

    bases = []
    survey_years = []
    for p in populations:
        years = sorted({o.avg_year for o in by_pop[p]})
        if not years:
            raise WindowError(f"population {p} has no observations")
        for y in years:
            if not (start_year <= y <= end_year):
                raise WindowError(
                    f"observation year {y} for {p} outside the estimation window "
                    f"[{start_year}, {end_year}]"
                )
        bases.append(
            build_basis(start_year, end_year, nsegments, t_star=max(years)).with_population(p)
        )
        survey_years.append(tuple(years))

    logit_rows: list[LogitObservation] = []
    for p in populations:
        q = pop_index[p]
        groups: dict[tuple, list[SurveyObservation]] = {}
        for o in by_pop[p]:
            groups.setdefault((o.avg_year, o.method), []).append(o)
        for (year, method), group in sorted(
            groups.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
        ):
            t_idx = bases[q].grid_index(year)
            logit_rows.extend(
                to_logit_obs(group, q=q, t=t_idx, m=method_index[method])
            )

    return ModelInputs(
        level="national" if national else "subnational",
        populations=populations,
        methods=methods,
        bases=tuple(bases),
        observations=tuple(collapse_duplicates(logit_rows)),
        geography=geo,
        c_of_q=c_of_q,
        r_of_c=r_of_c,
        start_year=float(start_year),
        end_year=float(end_year),
        nsegments=int(nsegments),
        settings=dataset.settings,
        survey_years=tuple(survey_years),
    )
