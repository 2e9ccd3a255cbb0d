"""Out-of-sample validation and model-comparison reporting.

Held-out survey groups are scored against the posterior predictive: latent
draws at the held-out year get observation noise on the logit scale, are
composed back to the three sector shares, and the median and central 95%
prediction interval of each share are compared with the held-out value.
All reported metrics are in percentage points.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data_model import SECTOR_ORDER, CleanDataset, IngestReport, to_logit_obs
from .errors import IngestWarning
from .errors import (
    ConfigError,
    GridMismatchError,
    InsufficientDataError,
    TestSetMismatchError,
)
from .model_core import compose_phi, difference_matrix, beta_tensor
from .posterior_summary import PosteriorSummary
from .sampler import ChainOutput
from .spline_basis import eval_basis

SECTOR_LABELS = tuple(s.value for s in SECTOR_ORDER)


# ---------------------------------------------------------------------------
# Elementary error metrics (unit-agnostic)


def rmse(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(errors**2)))


def mean_error(errors) -> float:
    return float(np.mean(np.asarray(errors, dtype=float)))


def median_abs_error(errors) -> float:
    return float(np.median(np.abs(np.asarray(errors, dtype=float))))


# ---------------------------------------------------------------------------
# Holdout splitting


def holdout_split(
    dataset: CleanDataset,
    rule: str = "leave_last_survey",
    fraction: float = 0.2,
    seed: int = 0,
) -> tuple[CleanDataset, CleanDataset]:
    """Partition survey groups into train and test.

    ``leave_last_survey`` holds out each population's most recent survey
    year; ``random_fraction`` holds out a seeded fraction of survey years.
    Populations with a single survey stay entirely in training (with a
    warning) so every population remains fittable.
    """
    if rule not in ("leave_last_survey", "random_fraction"):
        raise ConfigError(f"unknown holdout rule {rule!r}")
    years_by_pop: dict[str, set] = {}
    for o in dataset.observations:
        years_by_pop.setdefault(dataset.population_of(o), set()).add(o.avg_year)

    test_keys: set[tuple[str, float]] = set()
    rng = np.random.default_rng(seed)
    for pop in sorted(years_by_pop):
        years = sorted(years_by_pop[pop])
        if len(years) < 2:
            warnings.warn(
                f"population {pop} has a single survey; excluded from the test set",
                IngestWarning,
            )
            continue
        if rule == "leave_last_survey":
            test_keys.add((pop, years[-1]))
        else:
            n_test = min(max(1, int(round(fraction * len(years)))), len(years) - 1)
            chosen = rng.choice(len(years), size=n_test, replace=False)
            test_keys.update((pop, years[i]) for i in chosen)
    if not test_keys:
        raise InsufficientDataError("no population has two surveys to split")

    train_rows, test_rows = [], []
    for o in dataset.observations:
        key = (dataset.population_of(o), o.avg_year)
        (test_rows if key in test_keys else train_rows).append(o)

    def rebuild(rows):
        return CleanDataset(
            observations=tuple(rows),
            geography=dataset.geography,
            settings=dataset.settings,
            report=IngestReport(n_input_rows=len(rows), n_kept=len(rows)),
        )

    return rebuild(train_rows), rebuild(test_rows)


# ---------------------------------------------------------------------------
# Posterior-predictive scoring


@dataclass
class PredictiveChecks:
    """Per held-out sector share: observed value, predictive summary, error."""

    keys: list[tuple[str, float, str, str]] = field(default_factory=list)
    observed: list[float] = field(default_factory=list)
    predicted: list[float] = field(default_factory=list)
    lower: list[float] = field(default_factory=list)
    upper: list[float] = field(default_factory=list)

    def add(self, key, y, y_hat, lo, hi):
        self.keys.append(key)
        self.observed.append(y)
        self.predicted.append(y_hat)
        self.lower.append(lo)
        self.upper.append(hi)

    @property
    def errors(self) -> np.ndarray:
        return np.asarray(self.observed) - np.asarray(self.predicted)

    def sector_index(self) -> np.ndarray:
        return np.array([SECTOR_LABELS.index(k[3]) for k in self.keys])

    def fingerprint(self) -> str:
        text = ";".join(f"{k[0]}|{k[1]}|{k[2]}|{k[3]}" for k in sorted(self.keys))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def predictive_errors(
    output: ChainOutput, test: CleanDataset, seed: int = 0
) -> PredictiveChecks:
    """Score held-out survey groups against the posterior predictive.

    Predictive draws add observation noise (the held-out group's own
    logit-scale variances) before composing back to the sector shares; the
    point prediction is the predictive median on the proportion scale.
    """
    inputs = output.inputs
    pop_index = {p: i for i, p in enumerate(inputs.populations)}
    method_index = {m: i for i, m in enumerate(inputs.methods)}
    rng = np.random.default_rng(seed)
    checks = PredictiveChecks()

    groups: dict[tuple, list] = {}
    for o in test.observations:
        pop = test.population_of(o)
        groups.setdefault((pop, o.avg_year, o.method), []).append(o)

    beta = None
    beta_cache: dict[int, np.ndarray] = {}
    for (pop, year, method), rows in sorted(
        groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2].value)
    ):
        if pop not in pop_index:
            raise ConfigError(f"test population {pop!r} was not fitted")
        if method not in method_index:
            raise ConfigError(f"test method {method.value!r} was not fitted")
        q = pop_index[pop]
        m = method_index[method]
        if q not in beta_cache:
            basis = inputs.bases[q]
            diff = difference_matrix(basis.n_coef, basis.k_star)
            alpha = output.stacked("alpha")[:, q]
            delta = output.stacked("delta")[:, q]
            beta_cache[q] = beta_tensor(alpha, delta, diff)  # (D, M, 2, K)
        beta = beta_cache[q]
        row = eval_basis(inputs.bases[q], year)
        psi = np.einsum("dsk,k->ds", beta[:, m], row)  # (D, 2)

        logit_rows = to_logit_obs(rows)
        var1 = logit_rows[0].var_logit
        var2 = logit_rows[1].var_logit if len(logit_rows) > 1 else None
        d = psi.shape[0]
        noise1 = rng.normal(0.0, np.sqrt(var1), size=d)
        noise2 = rng.normal(0.0, np.sqrt(var2), size=d) if var2 is not None else 0.0
        phi = compose_phi(psi[:, 0] + noise1, psi[:, 1] + noise2)  # (D, 3)

        by_sector = {o.sector: o for o in rows}
        for s, sector in enumerate(SECTOR_ORDER):
            draws = phi[:, s]
            checks.add(
                (pop, year, method.value, sector.value),
                by_sector[sector].proportion,
                float(np.median(draws)),
                float(np.quantile(draws, 0.025)),
                float(np.quantile(draws, 0.975)),
            )
    return checks


# ---------------------------------------------------------------------------
# Report assembly


@dataclass(frozen=True)
class ValidationReport:
    """Per-sector accuracy and calibration metrics, in percentage points."""

    coverage95: np.ndarray
    rmse: np.ndarray
    prop_above: np.ndarray
    prop_below: np.ndarray
    median_pi_width95: np.ndarray
    mean_error: np.ndarray
    median_abs_error: np.ndarray
    n_test: np.ndarray
    fingerprint: str = ""

    COLUMNS = (
        "sector",
        "coverage95",
        "rmse",
        "above",
        "below",
        "pi_width95",
        "mean_error",
        "median_abs_error",
    )

    def row(self, s: int) -> list:
        return [
            SECTOR_LABELS[s],
            self.coverage95[s],
            self.rmse[s],
            self.prop_above[s],
            self.prop_below[s],
            self.median_pi_width95[s],
            self.mean_error[s],
            self.median_abs_error[s],
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for s in range(len(SECTOR_LABELS)):
                writer.writerow(
                    [self.row(s)[0]] + [repr(float(v)) for v in self.row(s)[1:]]
                )

    def to_text(self) -> str:
        header = (
            f"{'Sector':<20}{'95% cov':>9}{'RMSE':>8}{'Above':>8}{'Below':>8}"
            f"{'PI width':>10}{'Mean err':>10}{'MAE':>8}"
        )
        lines = [header, "-" * len(header)]
        for s in range(len(SECTOR_LABELS)):
            r = self.row(s)
            lines.append(
                f"{r[0]:<20}{r[1]:>9.1f}{r[2]:>8.2f}{r[3]:>8.2f}{r[4]:>8.2f}"
                f"{r[5]:>10.1f}{r[6]:>10.2f}{r[7]:>8.2f}"
            )
        lines.append(f"(test-set sizes: {', '.join(str(int(n)) for n in self.n_test)})")
        return "\n".join(lines)


def metrics(checks: PredictiveChecks) -> ValidationReport:
    """Assemble the per-sector report from predictive checks (percent units)."""
    sectors = checks.sector_index()
    observed = np.asarray(checks.observed)
    lower = np.asarray(checks.lower)
    upper = np.asarray(checks.upper)
    errors = checks.errors

    n_sec = len(SECTOR_LABELS)
    out = {
        name: np.zeros(n_sec)
        for name in (
            "coverage95",
            "rmse",
            "prop_above",
            "prop_below",
            "median_pi_width95",
            "mean_error",
            "median_abs_error",
            "n_test",
        )
    }
    for s in range(n_sec):
        sel = sectors == s
        if not np.any(sel):
            continue
        y, lo, hi, e = observed[sel], lower[sel], upper[sel], errors[sel]
        inside = (y >= lo) & (y <= hi)
        out["coverage95"][s] = 100.0 * inside.mean()
        out["prop_above"][s] = 100.0 * (y > hi).mean()
        out["prop_below"][s] = 100.0 * (y < lo).mean()
        out["rmse"][s] = 100.0 * rmse(e)
        out["mean_error"][s] = 100.0 * mean_error(e)
        out["median_abs_error"][s] = 100.0 * median_abs_error(e)
        out["median_pi_width95"][s] = 100.0 * float(np.median(hi - lo))
        out["n_test"][s] = sel.sum()
    return ValidationReport(fingerprint=checks.fingerprint(), **out)


def compare_models(report_a: ValidationReport, report_b: ValidationReport):
    """Side-by-side per-sector table with deltas (a minus b)."""
    if report_a.fingerprint != report_b.fingerprint:
        raise TestSetMismatchError("reports were built from different test sets")
    rows = []
    for s in range(len(SECTOR_LABELS)):
        a, b = report_a.row(s), report_b.row(s)
        rows.append(
            {
                "sector": SECTOR_LABELS[s],
                **{
                    f"{name}_a": a[i + 1]
                    for i, name in enumerate(ValidationReport.COLUMNS[1:])
                },
                **{
                    f"{name}_b": b[i + 1]
                    for i, name in enumerate(ValidationReport.COLUMNS[1:])
                },
                **{
                    f"{name}_delta": a[i + 1] - b[i + 1]
                    for i, name in enumerate(ValidationReport.COLUMNS[1:])
                },
            }
        )
    return rows


def write_comparison_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Single- versus multi-population agreement


def median_agreement(
    summary_single: PosteriorSummary,
    summary_multi: PosteriorSummary,
    band: float = 0.05,
) -> dict:
    """Fraction of grid cells whose medians agree within the band, per method.

    Grids must match exactly; restrict the multi-population summary to the
    single run's populations first.
    """
    if not summary_single.same_grid(summary_multi):
        raise GridMismatchError("summaries are not on the same (q, t, m, s) grid")
    close = np.abs(summary_single.median - summary_multi.median) <= band
    per_method = {
        method.value: float(close[:, :, m, :].mean())
        for m, method in enumerate(summary_single.methods)
    }
    per_method["overall"] = float(close.mean())
    return per_method


def export_paired_medians(
    summary_single: PosteriorSummary, summary_multi: PosteriorSummary, path
) -> None:
    """Scatter-ready pairs of medians for agreement plots."""
    if not summary_single.same_grid(summary_multi):
        raise GridMismatchError("summaries are not on the same (q, t, m, s) grid")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["population", "year", "method", "sector", "single", "multi"])
        for q, pop in enumerate(summary_single.populations):
            for t, year in enumerate(summary_single.years):
                for m, method in enumerate(summary_single.methods):
                    for s, sector in enumerate(SECTOR_ORDER):
                        writer.writerow(
                            [
                                pop,
                                repr(float(year)),
                                method.value,
                                sector.value,
                                repr(float(summary_single.median[q, t, m, s])),
                                repr(float(summary_multi.median[q, t, m, s])),
                            ]
                        )
