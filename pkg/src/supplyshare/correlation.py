"""Two-stage estimation of cross-method correlations in rates of change.

Stage one fits the zero-covariance variant (diagonal delta covariance) and
keeps the posterior medians of every rate of change. Stage two turns those
medians into a through-origin correlation matrix per sector, restricted to
the knot intervals each population actually observed, and the result feeds
the cross-method variant as a fixed correlation structure.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import Method, ModelInputs
from .errors import ConfigError, EmptySupportError
from .model_core import (
    N_LATENT,
    CrossMethod,
    FixedGlobal,
    ModelSpec,
    SectorCovariance,
    ZeroCovariance,
)
from .sampler import ChainOutput, SamplerConfig, run_chains
from .spline_basis import greville_sites

POOLINGS = ("by_country", "by_province")


@dataclass(frozen=True)
class DeltaMedians:
    """Posterior medians of the rates of change from a zero-covariance run."""

    delta_med: np.ndarray          # (Q, M, 2, H)
    mask: np.ndarray               # (Q, H) data-support flags
    sigma_med: np.ndarray          # (M, 2) medians of the delta scales
    methods: tuple[Method, ...]
    populations: tuple[str, ...]


def data_support_mask(inputs: ModelInputs) -> np.ndarray:
    """True where knot interval h overlaps [first, last] survey year of q.

    Interval h spans the characteristic abscissae of the two coefficients
    that difference h connects.
    """
    h_count = inputs.n_coef - 1
    mask = np.zeros((inputs.n_pop, h_count), dtype=bool)
    for q in range(inputs.n_pop):
        sites = greville_sites(inputs.bases[q])
        first, last = min(inputs.survey_years[q]), max(inputs.survey_years[q])
        for h in range(h_count):
            lo, hi = sites[h], sites[h + 1]
            mask[q, h] = hi >= first and lo <= last
    return mask


def fit_zero_covariance(
    spec: ModelSpec,
    inputs: ModelInputs,
    config: SamplerConfig,
    monitor: tuple[str, ...] | None = None,
) -> tuple[DeltaMedians, ChainOutput]:
    """Stage one: fit with a diagonal delta covariance and keep the medians."""
    if not isinstance(spec.correlation, ZeroCovariance):
        raise ConfigError("stage one requires a zero-covariance spec")
    output = run_chains(spec, inputs, config, monitor=monitor)
    delta_med = np.median(output.stacked("delta"), axis=0)
    sigma_med = np.median(output.stacked("sigma_delta"), axis=0)
    medians = DeltaMedians(
        delta_med=delta_med,
        mask=data_support_mask(inputs),
        sigma_med=sigma_med,
        methods=inputs.methods,
        populations=inputs.populations,
    )
    return medians, output


def rho_hat(
    medians: DeltaMedians,
    sector: int,
    pooling: str = "by_country",
    on_empty: str = "identity",
) -> np.ndarray:
    """Through-origin correlation of masked rate-of-change medians.

    ``sector`` is 1 or 2 (latent sector). ``pooling`` names the population
    granularity of the medians (countries for national runs, provinces for
    subnational ones); the estimator itself sums over whatever populations the
    stage-one run used. A method with no mass inside the mask gets an identity
    row/column (with a warning) unless ``on_empty="raise"``.
    """
    if sector not in (1, 2):
        raise ConfigError("sector must be 1 or 2")
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}")
    values = medians.delta_med[:, :, sector - 1, :]  # (Q, M, H)
    masked = values * medians.mask[:, None, :]
    gram = np.einsum("qih,qjh->ij", masked, masked)
    norms = np.sqrt(np.diag(gram))
    empty = norms == 0.0
    if np.any(empty):
        names = ", ".join(medians.methods[i].value for i in np.nonzero(empty)[0])
        message = f"no masked rate-of-change mass for method(s): {names}"
        if on_empty == "raise":
            raise EmptySupportError(message)
        warnings.warn(message, UserWarning)
    safe = np.where(empty, 1.0, norms)
    rho = gram / np.outer(safe, safe)
    rho[empty, :] = 0.0
    rho[:, empty] = 0.0
    np.fill_diagonal(rho, 1.0)
    return np.clip(rho, -1.0, 1.0)


def assemble_sigma(rho: np.ndarray, sigma: np.ndarray, sector: int = 1) -> SectorCovariance:
    """Covariance rho[i,j]*sigma[i]*sigma[j] with a cached (jittered) Cholesky."""
    return SectorCovariance.assemble(rho, sigma, sector=sector)


def cross_method_from_medians(medians: DeltaMedians, pooling: str = "by_country") -> CrossMethod:
    return CrossMethod(
        rho=tuple(rho_hat(medians, sector=s + 1, pooling=pooling) for s in range(N_LATENT))
    )


def fixed_global_from_medians(medians: DeltaMedians, pooling: str = "by_country") -> FixedGlobal:
    """Fully fixed covariance from stage-one medians (single-population runs)."""
    covs = []
    for s in range(N_LATENT):
        rho = rho_hat(medians, sector=s + 1, pooling=pooling)
        covs.append(assemble_sigma(rho, medians.sigma_med[:, s], sector=s + 1).matrix)
    return FixedGlobal(sigma=tuple(covs))


# ---------------------------------------------------------------------------
# CSV import/export (method-name headers, one file per latent sector)


def _write_matrix(path, matrix: np.ndarray, methods) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [m.value for m in methods])
        for i, m in enumerate(methods):
            writer.writerow([m.value] + [repr(float(v)) for v in matrix[i]])


def _read_matrix(path, methods) -> np.ndarray:
    methods = tuple(methods)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = header[1:]
        if [n.lower() for n in names] != [m.value.lower() for m in methods]:
            raise ConfigError(
                f"{path}: method columns {names} do not match the model roster"
            )
        rows = {row[0].lower(): [float(v) for v in row[1:]] for row in reader}
    out = np.empty((len(methods), len(methods)))
    for i, m in enumerate(methods):
        if m.value.lower() not in rows:
            raise ConfigError(f"{path}: missing row for method {m.value!r}")
        out[i] = rows[m.value.lower()]
    return out


def export_correlations(directory, mode: CrossMethod | FixedGlobal, methods) -> list[Path]:
    """Write per-sector matrices; rho_sector*.csv or sigma_sector*.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(mode, CrossMethod):
        stem, matrices = "rho", mode.rho
    else:
        stem, matrices = "sigma", mode.sigma
    for s in range(N_LATENT):
        path = directory / f"{stem}_sector{s + 1}.csv"
        _write_matrix(path, np.asarray(matrices[s]), methods)
        written.append(path)
    return written


def load_correlations(directory, methods) -> CrossMethod | FixedGlobal:
    """Load whichever per-sector matrices a directory holds (rho or sigma)."""
    directory = Path(directory)
    rho_paths = [directory / f"rho_sector{s + 1}.csv" for s in range(N_LATENT)]
    sigma_paths = [directory / f"sigma_sector{s + 1}.csv" for s in range(N_LATENT)]
    if all(p.exists() for p in rho_paths):
        return CrossMethod(rho=tuple(_read_matrix(p, methods) for p in rho_paths))
    if all(p.exists() for p in sigma_paths):
        return FixedGlobal(sigma=tuple(_read_matrix(p, methods) for p in sigma_paths))
    raise ConfigError(
        f"{directory} holds neither rho_sector*.csv nor sigma_sector*.csv for both sectors"
    )
