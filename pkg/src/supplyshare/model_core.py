"""Model definitions: parameter state, priors, likelihood, and the composition map.

Four variants share one parameterization. Each population q, method m, and
latent sector s (public share, and commercial-medical share of the private
total) gets a spline coefficient vector built from an anchor level ``alpha``
at the knot nearest the latest survey and first-order differences ``delta``
between adjacent coefficients. ``alpha`` is pooled geographically; ``delta``
vectors are shrunk toward zero with a cross-method covariance per sector.

Variants:
  multi-country national     alpha_c <- theta_subcontinent <- theta_world
  multi-country subnational  alpha_p <- alpha_c <- theta_subcontinent <- theta_world
  single-country (either)    alpha fixed-parameter normal prior, covariance fixed
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import expit

from .data_model import METHOD_ORDER, LogitObservation, Method, ModelInputs
from .errors import ConfigError, SPDError
from .spline_basis import BasisMatrix

N_SECTORS = 3
N_LATENT = 2
THETA_WORLD_SD = 10.0
SIGMA_DELTA_UPPER = 10.0

LOG_2PI = math.log(2.0 * math.pi)


class Level(enum.Enum):
    NATIONAL = "national"
    SUBNATIONAL = "subnational"


class Scope(enum.Enum):
    MULTI_COUNTRY = "multi"
    SINGLE_COUNTRY = "single"


# ---------------------------------------------------------------------------
# Correlation modes


@dataclass(frozen=True)
class ZeroCovariance:
    """Diagonal delta covariance: methods change independently."""


@dataclass(frozen=True)
class CrossMethod:
    """Fixed cross-method correlations per latent sector; scales sampled."""

    rho: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        for r in self.rho:
            _check_correlation(np.asarray(r, dtype=float))


@dataclass(frozen=True)
class FixedGlobal:
    """Fully fixed delta covariance per latent sector (single-population runs)."""

    sigma: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        for s in self.sigma:
            s = np.asarray(s, dtype=float)
            if s.ndim != 2 or s.shape[0] != s.shape[1]:
                raise ConfigError("fixed covariance must be square")
            if not np.allclose(s, s.T, atol=1e-10):
                raise ConfigError("fixed covariance must be symmetric")


CorrelationMode = ZeroCovariance | CrossMethod | FixedGlobal


def _check_correlation(r: np.ndarray) -> None:
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ConfigError("correlation matrix must be square")
    if not np.allclose(np.diag(r), 1.0, atol=1e-8):
        raise ConfigError("correlation matrix must have unit diagonal")
    if not np.allclose(r, r.T, atol=1e-10):
        raise ConfigError("correlation matrix must be symmetric")
    if np.any(np.abs(r) > 1.0 + 1e-10):
        raise ConfigError("correlations must lie in [-1, 1]")


# ---------------------------------------------------------------------------
# Informative priors (single-population variants)


@dataclass(frozen=True)
class InformativePriors:
    """Fixed normal priors on alpha extracted from a multi-population run.

    ``loc``/``scale`` have shape (M, 2): one entry per method and latent
    sector, taken at the parent geographic level of the target population.
    """

    level_name: str
    methods: tuple[Method, ...]
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.loc, dtype=float)
        scale = np.asarray(self.scale, dtype=float)
        if loc.shape != (len(self.methods), N_LATENT) or scale.shape != loc.shape:
            raise ConfigError("informative priors must have shape (n_methods, 2)")
        if np.any(~np.isfinite(loc)) or np.any(scale <= 0):
            raise ConfigError("informative priors need finite locations and positive scales")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level_name", "method", "sector", "location", "scale"])
            for i, m in enumerate(self.methods):
                for s in range(N_LATENT):
                    writer.writerow(
                        [
                            self.level_name,
                            m.value,
                            s + 1,
                            repr(float(self.loc[i, s])),
                            repr(float(self.scale[i, s])),
                        ]
                    )

    @classmethod
    def from_csv(cls, path, methods: Sequence[Method]) -> "InformativePriors":
        methods = tuple(methods)
        index = {(m.value.lower(), s + 1): (i, s) for i, m in enumerate(methods) for s in range(N_LATENT)}
        loc = np.full((len(methods), N_LATENT), np.nan)
        scale = np.full((len(methods), N_LATENT), np.nan)
        level_name = ""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            needed = {"level_name", "method", "sector", "location", "scale"}
            if not needed.issubset(set(reader.fieldnames or [])):
                raise ConfigError(f"prior file {path} missing columns {sorted(needed)}")
            for row in reader:
                key = (row["method"].strip().lower(), int(row["sector"]))
                if key not in index:
                    continue
                i, s = index[key]
                loc[i, s] = float(row["location"])
                scale[i, s] = float(row["scale"])
                level_name = row["level_name"]
        if np.any(np.isnan(loc)):
            raise ConfigError(f"prior file {path} does not cover every (method, sector)")
        return cls(level_name=level_name, methods=methods, loc=loc, scale=scale)


# ---------------------------------------------------------------------------
# Model specification


@dataclass(frozen=True)
class ModelSpec:
    """Which variant to fit, over what window, with what delta covariance."""

    level: Level
    scope: Scope
    start_year: float = 1990.0
    end_year: float = 2025.5
    nsegments: int = 12
    methods: tuple[Method, ...] = METHOD_ORDER
    correlation: CorrelationMode = field(default_factory=ZeroCovariance)
    priors: InformativePriors | None = None

    def __post_init__(self):
        if self.nsegments < 4:
            raise ConfigError("nsegments must be >= 4")
        if not self.start_year < self.end_year:
            raise ConfigError("start_year must precede end_year")
        single = self.scope is Scope.SINGLE_COUNTRY
        fixed = isinstance(self.correlation, FixedGlobal)
        if fixed and not single:
            raise ConfigError("a fully fixed covariance is only for single-population runs")
        if single and not fixed:
            raise ConfigError("single-population runs fix the delta covariance")
        if single:
            if self.priors is None:
                raise ConfigError("single-population runs need informative priors")
            if tuple(self.priors.methods) != tuple(self.methods):
                raise ConfigError("informative priors must cover the model's methods")
        elif self.priors is not None:
            raise ConfigError("informative priors are only for single-population runs")
        m = len(self.methods)
        if isinstance(self.correlation, CrossMethod):
            for r in self.correlation.rho:
                if np.asarray(r).shape != (m, m):
                    raise ConfigError("correlation matrices must be (M, M)")
        if isinstance(self.correlation, FixedGlobal):
            for s in self.correlation.sigma:
                if np.asarray(s).shape != (m, m):
                    raise ConfigError("fixed covariances must be (M, M)")

    @property
    def n_methods(self) -> int:
        return len(self.methods)

    @property
    def n_coef(self) -> int:
        return self.nsegments + 3

    def samples_sigma_delta(self) -> bool:
        return not isinstance(self.correlation, FixedGlobal)

    def sigma_delta_prior(self) -> str:
        return "uniform" if self.level is Level.NATIONAL else "half_cauchy"


@dataclass(frozen=True)
class HierarchyMaps:
    """Dense index maps population -> country -> subcontinent."""

    c_of_q: np.ndarray
    r_of_c: np.ndarray

    @classmethod
    def from_inputs(cls, inputs: ModelInputs) -> "HierarchyMaps":
        return cls(c_of_q=inputs.c_of_q, r_of_c=inputs.r_of_c)

    @property
    def n_pop(self) -> int:
        return len(self.c_of_q)

    @property
    def n_countries(self) -> int:
        return int(self.c_of_q.max()) + 1 if self.c_of_q.size else 0

    @property
    def n_subcontinents(self) -> int:
        return int(self.r_of_c.max()) + 1 if self.r_of_c.size else 0


# ---------------------------------------------------------------------------
# Parameter state


@dataclass
class ParameterState:
    """All sampled quantities for one MCMC state.

    ``alpha`` is indexed by country in national models and by province in
    subnational ones; fields that a variant does not sample stay None.
    """

    alpha: np.ndarray                        # (Q, M, 2)
    delta: np.ndarray                        # (Q, M, 2, K-1)
    alpha_country: np.ndarray | None = None  # (C, M, 2)
    theta_sub: np.ndarray | None = None      # (R, M, 2)
    theta_world: np.ndarray | None = None    # (M, 2)
    sigma_alpha_c: np.ndarray | None = None  # (2,)
    sigma_alpha_p: np.ndarray | None = None  # (2,)
    sigma_theta: np.ndarray | None = None    # (2,)
    sigma_delta: np.ndarray | None = None    # (M, 2)

    def copy(self) -> "ParameterState":
        def c(a):
            return None if a is None else a.copy()

        return ParameterState(
            alpha=self.alpha.copy(),
            delta=self.delta.copy(),
            alpha_country=c(self.alpha_country),
            theta_sub=c(self.theta_sub),
            theta_world=c(self.theta_world),
            sigma_alpha_c=c(self.sigma_alpha_c),
            sigma_alpha_p=c(self.sigma_alpha_p),
            sigma_theta=c(self.sigma_theta),
            sigma_delta=c(self.sigma_delta),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in (
            "alpha",
            "delta",
            "alpha_country",
            "theta_sub",
            "theta_world",
            "sigma_alpha_c",
            "sigma_alpha_p",
            "sigma_theta",
            "sigma_delta",
        ):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


# ---------------------------------------------------------------------------
# Sector covariance with cached Cholesky


@dataclass(frozen=True)
class SectorCovariance:
    """Cross-method delta covariance for one latent sector."""

    sector: int
    rho: np.ndarray
    sigma: np.ndarray
    matrix: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0

    @property
    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    @classmethod
    def assemble(cls, rho: np.ndarray, sigma: np.ndarray, sector: int = 1) -> "SectorCovariance":
        """Build rho[i,j]*sigma[i]*sigma[j] with a jittered-Cholesky fallback."""
        rho = np.asarray(rho, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0):
            raise ConfigError("sigma entries must be positive")
        _check_correlation(rho)
        matrix = rho * np.outer(sigma, sigma)
        chol, jitter = _chol_with_jitter(matrix)
        return cls(sector=sector, rho=rho, sigma=sigma, matrix=matrix, chol=chol, jitter=jitter)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, sector: int = 1) -> "SectorCovariance":
        matrix = np.asarray(matrix, dtype=float)
        sigma = np.sqrt(np.diag(matrix))
        if np.any(sigma <= 0):
            raise SPDError("covariance has a non-positive diagonal entry")
        rho = matrix / np.outer(sigma, sigma)
        np.fill_diagonal(rho, 1.0)
        chol, jitter = _chol_with_jitter(matrix)
        return cls(sector=sector, rho=rho, sigma=sigma, matrix=matrix, chol=chol, jitter=jitter)

    def mvn_logpdf_rows(self, rows: np.ndarray) -> float:
        """Sum of MVN(0, matrix) log-densities over the rows of an (N, M) array."""
        rows = np.atleast_2d(rows)
        n, m = rows.shape
        z = solve_triangular(self.chol, rows.T, lower=True)
        quad = float(np.sum(z * z))
        return -0.5 * (n * m * LOG_2PI + n * self.log_det + quad)


def _chol_with_jitter(matrix: np.ndarray, tries: int = 3) -> tuple[np.ndarray, float]:
    m = matrix.shape[0]
    jitter = 0.0
    step = 1e-8 * float(np.trace(matrix)) / m
    for attempt in range(tries + 1):
        try:
            return cholesky(matrix + jitter * np.eye(m), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = step if jitter == 0.0 else jitter * 10.0
        except ValueError:
            jitter = step if jitter == 0.0 else jitter * 10.0
    raise SPDError(f"covariance not positive definite after {tries} jitter attempts")


def build_sector_covs(spec: ModelSpec, state: ParameterState) -> tuple[SectorCovariance, SectorCovariance]:
    """Per-sector covariances implied by the correlation mode and current state."""
    mode = spec.correlation
    if isinstance(mode, FixedGlobal):
        return tuple(
            SectorCovariance.from_matrix(mode.sigma[s], sector=s + 1) for s in range(N_LATENT)
        )
    if state.sigma_delta is None:
        raise ConfigError("state lacks sigma_delta but the mode samples it")
    covs = []
    for s in range(N_LATENT):
        sigma = state.sigma_delta[:, s]
        rho = (
            mode.rho[s]
            if isinstance(mode, CrossMethod)
            else np.eye(spec.n_methods)
        )
        covs.append(SectorCovariance.assemble(rho, sigma, sector=s + 1))
    return tuple(covs)


# ---------------------------------------------------------------------------
# Spline-coefficient algebra and the composition map


def beta_from(alpha: float, delta: np.ndarray, k_star: int) -> np.ndarray:
    """Spline coefficients from the anchor level and first-order differences.

    ``beta[k_star] = alpha``; walking down subtracts ``delta[k]``, walking up
    adds ``delta[k-1]`` (0-based; ``delta[h]`` is ``beta[h+1] - beta[h]``).
    """
    delta = np.asarray(delta, dtype=float)
    k = delta.shape[-1] + 1
    if not 0 <= k_star < k:
        raise ConfigError(f"k_star {k_star} outside [0, {k})")
    beta = np.empty(k)
    beta[k_star] = alpha
    for j in range(k_star - 1, -1, -1):
        beta[j] = beta[j + 1] - delta[j]
    for j in range(k_star + 1, k):
        beta[j] = beta[j - 1] + delta[j - 1]
    return beta


def difference_matrix(n_coef: int, k_star: int) -> np.ndarray:
    """Matrix C with ``beta = alpha + C @ delta`` for the anchored recursion."""
    c = np.zeros((n_coef, n_coef - 1))
    for k in range(n_coef):
        if k > k_star:
            c[k, k_star:k] = 1.0
        elif k < k_star:
            c[k, k:k_star] = -1.0
    return c


def beta_tensor(alpha: np.ndarray, delta: np.ndarray, diff: np.ndarray) -> np.ndarray:
    """Vectorized recursion: alpha (..., ), delta (..., H), diff (K, H) -> (..., K)."""
    return alpha[..., None] + np.einsum("kh,...h->...k", diff, delta)


def latent_psi(beta: np.ndarray, basis_row: np.ndarray) -> float:
    """Latent logit-scale value at one time: the coefficient/basis dot product."""
    beta = np.asarray(beta, dtype=float)
    basis_row = np.asarray(basis_row, dtype=float)
    if beta.shape != basis_row.shape:
        raise ConfigError("beta and basis row must have equal length")
    return float(np.dot(beta, basis_row))


def compose_phi(psi1, psi2) -> np.ndarray:
    """Map the two latent logits to the three-sector composition.

    phi1 is the public share, phi2 the commercial-medical share, and phi3 the
    remainder, defined by subtraction so each triple sums to one exactly.
    """
    phi1 = expit(np.asarray(psi1, dtype=float))
    phi2 = (1.0 - phi1) * expit(np.asarray(psi2, dtype=float))
    phi3 = 1.0 - (phi1 + phi2)
    return np.stack([phi1, phi2, phi3], axis=-1)


# ---------------------------------------------------------------------------
# Log densities


def _normal_logpdf(x, mean, sd) -> float:
    z = (np.asarray(x) - mean) / sd
    return float(np.sum(-0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z))


def half_cauchy_logpdf(x) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        return -np.inf
    return float(np.sum(math.log(2.0 / math.pi) - np.log1p(x * x)))


def uniform_logpdf(x, upper: float) -> float:
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or np.any(x >= upper):
        return -np.inf
    return -math.log(upper) * x.size


def log_prior(
    state: ParameterState,
    spec: ModelSpec,
    maps: HierarchyMaps | None = None,
    cov: Sequence[SectorCovariance] | None = None,
) -> float:
    """Joint log prior of a state under the given variant.

    Returns -inf whenever a scale parameter leaves its support. ``cov``
    overrides the per-sector delta covariances (otherwise they are built
    from the correlation mode and the state's own sigma_delta).
    """
    single = spec.scope is Scope.SINGLE_COUNTRY

    for sig in (state.sigma_alpha_c, state.sigma_alpha_p, state.sigma_theta, state.sigma_delta):
        if sig is not None and np.any(sig <= 0):
            return -np.inf
    if spec.samples_sigma_delta():
        if state.sigma_delta is None:
            raise ConfigError("variant samples sigma_delta but the state lacks it")
        if spec.sigma_delta_prior() == "uniform" and np.any(state.sigma_delta >= SIGMA_DELTA_UPPER):
            return -np.inf

    lp = 0.0

    if cov is None:
        cov = build_sector_covs(spec, state)
    m = spec.n_methods
    for s in range(N_LATENT):
        rows = state.delta[:, :, s, :].transpose(0, 2, 1).reshape(-1, m)
        lp += cov[s].mvn_logpdf_rows(rows)

    if single:
        assert spec.priors is not None
        lp += _normal_logpdf(state.alpha, spec.priors.loc, spec.priors.scale)
        return lp

    if maps is None:
        raise ConfigError("multi-population priors need hierarchy maps")

    if spec.level is Level.NATIONAL:
        parent = state.theta_sub[maps.r_of_c]            # (Q, M, 2)
        lp += _normal_logpdf(state.alpha, parent, state.sigma_alpha_c)
    else:
        parent_p = state.alpha_country[maps.c_of_q]      # (Q, M, 2)
        lp += _normal_logpdf(state.alpha, parent_p, state.sigma_alpha_p)
        parent_c = state.theta_sub[maps.r_of_c]          # (C, M, 2)
        lp += _normal_logpdf(state.alpha_country, parent_c, state.sigma_alpha_c)
        lp += half_cauchy_logpdf(state.sigma_alpha_p)

    lp += _normal_logpdf(state.theta_sub, state.theta_world, state.sigma_theta)
    lp += _normal_logpdf(state.theta_world, 0.0, THETA_WORLD_SD)
    lp += half_cauchy_logpdf(state.sigma_alpha_c)
    lp += half_cauchy_logpdf(state.sigma_theta)

    if spec.sigma_delta_prior() == "uniform":
        lp += uniform_logpdf(state.sigma_delta, SIGMA_DELTA_UPPER)
    else:
        lp += half_cauchy_logpdf(state.sigma_delta)

    return lp


def log_likelihood(
    state: ParameterState,
    data: Sequence[LogitObservation],
    bases: Sequence[BasisMatrix],
) -> float:
    """Sum of Normal log-densities of the logit observations at their latent means."""
    if not data:
        return 0.0
    betas = {}
    total = 0.0
    for obs in data:
        if obs.q not in betas:
            basis = bases[obs.q]
            diff = difference_matrix(basis.n_coef, basis.k_star)
            betas[obs.q] = beta_tensor(state.alpha[obs.q], state.delta[obs.q], diff)
        beta = betas[obs.q][obs.m, obs.s - 1]
        psi = float(np.dot(beta, bases[obs.q].values[obs.t]))
        z2 = (obs.y_logit - psi) ** 2 / obs.var_logit
        total += -0.5 * (LOG_2PI + math.log(obs.var_logit) + z2)
    return total


def log_posterior(
    state: ParameterState,
    spec: ModelSpec,
    maps: HierarchyMaps | None,
    data: Sequence[LogitObservation],
    bases: Sequence[BasisMatrix],
    cov: Sequence[SectorCovariance] | None = None,
) -> float:
    lp = log_prior(state, spec, maps, cov=cov)
    if not np.isfinite(lp):
        return -np.inf
    return lp + log_likelihood(state, data, bases)


# ---------------------------------------------------------------------------
# Derived quantities


def phi_grid_for_state(
    state: ParameterState, bases: Sequence[BasisMatrix]
) -> np.ndarray:
    """Composition on the year grid for every (q, t, m): shape (Q, T, M, 3)."""
    out = []
    for q, basis in enumerate(bases):
        diff = difference_matrix(basis.n_coef, basis.k_star)
        beta = beta_tensor(state.alpha[q], state.delta[q], diff)  # (M, 2, K)
        psi = np.einsum("msk,tk->mst", beta, basis.values)        # (M, 2, T)
        phi = compose_phi(psi[:, 0, :], psi[:, 1, :])             # (M, T, 3)
        out.append(np.moveaxis(phi, 0, 1))                        # (T, M, 3)
    return np.stack(out, axis=0)
