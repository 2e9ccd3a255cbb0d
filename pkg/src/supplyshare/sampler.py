"""Self-contained adaptive MCMC engine.

Random-walk Metropolis within Gibbs over the model's conditional-independence
structure: scalar sites for levels and (log-transformed) scales, cross-method
block sites for each rate-of-change vector, preconditioned by the Cholesky of
the current cross-method covariance. Proposal scales adapt in batches during
burn-in only and are frozen afterwards.

Chains are independent; each owns a counter-based generator stream keyed by
(seed, chain id), so results are reproducible regardless of scheduling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm, rankdata

from .data_model import ModelInputs
from .errors import (
    ConfigError,
    IngestWarning,
    InsufficientChainsError,
    NonConvergenceWarning,
    NumericalError,
)
from .model_core import (
    LOG_2PI,
    N_LATENT,
    SIGMA_DELTA_UPPER,
    THETA_WORLD_SD,
    CrossMethod,
    FixedGlobal,
    HierarchyMaps,
    Level,
    ModelSpec,
    ParameterState,
    Scope,
    SectorCovariance,
    beta_tensor,
    compose_phi,
    difference_matrix,
)

RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class SamplerConfig:
    """Chain-length and adaptation settings.

    The defaults retain (80000 - 10000) / 35 = 2000 draws per chain.
    """

    n_iter: int = 80000
    n_burnin: int = 10000
    n_thin: int = 35
    n_chains: int = 2
    seed: int = 0
    target_accept_scalar: float = 0.44
    target_accept_block: float = 0.234
    adapt_window: int = 50

    def __post_init__(self):
        if self.n_burnin < 0 or self.n_iter <= self.n_burnin:
            raise ConfigError("need n_iter > n_burnin >= 0")
        if self.n_thin < 1:
            raise ConfigError("n_thin must be >= 1")
        if (self.n_iter - self.n_burnin) % self.n_thin != 0:
            raise ConfigError(
                f"(n_iter - n_burnin) = {self.n_iter - self.n_burnin} is not a "
                f"multiple of n_thin = {self.n_thin}"
            )
        if self.n_chains < 1:
            raise ConfigError("n_chains must be >= 1")
        if self.adapt_window < 1:
            raise ConfigError("adapt_window must be >= 1")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.n_burnin) // self.n_thin


@dataclass
class DiagnosticRow:
    parameter: str
    rhat: float
    ess: float
    acceptance: float


@dataclass
class ChainOutput:
    """Retained draws plus adaptation and convergence bookkeeping."""

    draws: dict[str, np.ndarray]
    acceptance: dict[str, np.ndarray]
    scales_at_burnin: dict[str, np.ndarray]
    scales_at_end: dict[str, np.ndarray]
    config: SamplerConfig
    spec: ModelSpec
    inputs: ModelInputs
    monitor: tuple[str, ...]
    diagnostics_table: list[DiagnosticRow] = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.config.n_chains

    @property
    def n_keep(self) -> int:
        return self.config.n_keep

    @property
    def n_draws_total(self) -> int:
        return self.n_chains * self.n_keep

    def stacked(self, name: str) -> np.ndarray:
        """Draws of one parameter with chains concatenated: (C*n, ...)."""
        arr = self.draws[name]
        return arr.reshape((-1,) + arr.shape[2:])

    def state_at(self, chain: int, draw: int) -> ParameterState:
        def pick(name):
            return self.draws[name][chain, draw] if name in self.draws else None

        return ParameterState(
            alpha=self.draws["alpha"][chain, draw],
            delta=self.draws["delta"][chain, draw],
            alpha_country=pick("alpha_country"),
            theta_sub=pick("theta_sub"),
            theta_world=pick("theta_world"),
            sigma_alpha_c=pick("sigma_alpha_c"),
            sigma_alpha_p=pick("sigma_alpha_p"),
            sigma_theta=pick("sigma_theta"),
            sigma_delta=pick("sigma_delta"),
        )

    def phi_draws_for_population(self, q: int) -> np.ndarray:
        """Composition draws on the grid for one population: (C*n, T, M, 3)."""
        basis = self.inputs.bases[q]
        diff = difference_matrix(basis.n_coef, basis.k_star)
        alpha = self.stacked("alpha")[:, q]    # (D, M, 2)
        delta = self.stacked("delta")[:, q]    # (D, M, 2, H)
        beta = beta_tensor(alpha, delta, diff)  # (D, M, 2, K)
        psi = np.einsum("dmsk,tk->dmst", beta, basis.values)
        phi = compose_phi(psi[:, :, 0, :], psi[:, :, 1, :])  # (D, M, T, 3)
        return np.moveaxis(phi, 1, 2)

    def beta_draws(self) -> np.ndarray:
        """Spline-coefficient draws: (C*n, Q, M, 2, K)."""
        alpha = self.stacked("alpha")
        delta = self.stacked("delta")
        out = np.empty(alpha.shape[:1] + alpha.shape[1:] + (self.inputs.n_coef,))
        for q, basis in enumerate(self.inputs.bases):
            diff = difference_matrix(basis.n_coef, basis.k_star)
            out[:, q] = beta_tensor(alpha[:, q], delta[:, q], diff)
        return out


# ---------------------------------------------------------------------------
# Model-side precomputation


class _SectorData:
    """Observation arrays for one latent sector, gathered for vector sweeps."""

    def __init__(self, obs, bases, n_pop, n_methods):
        self.n = len(obs)
        self.y = np.array([o.y_logit for o in obs])
        self.var = np.array([o.var_logit for o in obs])
        self.q_idx = np.array([o.q for o in obs], dtype=int)
        self.m_idx = np.array([o.m for o in obs], dtype=int)
        k = bases[0].n_coef if bases else 0
        self.x = np.zeros((self.n, k))
        for i, o in enumerate(obs):
            self.x[i] = bases[o.q].values[o.t]
        self.qm_flat = self.q_idx * n_methods + self.m_idx
        self.logvar = np.log(self.var) if self.n else self.var
        if self.n and (
            not np.all(np.isfinite(self.y))
            or not np.all(np.isfinite(self.var))
            or np.any(self.var <= 0)
        ):
            raise NumericalError("non-finite or non-positive observation variance")


class _ModelData:
    """Shared immutable context: index maps, basis products, prior wiring."""

    def __init__(self, spec: ModelSpec, inputs: ModelInputs):
        if tuple(spec.methods) != tuple(inputs.methods):
            raise ConfigError("spec and inputs disagree on the method roster")
        if spec.nsegments != inputs.nsegments:
            raise ConfigError("spec and inputs disagree on nsegments")
        if (spec.start_year, spec.end_year) != (inputs.start_year, inputs.end_year):
            raise ConfigError("spec and inputs disagree on the estimation window")
        expected_level = Level.NATIONAL if inputs.level == "national" else Level.SUBNATIONAL
        if spec.level is not expected_level:
            raise ConfigError("spec level does not match the ingested data level")

        self.spec = spec
        self.inputs = inputs
        self.maps = HierarchyMaps.from_inputs(inputs)
        self.n_pop = inputs.n_pop
        self.n_methods = inputs.n_methods
        self.n_coef = inputs.n_coef
        self.n_diff = self.n_coef - 1
        self.diff = np.stack(
            [difference_matrix(b.n_coef, b.k_star) for b in inputs.bases]
        )  # (Q, K, H)
        self.sectors = tuple(
            _SectorData(
                [o for o in inputs.observations if o.s == s + 1],
                inputs.bases,
                self.n_pop,
                self.n_methods,
            )
            for s in range(N_LATENT)
        )
        self.multi = spec.scope is Scope.MULTI_COUNTRY
        self.subnational = spec.level is Level.SUBNATIONAL
        if isinstance(spec.correlation, FixedGlobal):
            covs = tuple(
                SectorCovariance.from_matrix(spec.correlation.sigma[s], sector=s + 1)
                for s in range(N_LATENT)
            )
            self.chol_rho = tuple(c.chol / c.sigma[:, None] for c in covs)
            self.fixed_sigma = tuple(c.sigma for c in covs)
            self.logdet_rho = tuple(
                2.0 * float(np.sum(np.log(np.diag(cr)))) for cr in self.chol_rho
            )
        else:
            if isinstance(spec.correlation, CrossMethod):
                rhos = spec.correlation.rho
            else:
                rhos = (np.eye(self.n_methods), np.eye(self.n_methods))
            covs = tuple(
                SectorCovariance.assemble(rhos[s], np.ones(self.n_methods), sector=s + 1)
                for s in range(N_LATENT)
            )
            self.chol_rho = tuple(c.chol for c in covs)
            self.fixed_sigma = None
            self.logdet_rho = tuple(c.log_det for c in covs)
        self.inv_chol_rho = tuple(
            solve_triangular(c, np.eye(self.n_methods), lower=True) for c in self.chol_rho
        )

    def sigma_for(self, state: ParameterState, s: int) -> np.ndarray:
        if self.fixed_sigma is not None:
            return self.fixed_sigma[s]
        return state.sigma_delta[:, s]

    def loglik_qm(self, alpha_s: np.ndarray, delta_s: np.ndarray, s: int) -> np.ndarray:
        """Log-likelihood summed per (population, method) for one sector."""
        sd = self.sectors[s]
        out_size = self.n_pop * self.n_methods
        if sd.n == 0:
            return np.zeros((self.n_pop, self.n_methods))
        beta = alpha_s[:, :, None] + np.einsum("qkh,qmh->qmk", self.diff, delta_s)
        rows = beta[sd.q_idx, sd.m_idx]
        psi = np.einsum("nk,nk->n", rows, sd.x)
        ll = -0.5 * (LOG_2PI + sd.logvar + (sd.y - psi) ** 2 / sd.var)
        return np.bincount(sd.qm_flat, weights=ll, minlength=out_size).reshape(
            self.n_pop, self.n_methods
        )

    def mvn_quad_rows(self, rows: np.ndarray, sigma: np.ndarray, s: int) -> np.ndarray:
        """Row-wise quadratic form under Sigma = D rho D for one sector."""
        z = (rows / sigma) @ self.inv_chol_rho[s].T
        return np.einsum("...m,...m->...", z, z)

    def mvn_logpdf_rows_total(self, rows: np.ndarray, sigma: np.ndarray, s: int) -> float:
        n = rows.shape[0]
        logdet = self.logdet_rho[s] + 2.0 * float(np.sum(np.log(sigma)))
        quad = float(np.sum(self.mvn_quad_rows(rows, sigma, s)))
        return -0.5 * (n * self.n_methods * LOG_2PI + n * logdet + quad)

    def mvn_logpdf_rowwise(self, rows: np.ndarray, sigma: np.ndarray, s: int) -> np.ndarray:
        logdet = self.logdet_rho[s] + 2.0 * float(np.sum(np.log(sigma)))
        return -0.5 * (
            self.n_methods * LOG_2PI + logdet + self.mvn_quad_rows(rows, sigma, s)
        )


# ---------------------------------------------------------------------------
# Batch adaptation shared by every sweep


class _AdaptiveScales:
    """Per-site proposal scales with batched burn-in adaptation."""

    def __init__(self, shape, init_scale, target, window):
        self.log_scale = np.full(shape, math.log(init_scale))
        self.target = target
        self.window = window
        self.batch_accepts = np.zeros(shape)
        self.batch = 0
        self.frozen = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def record(self, accepted: np.ndarray) -> None:
        if not self.frozen:
            self.batch_accepts += accepted

    def maybe_adapt(self, iteration: int) -> None:
        if self.frozen or iteration % self.window != 0:
            return
        self.batch += 1
        step = min(0.1, 1.0 / math.sqrt(self.batch))
        rate = self.batch_accepts / self.window
        self.log_scale += np.where(rate > self.target, step, -step)
        self.batch_accepts[:] = 0.0

    def freeze(self) -> None:
        self.frozen = True


def _check_logr(logr: np.ndarray) -> np.ndarray:
    if np.any(np.isnan(logr)):
        raise NumericalError("posterior density evaluated to NaN")
    return logr


# ---------------------------------------------------------------------------
# Initial states


def alpha_init_info(inputs: ModelInputs) -> tuple[np.ndarray, np.ndarray]:
    """Precision-weighted mean of each (q, m, s)'s logit data, plus a data mask."""
    q_count = inputs.n_pop
    m_count = inputs.n_methods
    num = np.zeros((q_count, m_count, N_LATENT))
    den = np.zeros((q_count, m_count, N_LATENT))
    for o in inputs.observations:
        w = 1.0 / o.var_logit
        num[o.q, o.m, o.s - 1] += w * o.y_logit
        den[o.q, o.m, o.s - 1] += w
    has_data = den > 0
    init = np.where(has_data, num / np.where(has_data, den, 1.0), 0.0)
    return init, has_data


def initial_state(
    spec: ModelSpec, inputs: ModelInputs, rng: np.random.Generator
) -> ParameterState:
    """Over-dispersed starting point: data-anchored alpha, zero delta, random scales."""
    init, _ = alpha_init_info(inputs)
    maps = HierarchyMaps.from_inputs(inputs)
    m_count = inputs.n_methods
    alpha = init + rng.normal(0.0, 0.5, size=init.shape)
    delta = np.zeros((inputs.n_pop, m_count, N_LATENT, inputs.n_coef - 1))
    state = ParameterState(alpha=alpha, delta=delta)
    if spec.scope is Scope.MULTI_COUNTRY:
        if spec.level is Level.SUBNATIONAL:
            country_mean = np.zeros((maps.n_countries, m_count, N_LATENT))
            for c in range(maps.n_countries):
                country_mean[c] = init[maps.c_of_q == c].mean(axis=0)
            state.alpha_country = country_mean + rng.normal(0.0, 0.5, country_mean.shape)
            state.sigma_alpha_p = rng.uniform(0.1, 1.0, size=N_LATENT)
            parent = state.alpha_country
        else:
            parent = init
        sub_mean = np.zeros((maps.n_subcontinents, m_count, N_LATENT))
        for r in range(maps.n_subcontinents):
            sub_mean[r] = parent[maps.r_of_c == r].mean(axis=0)
        state.theta_sub = sub_mean + rng.normal(0.0, 0.5, sub_mean.shape)
        state.theta_world = sub_mean.mean(axis=0) + rng.normal(0.0, 0.5, (m_count, N_LATENT))
        state.sigma_alpha_c = rng.uniform(0.1, 1.0, size=N_LATENT)
        state.sigma_theta = rng.uniform(0.1, 1.0, size=N_LATENT)
    if spec.samples_sigma_delta():
        state.sigma_delta = rng.uniform(0.1, 1.0, size=(m_count, N_LATENT))
    return state


def _chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, chain_id))))


# ---------------------------------------------------------------------------
# One chain


class _ChainRunner:
    def __init__(self, md: _ModelData, config: SamplerConfig, chain_id: int):
        self.md = md
        self.config = config
        self.rng = _chain_rng(config.seed, chain_id)
        self.state = initial_state(md.spec, md.inputs, self.rng)
        q, m = md.n_pop, md.n_methods
        w = config.adapt_window
        t_scalar = config.target_accept_scalar
        t_block = config.target_accept_block
        self.scales: dict[str, _AdaptiveScales] = {
            "alpha": _AdaptiveScales((q, m, N_LATENT), 0.3, t_scalar, w),
            "delta": _AdaptiveScales(
                (q, N_LATENT, md.n_diff), 2.38 / math.sqrt(m), t_block, w
            ),
        }
        st = self.state
        if st.alpha_country is not None:
            shape = st.alpha_country.shape
            self.scales["alpha_country"] = _AdaptiveScales(shape, 0.3, t_scalar, w)
        if st.theta_sub is not None:
            self.scales["theta_sub"] = _AdaptiveScales(st.theta_sub.shape, 0.3, t_scalar, w)
            self.scales["theta_world"] = _AdaptiveScales((m, N_LATENT), 0.5, t_scalar, w)
            self.scales["sigma_alpha_c"] = _AdaptiveScales((N_LATENT,), 0.3, t_scalar, w)
            self.scales["sigma_theta"] = _AdaptiveScales((N_LATENT,), 0.3, t_scalar, w)
        if st.sigma_alpha_p is not None:
            self.scales["sigma_alpha_p"] = _AdaptiveScales((N_LATENT,), 0.3, t_scalar, w)
        if st.sigma_delta is not None:
            self.scales["sigma_delta"] = _AdaptiveScales((m, N_LATENT), 0.3, t_scalar, w)
        self.accept_sums = {k: np.zeros_like(v.log_scale) for k, v in self.scales.items()}
        self.accept_n = 0
        self.scales_at_burnin: dict[str, np.ndarray] = {}

    # -- prior wiring -------------------------------------------------------

    def _alpha_parent(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean, sd) of alpha's prior, broadcastable to (Q, M, 2)."""
        md, st = self.md, self.state
        if not md.multi:
            return md.spec.priors.loc, md.spec.priors.scale
        if md.subnational:
            return st.alpha_country[md.maps.c_of_q], st.sigma_alpha_p
        return st.theta_sub[md.maps.r_of_c], st.sigma_alpha_c

    # -- sweeps -------------------------------------------------------------

    def _sweep_alpha(self):
        md, st, rng = self.md, self.state, self.rng
        sc = self.scales["alpha"]
        prop = st.alpha + sc.scale * rng.standard_normal(st.alpha.shape)
        mean, sd = self._alpha_parent()
        d_prior = -0.5 * ((prop - mean) / sd) ** 2 + 0.5 * ((st.alpha - mean) / sd) ** 2
        d_lik = np.empty_like(st.alpha)
        for s in range(N_LATENT):
            cur = md.loglik_qm(st.alpha[:, :, s], st.delta[:, :, s, :], s)
            new = md.loglik_qm(prop[:, :, s], st.delta[:, :, s, :], s)
            d_lik[:, :, s] = new - cur
        logr = _check_logr(d_prior + d_lik)
        accept = np.log(rng.random(size=logr.shape)) < logr
        st.alpha = np.where(accept, prop, st.alpha)
        self._tally("alpha", accept)

    def _sweep_alpha_country(self):
        md, st, rng = self.md, self.state, self.rng
        sc = self.scales["alpha_country"]
        cur = st.alpha_country
        prop = cur + sc.scale * rng.standard_normal(cur.shape)
        parent = st.theta_sub[md.maps.r_of_c]
        d_own = (
            -0.5 * ((prop - parent) / st.sigma_alpha_c) ** 2
            + 0.5 * ((cur - parent) / st.sigma_alpha_c) ** 2
        )
        diff_child = (
            -0.5 * ((st.alpha - prop[md.maps.c_of_q]) / st.sigma_alpha_p) ** 2
            + 0.5 * ((st.alpha - cur[md.maps.c_of_q]) / st.sigma_alpha_p) ** 2
        )
        d_child = np.zeros_like(cur)
        np.add.at(d_child, md.maps.c_of_q, diff_child)
        logr = _check_logr(d_own + d_child)
        accept = np.log(rng.random(size=logr.shape)) < logr
        st.alpha_country = np.where(accept, prop, cur)
        self._tally("alpha_country", accept)

    def _sweep_theta_sub(self):
        md, st, rng = self.md, self.state, self.rng
        sc = self.scales["theta_sub"]
        cur = st.theta_sub
        prop = cur + sc.scale * rng.standard_normal(cur.shape)
        d_own = (
            -0.5 * ((prop - st.theta_world) / st.sigma_theta) ** 2
            + 0.5 * ((cur - st.theta_world) / st.sigma_theta) ** 2
        )
        child = st.alpha_country if md.subnational else st.alpha
        sd = st.sigma_alpha_c
        diff_child = (
            -0.5 * ((child - prop[md.maps.r_of_c]) / sd) ** 2
            + 0.5 * ((child - cur[md.maps.r_of_c]) / sd) ** 2
        )
        d_child = np.zeros_like(cur)
        np.add.at(d_child, md.maps.r_of_c, diff_child)
        logr = _check_logr(d_own + d_child)
        accept = np.log(rng.random(size=logr.shape)) < logr
        st.theta_sub = np.where(accept, prop, cur)
        self._tally("theta_sub", accept)

    def _sweep_theta_world(self):
        st, rng = self.state, self.rng
        sc = self.scales["theta_world"]
        cur = st.theta_world
        prop = cur + sc.scale * rng.standard_normal(cur.shape)
        d_own = (-0.5 * (prop / THETA_WORLD_SD) ** 2) - (-0.5 * (cur / THETA_WORLD_SD) ** 2)
        d_child = (
            -0.5 * ((st.theta_sub - prop) / st.sigma_theta) ** 2
            + 0.5 * ((st.theta_sub - cur) / st.sigma_theta) ** 2
        ).sum(axis=0)
        logr = _check_logr(d_own + d_child)
        accept = np.log(rng.random(size=logr.shape)) < logr
        st.theta_world = np.where(accept, prop, cur)
        self._tally("theta_world", accept)

    def _sweep_scale_param(self, name: str, child: np.ndarray, mean: np.ndarray):
        """Log-scale random walk for a (2,)-shaped sd with normal children."""
        st, rng = self.state, self.rng
        sc = self.scales[name]
        cur = getattr(st, name)
        z = np.log(cur)
        z_prop = z + sc.scale * rng.standard_normal(z.shape)
        prop = np.exp(z_prop)
        resid2 = ((child - mean) ** 2).sum(axis=tuple(range(child.ndim - 1)))
        n_child = child.size // child.shape[-1]
        d_child = (
            -n_child * (z_prop - z) - 0.5 * resid2 * (1.0 / prop**2 - 1.0 / cur**2)
        )
        d_prior = np.log1p(cur**2) - np.log1p(prop**2)
        logr = _check_logr(d_child + d_prior + (z_prop - z))
        accept = np.log(rng.random(size=logr.shape)) < logr
        setattr(st, name, np.where(accept, prop, cur))
        self._tally(name, accept)

    def _sweep_sigmas(self):
        md, st = self.md, self.state
        if not md.multi:
            return
        if md.subnational:
            self._sweep_scale_param("sigma_alpha_p", st.alpha, st.alpha_country[md.maps.c_of_q])
            self._sweep_scale_param(
                "sigma_alpha_c", st.alpha_country, st.theta_sub[md.maps.r_of_c]
            )
        else:
            self._sweep_scale_param("sigma_alpha_c", st.alpha, st.theta_sub[md.maps.r_of_c])
        self._sweep_scale_param("sigma_theta", st.theta_sub, st.theta_world)

    def _sweep_sigma_delta(self):
        md, st, rng = self.md, self.state, self.rng
        if st.sigma_delta is None:
            return
        sc = self.scales["sigma_delta"]
        uniform_prior = md.spec.sigma_delta_prior() == "uniform"
        rows = [
            st.delta[:, :, s, :].transpose(0, 2, 1).reshape(-1, md.n_methods)
            for s in range(N_LATENT)
        ]
        for m0 in range(md.n_methods):
            cur = st.sigma_delta[m0].copy()
            z = np.log(cur)
            z_prop = z + sc.scale[m0] * rng.standard_normal(z.shape)
            prop = np.exp(z_prop)
            logr = np.empty(N_LATENT)
            for s in range(N_LATENT):
                sigma_new = st.sigma_delta[:, s].copy()
                sigma_new[m0] = prop[s]
                if uniform_prior and prop[s] >= SIGMA_DELTA_UPPER:
                    logr[s] = -np.inf
                    continue
                cur_total = md.mvn_logpdf_rows_total(rows[s], st.sigma_delta[:, s], s)
                new_total = md.mvn_logpdf_rows_total(rows[s], sigma_new, s)
                if uniform_prior:
                    d_prior = 0.0
                else:
                    d_prior = float(np.log1p(cur[s] ** 2) - np.log1p(prop[s] ** 2))
                logr[s] = new_total - cur_total + d_prior + (z_prop[s] - z[s])
            accept = np.log(rng.random(size=logr.shape)) < _check_logr(logr)
            st.sigma_delta[m0] = np.where(accept, prop, cur)
            self._tally_index("sigma_delta", (m0,), accept)

    def _sweep_delta(self):
        md, st, rng = self.md, self.state, self.rng
        sc = self.scales["delta"]
        chol = [
            md.chol_rho[s] * md.sigma_for(st, s)[:, None] for s in range(N_LATENT)
        ]
        cur_ll = np.stack(
            [
                md.loglik_qm(st.alpha[:, :, s], st.delta[:, :, s, :], s).sum(axis=1)
                for s in range(N_LATENT)
            ],
            axis=1,
        )  # (Q, 2)
        for h in range(md.n_diff):
            for s in range(N_LATENT):
                sigma = md.sigma_for(st, s)
                cur_rows = st.delta[:, :, s, h]
                step = sc.scale[:, s, h][:, None]
                prop_rows = cur_rows + step * (
                    rng.standard_normal(cur_rows.shape) @ chol[s].T
                )
                delta_new = st.delta[:, :, s, :].copy()
                delta_new[:, :, h] = prop_rows
                new_ll = md.loglik_qm(st.alpha[:, :, s], delta_new, s).sum(axis=1)
                d_prior = -0.5 * (
                    md.mvn_quad_rows(prop_rows, sigma, s)
                    - md.mvn_quad_rows(cur_rows, sigma, s)
                )
                logr = _check_logr(new_ll - cur_ll[:, s] + d_prior)
                accept = np.log(rng.random(size=logr.shape)) < logr
                st.delta[:, :, s, h] = np.where(accept[:, None], prop_rows, cur_rows)
                cur_ll[:, s] = np.where(accept, new_ll, cur_ll[:, s])
                self._tally_index("delta", (slice(None), s, h), accept)

    # -- bookkeeping ----------------------------------------------------------

    def _tally(self, name: str, accept: np.ndarray):
        self.scales[name].record(accept)
        if self._post_burnin:
            self.accept_sums[name] += accept

    def _tally_index(self, name: str, index, accept: np.ndarray):
        if not self.scales[name].frozen:
            self.scales[name].batch_accepts[index] += accept
        if self._post_burnin:
            self.accept_sums[name][index] += accept

    # -- main loop ------------------------------------------------------------

    def run(self) -> dict:
        md, config = self.md, self.config
        keep_shapes = {k: v.shape for k, v in self.state.arrays().items()}
        out = {k: np.empty((config.n_keep,) + shape) for k, shape in keep_shapes.items()}
        slot = 0
        self._post_burnin = config.n_burnin == 0
        if self._post_burnin:
            for name, sc in self.scales.items():
                sc.freeze()
                self.scales_at_burnin[name] = sc.log_scale.copy()
        for it in range(1, config.n_iter + 1):
            self._sweep_alpha()
            if self.state.alpha_country is not None:
                self._sweep_alpha_country()
            if self.state.theta_sub is not None:
                self._sweep_theta_sub()
                self._sweep_theta_world()
            self._sweep_sigmas()
            self._sweep_sigma_delta()
            self._sweep_delta()

            if it <= config.n_burnin:
                for sc in self.scales.values():
                    sc.maybe_adapt(it)
                if it == config.n_burnin:
                    for name, sc in self.scales.items():
                        sc.freeze()
                        self.scales_at_burnin[name] = sc.log_scale.copy()
                    self._post_burnin = True
            else:
                self.accept_n += 1
                if (it - config.n_burnin) % config.n_thin == 0:
                    for k, v in self.state.arrays().items():
                        out[k][slot] = v
                    slot += 1
        assert slot == config.n_keep
        n = max(self.accept_n, 1)
        return {
            "draws": out,
            "acceptance": {k: v / n for k, v in self.accept_sums.items()},
            "scales_at_burnin": self.scales_at_burnin,
            "scales_at_end": {k: sc.log_scale.copy() for k, sc in self.scales.items()},
        }


# ---------------------------------------------------------------------------
# Public entry points


def default_monitor(spec: ModelSpec) -> tuple[str, ...]:
    if spec.scope is Scope.MULTI_COUNTRY:
        if spec.level is Level.NATIONAL:
            return ("P", "alpha_cms", "beta.k", "delta.k")
        return (
            "alpha_pms",
            "alpha_cms",
            "inv.sigma_delta",
            "tau_alpha_pms",
            "beta.k",
            "delta.k",
        )
    if spec.level is Level.NATIONAL:
        return ("P", "alpha_cms", "inv.sigma_delta", "beta.k")
    return ("P", "alpha_pms", "beta.k")


def run_chains(
    spec: ModelSpec,
    inputs: ModelInputs,
    config: SamplerConfig | None = None,
    monitor: tuple[str, ...] | None = None,
    compute_diagnostics: bool = True,
) -> ChainOutput:
    """Run independent adaptive chains and collect retained draws.

    Emits a NonConvergenceWarning (non-fatal) when any monitored scalar has
    split-Rhat above 1.05. Diagnostics need at least two chains and are
    skipped otherwise.
    """
    config = config or SamplerConfig()
    monitor = tuple(monitor) if monitor is not None else default_monitor(spec)
    md = _ModelData(spec, inputs)
    _, has_data = alpha_init_info(inputs)
    missing = ~has_data.any(axis=2)
    if missing.any():
        pairs = ", ".join(
            f"{inputs.populations[q]}/{inputs.methods[m].value}"
            for q, m in zip(*np.nonzero(missing))
        )
        warnings.warn(
            f"no observations for: {pairs}; levels start at 0 and rely on pooling",
            IngestWarning,
        )
    results = [_ChainRunner(md, config, cid).run() for cid in range(config.n_chains)]

    draws = {
        k: np.stack([r["draws"][k] for r in results])
        for k in results[0]["draws"]
    }
    acceptance = {
        k: np.mean([r["acceptance"][k] for r in results], axis=0)
        for k in results[0]["acceptance"]
    }
    output = ChainOutput(
        draws=draws,
        acceptance=acceptance,
        scales_at_burnin={
            k: np.stack([r["scales_at_burnin"][k] for r in results])
            for k in results[0]["scales_at_burnin"]
        },
        scales_at_end={
            k: np.stack([r["scales_at_end"][k] for r in results])
            for k in results[0]["scales_at_end"]
        },
        config=config,
        spec=spec,
        inputs=inputs,
        monitor=monitor,
    )
    if compute_diagnostics and config.n_chains >= 2:
        output.diagnostics_table = diagnostics(output, monitor)
        worst = max(
            (row.rhat for row in output.diagnostics_table if np.isfinite(row.rhat)),
            default=1.0,
        )
        if worst > RHAT_THRESHOLD:
            warnings.warn(
                f"max split-Rhat {worst:.3f} exceeds {RHAT_THRESHOLD}",
                NonConvergenceWarning,
            )
    return output


# ---------------------------------------------------------------------------
# Convergence diagnostics


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    """Rank-normalize pooled draws per scalar: x (C, n, S) -> z (C, n, S)."""
    c, n, s = x.shape
    flat = x.reshape(c * n, s)
    ranks = rankdata(flat, method="average", axis=0)
    z = norm.ppf((ranks - 0.375) / (c * n + 0.25))
    return z.reshape(c, n, s)


def _split_chains(x: np.ndarray) -> np.ndarray:
    c, n, s = x.shape
    half = n // 2
    return np.concatenate([x[:, :half, :], x[:, n - half :, :]], axis=0)


def _rhat_from_z(z: np.ndarray) -> np.ndarray:
    c, n, s = z.shape
    chain_means = z.mean(axis=1)
    chain_vars = z.var(axis=1, ddof=1)
    w = chain_vars.mean(axis=0)
    b = n * chain_means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * w + b / n
    out = np.ones(s)
    ok = w > 1e-300
    out[ok] = np.sqrt(var_plus[ok] / w[ok])
    return out


def _ess_from_z(z: np.ndarray) -> np.ndarray:
    """Effective sample size with Geyer truncation at the first negative pair."""
    c, n, s = z.shape
    chain_vars = z.var(axis=1, ddof=1)
    w = chain_vars.mean(axis=0)
    chain_means = z.mean(axis=1)
    b = n * chain_means.var(axis=0, ddof=1) if c > 1 else np.zeros(s)
    var_plus = (n - 1) / n * w + b / n

    centered = z - z.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n, :].real / n
    acov_mean = acov.mean(axis=0)  # (n, S)

    ok = var_plus > 1e-300
    safe_vp = np.where(ok, var_plus, 1.0)
    rho = 1.0 - (w[None, :] - acov_mean) / safe_vp[None, :]  # (n, S)
    n_pairs = max((n - 1) // 2, 1)
    pair_sum = rho[1 : 2 * n_pairs : 2] + rho[2 : 2 * n_pairs + 1 : 2]  # (n_pairs, S)
    valid = np.cumprod(pair_sum >= 0, axis=0).astype(bool)
    mono = np.minimum.accumulate(np.where(valid, pair_sum, np.inf), axis=0)
    tau = 1.0 + 2.0 * np.sum(np.where(valid, mono, 0.0), axis=0)
    ess = c * n / np.maximum(tau, 1e-8)
    ess[~ok] = c * n
    return np.minimum(ess, c * n)


def _monitored_series(output: ChainOutput, name: str):
    """Yield (label, array (C, n)) pairs for one monitored parameter name."""
    inputs = output.inputs
    subnat = output.spec.level is Level.SUBNATIONAL

    def expand(label, arr):
        flat = arr.reshape(arr.shape[0], arr.shape[1], -1)
        shape = arr.shape[2:]
        for j in range(flat.shape[2]):
            idx = np.unravel_index(j, shape) if shape else ()
            suffix = ",".join(str(i + 1) for i in idx)
            yield f"{label}[{suffix}]" if suffix else label, flat[:, :, j], idx

    alias = {
        "alpha_cms": "alpha_country" if subnat else "alpha",
        "alpha_pms": "alpha",
        "delta.k": "delta",
        "alpha": "alpha",
        "alpha_country": "alpha_country",
        "delta": "delta",
        "theta_sub": "theta_sub",
        "theta_world": "theta_world",
        "sigma_alpha_c": "sigma_alpha_c",
        "sigma_alpha_p": "sigma_alpha_p",
        "sigma_theta": "sigma_theta",
        "sigma_delta": "sigma_delta",
    }
    if name in alias:
        key = alias[name]
        if key not in output.draws:
            if name in ("alpha_cms", "alpha_pms"):
                key = "alpha"
            else:
                return
        yield from ((lbl, arr, key, idx) for lbl, arr, idx in expand(name, output.draws[key]))
    elif name == "beta.k":
        flat = output.beta_draws()  # (C*n, Q, M, 2, K)
        beta = flat.reshape((output.n_chains, output.n_keep) + flat.shape[1:])
        yield from ((lbl, arr, None, idx) for lbl, arr, idx in expand("beta.k", beta))
    elif name == "tau_alpha_pms":
        if "sigma_alpha_p" not in output.draws:
            return
        tau = 1.0 / output.draws["sigma_alpha_p"] ** 2
        yield from (
            (lbl, arr, "sigma_alpha_p", idx) for lbl, arr, idx in expand("tau_alpha_pms", tau)
        )
    elif name == "inv.sigma_delta":
        series = _inv_sigma_delta_draws(output)
        yield from ((lbl, arr, None, idx) for lbl, arr, idx in expand("inv.sigma_delta", series))
    elif name == "P":
        for q in range(inputs.n_pop):
            phi = output.phi_draws_for_population(q)
            phi = phi.reshape(output.n_chains, output.n_keep, *phi.shape[1:])
            for lbl, arr, idx in expand(f"P[{q + 1}]", phi):
                yield lbl, arr, None, idx
    else:
        raise ConfigError(f"unknown monitored parameter {name!r}")


def _inv_sigma_delta_draws(output: ChainOutput) -> np.ndarray:
    spec = output.spec
    m = spec.n_methods
    if isinstance(spec.correlation, FixedGlobal):
        inv = np.stack(
            [np.linalg.inv(spec.correlation.sigma[s]) for s in range(N_LATENT)], axis=-1
        )
        return np.broadcast_to(
            inv, (output.n_chains, output.n_keep) + inv.shape
        ).copy()
    sig = output.draws["sigma_delta"]  # (C, n, M, 2)
    if isinstance(spec.correlation, CrossMethod):
        rho = np.stack(spec.correlation.rho, axis=-1)
    else:
        rho = np.stack([np.eye(m), np.eye(m)], axis=-1)
    out = np.empty(sig.shape[:2] + (m, m, N_LATENT))
    for s in range(N_LATENT):
        outer = sig[..., :, s][..., :, None] * sig[..., :, s][..., None, :]
        out[..., s] = np.linalg.inv(rho[..., s] * outer)
    return out


def scalar_diagnostics(x: np.ndarray) -> tuple[float, float]:
    """Split-Rhat and ESS for one scalar's draws, shaped (n_chains, n_draws)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientChainsError("scalar diagnostics need (n_chains >= 2, n_draws)")
    z = _rank_normalize(_split_chains(x[:, :, None]))
    return float(_rhat_from_z(z)[0]), float(_ess_from_z(z)[0])


def diagnostics(
    output: ChainOutput, monitor: tuple[str, ...] | None = None
) -> list[DiagnosticRow]:
    """Split-Rhat (rank-normalized) and ESS for every monitored scalar."""
    if output.n_chains < 2:
        raise InsufficientChainsError("diagnostics need at least 2 chains")
    monitor = tuple(monitor) if monitor is not None else output.monitor
    rows: list[DiagnosticRow] = []
    for name in monitor:
        entries = list(_monitored_series(output, name))
        if not entries:
            continue
        stack = np.stack([arr for _, arr, _, _ in entries], axis=-1)
        z = _rank_normalize(_split_chains(stack))
        rhats = _rhat_from_z(z)
        esses = _ess_from_z(z)
        for (label, _, accept_key, idx), rhat, ess in zip(entries, rhats, esses):
            acc = np.nan
            if accept_key is not None and accept_key in output.acceptance:
                acc_arr = output.acceptance[accept_key]
                if accept_key == "delta" and len(idx) == 4:
                    acc = float(acc_arr[idx[0], idx[2], idx[3]])
                elif acc_arr.shape and len(idx) == acc_arr.ndim:
                    acc = float(acc_arr[idx])
                elif not acc_arr.shape:
                    acc = float(acc_arr)
            rows.append(DiagnosticRow(label, float(rhat), float(ess), acc))
    return rows


# ---------------------------------------------------------------------------
# Generic density sampler (same kernel machinery, free-form target)


def sample_density(logpdf, x0: np.ndarray, config: SamplerConfig) -> np.ndarray:
    """Adaptive coordinate-wise random-walk Metropolis on a free-form density.

    Runs ``config.n_chains`` chains from ``x0`` (jittered per chain) and
    returns retained draws with shape (n_chains, n_keep, d). Uses the same
    batch adaptation and retention rules as the model sampler.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    all_draws = np.empty((config.n_chains, config.n_keep, d))
    for cid in range(config.n_chains):
        rng = _chain_rng(config.seed, cid)
        x = x0 + rng.normal(0.0, 0.5, size=d)
        lp = logpdf(x)
        if not np.isfinite(lp):
            x = x0.copy()
            lp = logpdf(x)
        scales = _AdaptiveScales((d,), 0.5, config.target_accept_scalar, config.adapt_window)
        slot = 0
        for it in range(1, config.n_iter + 1):
            accepted = np.zeros(d)
            for j in range(d):
                prop = x.copy()
                prop[j] += scales.scale[j] * rng.standard_normal()
                lp_prop = logpdf(prop)
                logr = lp_prop - lp
                if np.isnan(logr):
                    raise NumericalError("density evaluated to NaN")
                if math.log(rng.random()) < logr:
                    x, lp = prop, lp_prop
                    accepted[j] = 1.0
            scales.record(accepted)
            if it <= config.n_burnin:
                scales.maybe_adapt(it)
                if it == config.n_burnin:
                    scales.freeze()
            elif (it - config.n_burnin) % config.n_thin == 0:
                all_draws[cid, slot] = x
                slot += 1
    return all_draws
