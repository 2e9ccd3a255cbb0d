import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logit

from supplyshare.data_model import METHOD_ORDER, LogitObservation
from supplyshare.errors import ConfigError
from supplyshare.model_core import (
    CrossMethod,
    FixedGlobal,
    HierarchyMaps,
    InformativePriors,
    Level,
    ModelSpec,
    ParameterState,
    Scope,
    SectorCovariance,
    ZeroCovariance,
    beta_from,
    beta_tensor,
    build_sector_covs,
    compose_phi,
    difference_matrix,
    latent_psi,
    log_likelihood,
    log_posterior,
    log_prior,
)
from supplyshare.spline_basis import build_basis

from conftest import random_multi_state


class TestBetaRecursion:
    def test_zero_differences_constant(self):
        for k_star in range(5):
            assert np.allclose(beta_from(0.7, np.zeros(4), k_star), 0.7)

    def test_cumulative_sum_from_first(self):
        assert np.allclose(beta_from(0.0, np.ones(4), 0), [0, 1, 2, 3, 4])

    def test_hand_unrolled_case(self):
        # alpha=2 anchored at the third coefficient, delta=(0.5,-0.5,0.25,0).
        beta = beta_from(2.0, np.array([0.5, -0.5, 0.25, 0.0]), 2)
        assert np.allclose(beta, [2.0, 2.5, 2.0, 2.25, 2.25])

    def test_differences_identity_randomized(self, rng):
        for _ in range(200):
            k = rng.integers(2, 20)
            k_star = int(rng.integers(0, k))
            delta = rng.normal(0, 2, size=k - 1)
            alpha = float(rng.normal())
            beta = beta_from(alpha, delta, k_star)
            assert np.allclose(np.diff(beta), delta, atol=1e-10)
            assert beta[k_star] == pytest.approx(alpha, abs=1e-12)

    def test_matrix_form_matches_recursion(self, rng):
        for _ in range(50):
            k = int(rng.integers(3, 12))
            k_star = int(rng.integers(0, k))
            delta = rng.normal(size=k - 1)
            alpha = float(rng.normal())
            via_matrix = alpha + difference_matrix(k, k_star) @ delta
            assert np.allclose(via_matrix, beta_from(alpha, delta, k_star), atol=1e-12)

    def test_beta_tensor_broadcasts(self, rng):
        diff = difference_matrix(6, 3)
        alpha = rng.normal(size=(4, 2, 2))
        delta = rng.normal(size=(4, 2, 2, 5))
        beta = beta_tensor(alpha, delta, diff)
        assert beta.shape == (4, 2, 2, 6)
        assert np.allclose(beta[2, 1, 0], beta_from(alpha[2, 1, 0], delta[2, 1, 0], 3))

    def test_k_star_bounds(self):
        with pytest.raises(ConfigError):
            beta_from(0.0, np.zeros(4), 5)


class TestLatentPsi:
    def test_partition_of_unity_returns_level(self):
        basis = build_basis(1990.0, 2025.5, 12, 2016.0)
        beta = np.full(basis.n_coef, 3.2)
        assert latent_psi(beta, basis.values[40]) == pytest.approx(3.2, abs=1e-12)

    def test_one_hot_row_selects_coefficient(self):
        row = np.zeros(8)
        row[5] = 1.0
        beta = np.arange(8.0)
        assert latent_psi(beta, row) == 5.0

    def test_matches_naive_sum(self, rng):
        for _ in range(100):
            k = int(rng.integers(2, 30))
            beta = rng.normal(size=k)
            row = rng.normal(size=k)
            naive = sum(float(b) * float(x) for b, x in zip(beta, row))
            assert latent_psi(beta, row) == pytest.approx(naive, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            latent_psi(np.zeros(3), np.zeros(4))


class TestComposePhi:
    def test_origin_maps_to_half_quarter_quarter(self):
        assert np.allclose(compose_phi(0.0, 0.0), [0.5, 0.25, 0.25])

    def test_large_psi2_sends_third_share_to_zero(self):
        phi = compose_phi(0.0, 30.0)
        assert phi[2] == pytest.approx(0.0, abs=1e-12)

    def test_zimbabwe_round_trip(self):
        phi = compose_phi(logit(0.73797197), logit(0.6112848308633240))
        assert np.allclose(phi, [0.73797, 0.16018, 0.10185], atol=1e-4)

    def test_sums_exactly_one_components_in_open_interval(self, rng):
        psi = rng.uniform(-15, 15, size=(500, 2))
        for p1, p2 in psi:
            phi = compose_phi(p1, p2)
            assert phi[0] + phi[1] + phi[2] == 1.0
            assert np.all(phi > 0) and np.all(phi < 1)

    def test_vectorized_shape(self):
        out = compose_phi(np.zeros((3, 4)), np.zeros((3, 4)))
        assert out.shape == (3, 4, 3)


class TestSectorCovariance:
    def test_identity_rho_gives_diagonal(self):
        cov = SectorCovariance.assemble(np.eye(3), np.array([1.0, 2.0, 3.0]))
        assert np.allclose(cov.matrix, np.diag([1.0, 4.0, 9.0]))

    def test_unit_sigma_returns_rho(self):
        rho = np.array([[1.0, 0.5], [0.5, 1.0]])
        cov = SectorCovariance.assemble(rho, np.ones(2))
        assert np.allclose(cov.matrix, rho)

    def test_mvn_rows_against_scipy(self, rng):
        rho = np.array([[1.0, 0.4,.2], [0.4, 1.0, -0.3], [0.2, -0.3, 1.0]])
        sigma = np.array([0.5, 1.5, 0.8])
        cov = SectorCovariance.assemble(rho, sigma)
        rows = rng.normal(size=(20, 3))
        expected = stats.multivariate_normal(mean=np.zeros(3), cov=cov.matrix).logpdf(rows).sum()
        assert cov.mvn_logpdf_rows(rows) == pytest.approx(expected, rel=1e-10)

    def test_jitter_repairs_semidefinite(self):
        rho = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank one
        cov = SectorCovariance.assemble(rho, np.ones(2))
        assert cov.jitter > 0
        assert np.all(np.isfinite(cov.chol))


def _toy_spec_and_maps(level, scope, n_methods=2, nsegments=4):
    methods = METHOD_ORDER[:n_methods]
    if scope is Scope.SINGLE_COUNTRY:
        priors = InformativePriors(
            level_name="Testing Region",
            methods=methods,
            loc=np.linspace(-1, 1, n_methods * 2).reshape(n_methods, 2),
            scale=np.full((n_methods, 2), 0.7),
        )
        sigma = (np.array([[0.09, 0.03], [0.03, 0.16]]), np.array([[0.04, 0.0], [0.0, 0.25]]))
        correlation = FixedGlobal(sigma=sigma)
        spec = ModelSpec(
            level=level,
            scope=scope,
            start_year=2000.0,
            end_year=2020.0,
            nsegments=nsegments,
            methods=methods,
            correlation=correlation,
            priors=priors,
        )
        maps = HierarchyMaps(c_of_q=np.zeros(3 if level is Level.SUBNATIONAL else 1, dtype=int), r_of_c=np.zeros(1, dtype=int))
        return spec, maps
    spec = ModelSpec(
        level=level,
        scope=scope,
        start_year=2000.0,
        end_year=2020.0,
        nsegments=nsegments,
        methods=methods,
        correlation=ZeroCovariance(),
    )
    if level is Level.NATIONAL:
        maps = HierarchyMaps(c_of_q=np.arange(4), r_of_c=np.array([0, 0, 1, 1]))
    else:
        maps = HierarchyMaps(c_of_q=np.array([0, 0, 1, 1, 1]), r_of_c=np.array([0, 1]))
    return spec, maps


def oracle_log_prior(state, spec, maps):
    """Same density assembled term by term from scipy scalar/MVN densities."""
    lp = 0.0
    m = spec.n_methods

    def half_cauchy(x):
        if np.any(np.asarray(x) <= 0):
            return -np.inf
        return float(np.sum(np.log(2 / np.pi) - np.log1p(np.asarray(x) ** 2)))

    if isinstance(spec.correlation, FixedGlobal):
        sigmas = [np.asarray(s) for s in spec.correlation.sigma]
    else:
        sigmas = []
        for s in range(2):
            sd = state.sigma_delta[:, s]
            rho = (
                spec.correlation.rho[s]
                if isinstance(spec.correlation, CrossMethod)
                else np.eye(m)
            )
            sigmas.append(rho * np.outer(sd, sd))
    for q in range(state.delta.shape[0]):
        for s in range(2):
            for h in range(state.delta.shape[3]):
                lp += stats.multivariate_normal(np.zeros(m), sigmas[s]).logpdf(
                    state.delta[q, :, s, h]
                )

    if spec.scope is Scope.SINGLE_COUNTRY:
        for q in range(state.alpha.shape[0]):
            for i in range(m):
                for s in range(2):
                    lp += stats.norm(spec.priors.loc[i, s], spec.priors.scale[i, s]).logpdf(
                        state.alpha[q, i, s]
                    )
        return lp

    if spec.level is Level.NATIONAL:
        for c in range(state.alpha.shape[0]):
            for i in range(m):
                for s in range(2):
                    lp += stats.norm(
                        state.theta_sub[maps.r_of_c[c], i, s], state.sigma_alpha_c[s]
                    ).logpdf(state.alpha[c, i, s])
    else:
        for p in range(state.alpha.shape[0]):
            for i in range(m):
                for s in range(2):
                    lp += stats.norm(
                        state.alpha_country[maps.c_of_q[p], i, s], state.sigma_alpha_p[s]
                    ).logpdf(state.alpha[p, i, s])
        for c in range(state.alpha_country.shape[0]):
            for i in range(m):
                for s in range(2):
                    lp += stats.norm(
                        state.theta_sub[maps.r_of_c[c], i, s], state.sigma_alpha_c[s]
                    ).logpdf(state.alpha_country[c, i, s])
        lp += half_cauchy(state.sigma_alpha_p)

    lp += float(stats.norm(state.theta_world, state.sigma_theta).logpdf(state.theta_sub).sum())
    lp += float(stats.norm(0, 10.0).logpdf(state.theta_world).sum())
    lp += half_cauchy(state.sigma_alpha_c)
    lp += half_cauchy(state.sigma_theta)

    if spec.level is Level.NATIONAL:
        if np.any(state.sigma_delta >= 10.0):
            return -np.inf
        lp += math.log(1 / 10.0) * state.sigma_delta.size
    else:
        lp += half_cauchy(state.sigma_delta)
    return lp


class TestLogPrior:
    @pytest.mark.parametrize(
        "level,scope",
        [
            (Level.NATIONAL, Scope.MULTI_COUNTRY),
            (Level.SUBNATIONAL, Scope.MULTI_COUNTRY),
            (Level.NATIONAL, Scope.SINGLE_COUNTRY),
            (Level.SUBNATIONAL, Scope.SINGLE_COUNTRY),
        ],
    )
    def test_matches_scalar_density_oracle(self, level, scope, rng):
        spec, maps = _toy_spec_and_maps(level, scope)
        k = spec.n_coef
        for _ in range(5):
            if scope is Scope.MULTI_COUNTRY:
                state = random_multi_state(spec, maps, k, rng)
            else:
                q = maps.n_pop
                state = ParameterState(
                    alpha=rng.normal(0, 1, (q, 2, 2)),
                    delta=rng.normal(0, 0.3, (q, 2, 2, k - 1)),
                )
            assert log_prior(state, spec, maps) == pytest.approx(
                oracle_log_prior(state, spec, maps), rel=1e-9
            )

    def test_standard_normal_block_at_origin(self):
        spec, maps = _toy_spec_and_maps(Level.NATIONAL, Scope.MULTI_COUNTRY)
        cov = SectorCovariance.assemble(np.eye(2), np.ones(2))
        rows = np.zeros((1, 2))
        assert cov.mvn_logpdf_rows(rows) == pytest.approx(-0.5 * 2 * math.log(2 * math.pi))

    def test_sigma_delta_outside_uniform_support(self, rng):
        spec, maps = _toy_spec_and_maps(Level.NATIONAL, Scope.MULTI_COUNTRY)
        state = random_multi_state(spec, maps, spec.n_coef, rng)
        state.sigma_delta[0, 0] = 11.0
        assert log_prior(state, spec, maps) == -np.inf

    def test_negative_sigma_rejected(self, rng):
        spec, maps = _toy_spec_and_maps(Level.NATIONAL, Scope.MULTI_COUNTRY)
        state = random_multi_state(spec, maps, spec.n_coef, rng)
        state.sigma_theta[1] = -0.5
        assert log_prior(state, spec, maps) == -np.inf


def _toy_likelihood_setup(rng, n_obs=3):
    spec, maps = _toy_spec_and_maps(Level.NATIONAL, Scope.MULTI_COUNTRY)
    bases = [
        build_basis(2000.0, 2020.0, 4, t_star=2010.0 + q) for q in range(maps.n_pop)
    ]
    state = random_multi_state(spec, maps, spec.n_coef, rng)
    data = []
    for i in range(n_obs):
        q = int(rng.integers(0, maps.n_pop))
        data.append(
            LogitObservation(
                q=q,
                t=int(rng.integers(0, bases[q].n_grid)),
                m=int(rng.integers(0, 2)),
                s=int(rng.integers(1, 3)),
                y_logit=float(rng.normal()),
                var_logit=float(rng.uniform(0.05, 0.5)),
            )
        )
    return spec, maps, bases, state, data


class TestLogLikelihood:
    def test_observation_at_mean_unit_variance(self):
        spec, maps = _toy_spec_and_maps(Level.NATIONAL, Scope.MULTI_COUNTRY)
        bases = [build_basis(2000.0, 2020.0, 4, 2010.0) for _ in range(maps.n_pop)]
        state = ParameterState(
            alpha=np.full((maps.n_pop, 2, 2), 1.3),
            delta=np.zeros((maps.n_pop, 2, 2, spec.n_coef - 1)),
        )
        # flat coefficients: psi equals alpha everywhere by partition of unity
        data = [LogitObservation(q=0, t=5, m=0, s=1, y_logit=1.3, var_logit=1.0)]
        assert log_likelihood(state, data, bases) == pytest.approx(
            -0.5 * math.log(2 * math.pi)
        )

    def test_empty_data_gives_zero(self, rng):
        spec, maps, bases, state, _ = _toy_likelihood_setup(rng)
        assert log_likelihood(state, [], bases) == 0.0

    def test_matches_direct_formula_oracle(self, rng):
        _, _, bases, state, data = _toy_likelihood_setup(rng)
        expected = 0.0
        for obs in data:
            basis = bases[obs.q]
            beta = beta_from(
                state.alpha[obs.q, obs.m, obs.s - 1],
                state.delta[obs.q, obs.m, obs.s - 1],
                basis.k_star,
            )
            psi = float(np.dot(beta, basis.values[obs.t]))
            expected += stats.norm(psi, math.sqrt(obs.var_logit)).logpdf(obs.y_logit)
        assert log_likelihood(state, data, bases) == pytest.approx(expected, rel=1e-10)

    def test_variance_scaling_identity(self, rng):
        _, _, bases, state, data = _toy_likelihood_setup(rng, n_obs=5)
        c = 3.7

        def quad_part(rows):
            total = log_likelihood(state, rows, bases)
            const = sum(
                -0.5 * (math.log(2 * math.pi) + math.log(o.var_logit)) for o in rows
            )
            return total - const

        scaled = [
            LogitObservation(o.q, o.t, o.m, o.s, o.y_logit, o.var_logit * c)
            for o in data
        ]
        assert quad_part(scaled) == pytest.approx(quad_part(data) / c, rel=1e-10)


class TestLogPosterior:
    def test_minus_inf_propagates(self, rng):
        spec, maps, bases, state, data = _toy_likelihood_setup(rng)
        state.sigma_delta[0, 0] = 11.0
        assert log_posterior(state, spec, maps, data, bases) == -np.inf

    def test_zero_data_equals_prior(self, rng):
        spec, maps, bases, state, _ = _toy_likelihood_setup(rng)
        assert log_posterior(state, spec, maps, [], bases) == pytest.approx(
            log_prior(state, spec, maps)
        )

    def test_toy_equals_oracle_sum(self, rng):
        spec, maps, bases, state, data = _toy_likelihood_setup(rng)
        assert log_posterior(state, spec, maps, data, bases) == pytest.approx(
            oracle_log_prior(state, spec, maps) + log_likelihood(state, data, bases),
            rel=1e-9,
        )

    def test_directional_finite_difference_consistency(self, rng):
        spec, maps, bases, state, data = _toy_likelihood_setup(rng, n_obs=8)

        def f(eps_alpha, eps_delta):
            trial = state.copy()
            trial.alpha = trial.alpha + eps_alpha
            trial.delta = trial.delta + eps_delta
            return log_posterior(trial, spec, maps, data, bases)

        for _ in range(20):
            da = rng.normal(size=state.alpha.shape)
            dd = rng.normal(size=state.delta.shape)
            h = 1e-5
            d1 = (f(h * da, h * dd) - f(-h * da, -h * dd)) / (2 * h)
            h2 = h / 2
            d2 = (f(h2 * da, h2 * dd) - f(-h2 * da, -h2 * dd)) / (2 * h2)
            assert d1 == pytest.approx(d2, rel=1e-4, abs=1e-6)


class TestModelSpecValidation:
    def test_single_requires_priors_and_fixed_cov(self):
        with pytest.raises(ConfigError):
            ModelSpec(
                level=Level.NATIONAL,
                scope=Scope.SINGLE_COUNTRY,
                methods=METHOD_ORDER[:2],
                correlation=ZeroCovariance(),
            )

    def test_fixed_cov_requires_single(self):
        sigma = (np.eye(2), np.eye(2))
        with pytest.raises(ConfigError):
            ModelSpec(
                level=Level.NATIONAL,
                scope=Scope.MULTI_COUNTRY,
                methods=METHOD_ORDER[:2],
                correlation=FixedGlobal(sigma=sigma),
            )

    def test_cross_method_needs_valid_correlation(self):
        bad = np.array([[1.0, 1.2], [1.2, 1.0]])
        with pytest.raises(ConfigError):
            CrossMethod(rho=(bad, np.eye(2)))

    def test_informative_prior_csv_roundtrip(self, tmp_path):
        methods = METHOD_ORDER[:3]
        priors = InformativePriors(
            level_name="Eastern Africa",
            methods=methods,
            loc=np.arange(6, dtype=float).reshape(3, 2),
            scale=np.full((3, 2), 0.4),
        )
        path = tmp_path / "priors.csv"
        priors.to_csv(path)
        loaded = InformativePriors.from_csv(path, methods)
        assert loaded.level_name == "Eastern Africa"
        assert np.allclose(loaded.loc, priors.loc)
        assert np.allclose(loaded.scale, priors.scale)
