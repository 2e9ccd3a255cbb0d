import warnings

import numpy as np
import pytest
from scipy import stats

from supplyshare.data_model import METHOD_ORDER, build_model_inputs
from supplyshare.errors import ConfigError, NonConvergenceWarning
from supplyshare.model_core import FixedGlobal, Level, ModelSpec, Scope, ZeroCovariance
from supplyshare.posterior_summary import (
    export_estimates,
    extract_global_sigma,
    extract_informative_priors,
    load_estimates,
    summarize,
    summary_from_phi_draws,
)
from supplyshare.sampler import SamplerConfig, run_chains
from supplyshare.simulate import SimScenario, simulate_dataset


@pytest.fixture(scope="module")
def small_fit():
    scenario = SimScenario(
        n_countries=3, n_methods=2, n_surveys=3, n_subcontinents=2,
        sigma_delta=0.15, n_respondents=800, seed=31,
    )
    dataset, _, _ = simulate_dataset(scenario)
    inputs = build_model_inputs(dataset, 2000.0, 2020.0, nsegments=4)
    spec = ModelSpec(
        level=Level.NATIONAL,
        scope=Scope.MULTI_COUNTRY,
        start_year=2000.0,
        end_year=2020.0,
        nsegments=4,
        methods=inputs.methods,
        correlation=ZeroCovariance(),
    )
    cfg = SamplerConfig(n_iter=2000, n_burnin=800, n_thin=4, n_chains=2, seed=13)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        output = run_chains(spec, inputs, cfg, monitor=("alpha_cms",))
    return inputs, output


class TestQuantileEngine:
    def test_identical_draws_collapse(self):
        phi = np.full((50, 4), 0.37)
        out = summary_from_phi_draws(phi)
        for name in out:
            assert np.allclose(out[name], 0.37)

    def test_linear_interpolation_median(self):
        draws = np.arange(0.1, 1.05, 0.1).reshape(-1, 1)
        out = summary_from_phi_draws(draws)
        assert out["median"][0] == pytest.approx(0.55)

    def test_uniform_draws_recover_interval(self):
        rng = np.random.default_rng(2)
        draws = rng.uniform(size=(2000, 1))
        out = summary_from_phi_draws(draws)
        assert out["lower95"][0] == pytest.approx(0.025, abs=0.02)
        assert out["upper95"][0] == pytest.approx(0.975, abs=0.02)

    def test_beta_draws_match_analytic_quantiles(self):
        rng = np.random.default_rng(3)
        draws = rng.beta(2.0, 5.0, size=(4000, 1))
        out = summary_from_phi_draws(draws)
        for name, p in (("lower95", 0.025), ("median", 0.5), ("upper95", 0.975)):
            assert out[name][0] == pytest.approx(stats.beta(2, 5).ppf(p), abs=0.03)


class TestSummarize:
    def test_shapes_and_monotonicity(self, small_fit):
        inputs, output = small_fit
        summary = summarize(output)
        shape = (3, inputs.bases[0].n_grid, 2, 3)
        assert summary.median.shape == shape
        assert np.all(summary.lower95 <= summary.lower80 + 1e-12)
        assert np.all(summary.lower80 <= summary.median + 1e-12)
        assert np.all(summary.median <= summary.upper80 + 1e-12)
        assert np.all(summary.upper80 <= summary.upper95 + 1e-12)
        assert np.all(summary.median >= 0) and np.all(summary.median <= 1)

    def test_per_draw_sum_identity(self, small_fit):
        _, output = small_fit
        phi = output.phi_draws_for_population(0)
        total = phi.sum(axis=-1)
        assert np.all(total == 1.0)
        med_third = np.median(phi[..., 2], axis=0)
        med_remainder = np.median(1.0 - (phi[..., 0] + phi[..., 1]), axis=0)
        assert np.array_equal(med_third, med_remainder)

    def test_export_round_trip(self, small_fit, tmp_path):
        _, output = small_fit
        summary = summarize(output)
        path = tmp_path / "estimates.csv"
        export_estimates(summary, path)
        loaded = load_estimates(path)
        assert loaded.populations == summary.populations
        assert np.array_equal(loaded.years, summary.years)
        for name in ("median", "lower80", "upper80", "lower95", "upper95"):
            assert np.allclose(
                getattr(loaded, name), getattr(summary, name), atol=1e-10
            )

    def test_export_header_and_golden_row(self, small_fit, tmp_path):
        _, output = small_fit
        summary = summarize(output)
        path = tmp_path / "estimates.csv"
        export_estimates(summary, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "population,year,method,sector,median,l80,u80,l95,u95"
        first = lines[1].split(",")
        assert first[0] == "Country 01"
        assert first[1] == "2000.0"
        assert first[2] == "Female Sterilization"
        assert first[3] == "Public"
        assert first[4] == repr(float(summary.median[0, 0, 0, 0]))

    def test_export_empty_summary_header_only(self, tmp_path):
        from supplyshare.posterior_summary import PosteriorSummary

        empty = PosteriorSummary(
            populations=(),
            years=np.array([2000.0, 2000.5]),
            methods=(),
            median=np.empty((0, 2, 0, 3)),
            lower80=np.empty((0, 2, 0, 3)),
            upper80=np.empty((0, 2, 0, 3)),
            lower95=np.empty((0, 2, 0, 3)),
            upper95=np.empty((0, 2, 0, 3)),
        )
        path = tmp_path / "empty.csv"
        export_estimates(empty, path)
        assert path.read_text().splitlines() == [
            "population,year,method,sector,median,l80,u80,l95,u95"
        ]

    def test_load_rejects_foreign_csv(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ConfigError):
            load_estimates(path)


class TestExtraction:
    def test_informative_priors_national(self, small_fit):
        inputs, output = small_fit
        country = inputs.populations[0]
        priors = extract_informative_priors(output, country)
        geo = inputs.geography
        assert priors.level_name == geo.subcontinent_of[country]
        assert priors.loc.shape == (2, 2)
        r = geo.subcon_index(geo.subcontinent_of[country])
        expected = np.median(output.stacked("theta_sub")[:, r], axis=0)
        assert np.allclose(priors.loc, expected)
        assert np.all(priors.scale > 0)
        # scale is the cross-country sd, constant across methods
        assert np.allclose(priors.scale[0], priors.scale[1])

    def test_global_sigma_is_spd_and_median_based(self, small_fit):
        _, output = small_fit
        fixed = extract_global_sigma(output)
        assert isinstance(fixed, FixedGlobal)
        for s in range(2):
            m = np.asarray(fixed.sigma[s])
            assert np.allclose(m, m.T)
            assert np.linalg.eigvalsh(m).min() > 0
            sig = output.stacked("sigma_delta")[:, :, s]
            assert np.allclose(np.diag(m), np.median(sig**2, axis=0))

    def test_unknown_country_rejected(self, small_fit):
        _, output = small_fit
        with pytest.raises(ConfigError):
            extract_informative_priors(output, "Atlantis")
