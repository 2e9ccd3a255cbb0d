import math
import warnings

import numpy as np
import pytest
from scipy.special import logit

from supplyshare.data_model import (
    CleanDataset,
    LogitObservation,
    Method,
    Sector,
    SurveyObservation,
    build_model_inputs,
    collapse_duplicates,
    delta_method_var,
    load_geography,
    load_survey_data,
    to_logit_obs,
)
from supplyshare.errors import (
    DegenerateCompositionError,
    DegenerateCompositionWarning,
    RangeError,
    SchemaError,
    UnknownCountryError,
)

from conftest import make_survey_rows, write_survey_csv

# The Zimbabwe/Midlands/OC Pills/2010.5 group: (Public, Commercial_medical, Other)
ZIM_PROPS = (0.73797197, 0.16017376, 0.10185427)
ZIM_SES = (0.04498512, 0.03557217, 0.02596022)
ZIM_NS = (194, 40, 29)
# Frozen from the direct formulas: r = p2/(p2+p3), y = log(x/(1-x)).
ZIM_RATIO = 0.6112848308633240
ZIM_Y2 = 0.4527161597697836
ZIM_Y1 = 1.0354543600779017


def zim_group(year=2010.5):
    ses = list(ZIM_SES)
    return make_survey_rows(
        "Zimbabwe",
        "Midlands",
        Method.OC_PILLS,
        year,
        [ZIM_PROPS[0], ZIM_PROPS[1], ZIM_PROPS[2]],
        ses=[ZIM_SES[0], ZIM_SES[1], ZIM_SES[2]],
        ns=list(ZIM_NS),
    )


class TestDeltaMethodVar:
    def test_half_proportion(self):
        assert delta_method_var(0.5, 0.05) == pytest.approx(0.04, abs=1e-15)

    def test_point_nine(self):
        assert delta_method_var(0.9, 0.01) == pytest.approx(0.012345679012345678, rel=1e-12)

    def test_monte_carlo_oracle(self):
        # var of logit(p-hat) for binomial p-hat should match the formula.
        rng = np.random.default_rng(42)
        n_trials, p = 2000, 0.3
        draws = rng.binomial(n_trials, p, size=100_000) / n_trials
        empirical = np.var(logit(draws))
        formula = delta_method_var(p, math.sqrt(p * (1 - p) / n_trials))
        assert abs(empirical - formula) / formula < 0.10

    def test_decreasing_in_p_times_one_minus_p(self):
        se = 0.03
        grid = np.linspace(0.01, 0.5, 50)
        values = [delta_method_var(p, se) for p in grid]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestToLogitObs:
    def test_symmetric_group_gives_zero_logits(self):
        rows = make_survey_rows("Nepal", None, Method.IUD, 2010.0, [0.5, 0.25, 0.25])
        out = to_logit_obs(rows)
        assert [o.s for o in out] == [1, 2]
        assert out[0].y_logit == pytest.approx(0.0, abs=1e-12)
        assert out[1].y_logit == pytest.approx(0.0, abs=1e-12)

    def test_zimbabwe_row_frozen_values(self):
        out = to_logit_obs(zim_group())
        assert out[0].y_logit == pytest.approx(ZIM_Y1, rel=1e-12)
        assert out[1].y_logit == pytest.approx(ZIM_Y2, rel=1e-12)
        assert out[0].var_logit == pytest.approx(
            delta_method_var(ZIM_PROPS[0], ZIM_SES[0]), rel=1e-12
        )
        se_ratio = ZIM_SES[1] / (ZIM_PROPS[1] + ZIM_PROPS[2])
        assert out[1].var_logit == pytest.approx(
            delta_method_var(ZIM_RATIO, se_ratio), rel=1e-12
        )

    def test_degenerate_private_total(self):
        rows = make_survey_rows("Nepal", None, Method.IUD, 2010.0, [1.0, 0.0, 0.0])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = to_logit_obs(rows)
        assert len(out) == 1
        assert out[0].clamped
        assert out[0].y_logit == pytest.approx(logit(1 - 1e-4))
        assert any(issubclass(w.category, DegenerateCompositionWarning) for w in caught)

    def test_degenerate_strict_raises(self):
        rows = make_survey_rows("Nepal", None, Method.IUD, 2010.0, [1.0, 0.0, 0.0])
        with pytest.raises(DegenerateCompositionError):
            to_logit_obs(rows, strict=True)

    def test_se_floor_applies(self):
        rows = make_survey_rows(
            "Nepal", None, Method.IUD, 2010.0, [0.5, 0.3, 0.2], ses=[0.0, 0.0, 0.0], ns=[400, 50, 30]
        )
        out = to_logit_obs(rows)
        floored = max(0.005, math.sqrt(0.5 * 0.5 / 400))
        assert out[0].var_logit == pytest.approx(delta_method_var(0.5, floored), rel=1e-12)

    def test_compose_round_trip_against_model_core(self):
        from supplyshare.model_core import compose_phi

        rng = np.random.default_rng(5)
        for _ in range(200):
            raw = rng.uniform(1e-5, 1.0, size=3)
            phi = raw / raw.sum()
            phi = np.clip(phi, 1e-3, 1 - 1e-3)
            phi = phi / phi.sum()
            psi1 = logit(phi[0])
            psi2 = logit(phi[1] / (phi[1] + phi[2]))
            assert np.allclose(compose_phi(psi1, psi2), phi, atol=1e-10)


class TestCollapseDuplicates:
    def test_precision_weighted_merge(self):
        a = LogitObservation(q=0, t=3, m=1, s=1, y_logit=1.0, var_logit=1.0)
        b = LogitObservation(q=0, t=3, m=1, s=1, y_logit=3.0, var_logit=0.5)
        merged = collapse_duplicates([a, b])
        assert len(merged) == 1
        expected_y = (1.0 * 1.0 + 2.0 * 3.0) / 3.0
        assert merged[0].y_logit == pytest.approx(expected_y)
        assert merged[0].var_logit == pytest.approx(1.0 / 3.0)

    def test_order_invariance(self):
        rows = [
            LogitObservation(q=0, t=1, m=0, s=1, y_logit=0.5, var_logit=0.3),
            LogitObservation(q=0, t=1, m=0, s=1, y_logit=-0.2, var_logit=0.8),
            LogitObservation(q=1, t=2, m=0, s=2, y_logit=0.1, var_logit=0.1),
        ]
        assert collapse_duplicates(rows) == collapse_duplicates(rows[::-1])


class TestIngestion:
    def test_zimbabwe_rows_accepted(self, tmp_path):
        path = tmp_path / "subnat.csv"
        write_survey_csv(path, [zim_group(), zim_group(2015.5)])
        ds = load_survey_data(path, national=False)
        assert len(ds.observations) == 6
        assert ds.observations[0].country == "Zimbabwe"
        assert ds.geography.provinces_of["Zimbabwe"] == ("Midlands",)

    def test_out_of_range_proportion_names_row(self, tmp_path):
        rows = make_survey_rows("Nepal", None, Method.IUD, 2010.0, [1.2, -0.1, -0.1])
        path = tmp_path / "bad.csv"
        write_survey_csv(path, [rows])
        with pytest.raises(RangeError, match="row 2.*1.2"):
            load_survey_data(path, national=True)

    def test_year_window_check(self, tmp_path):
        rows = make_survey_rows("Nepal", None, Method.IUD, 1960.0, [0.5, 0.3, 0.2])
        path = tmp_path / "bad.csv"
        write_survey_csv(path, [rows])
        with pytest.raises(RangeError, match="1960"):
            load_survey_data(path, national=True)

    def test_local_filter_keeps_only_mycountry(self, tmp_path):
        groups = [
            make_survey_rows("Nepal", None, Method.IUD, 2010.0, [0.5, 0.3, 0.2]),
            make_survey_rows("Kenya", None, Method.IUD, 2010.0, [0.4, 0.4, 0.2]),
        ]
        path = tmp_path / "multi.csv"
        write_survey_csv(path, groups)
        ds = load_survey_data(path, national=True, local=True, mycountry="Nepal")
        assert ds.countries() == ("Nepal",)
        assert ds.settings.mycountry == "Nepal"

    def test_missing_column_listed(self, tmp_path):
        path = tmp_path / "cols.csv"
        path.write_text("Country,Method,average_year\nNepal,IUD,2010\n")
        with pytest.raises(SchemaError) as err:
            load_survey_data(path, national=True)
        assert "sector_categories" in str(err.value)
        assert "proportion" in str(err.value)

    def test_unknown_country(self, tmp_path):
        rows = make_survey_rows("Atlantis", None, Method.IUD, 2010.0, [0.5, 0.3, 0.2])
        path = tmp_path / "bad.csv"
        write_survey_csv(path, [rows])
        with pytest.raises(UnknownCountryError, match="Atlantis"):
            load_survey_data(path, national=True)

    def test_unknown_method_token(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "Country,Region,Method,average_year,sector_categories,proportion,SE.proportion,n\n"
            "Nepal,,Condoms,2010,Public,0.5,0.02,100\n"
        )
        with pytest.raises(SchemaError, match="Condoms"):
            load_survey_data(path, national=True)

    def test_sector_sum_violation_rejects_group(self, tmp_path):
        good = make_survey_rows("Nepal", None, Method.IUD, 2010.0, [0.5, 0.3, 0.2])
        bad = make_survey_rows("Nepal", None, Method.IUD, 2015.0, [0.6, 0.3, 0.2])
        path = tmp_path / "mix.csv"
        write_survey_csv(path, [good, bad])
        ds = load_survey_data(path, national=True)
        assert len(ds.observations) == 3
        assert any("sum" in reason for _, reason in ds.report.rejected_groups)

    def test_spreadsheet_binary_rejected(self, tmp_path):
        path = tmp_path / "book.xlsx"
        path.write_bytes(b"PK\x03\x04")
        with pytest.raises(SchemaError, match="CSV"):
            load_survey_data(path, national=True)

    def test_region_must_be_empty_for_national(self, tmp_path):
        rows = make_survey_rows("Nepal", "Central", Method.IUD, 2010.0, [0.5, 0.3, 0.2])
        path = tmp_path / "nat.csv"
        write_survey_csv(path, [rows])
        with pytest.raises(SchemaError, match="Region"):
            load_survey_data(path, national=True)

    def test_idempotent_reingestion(self, tmp_path):
        groups = [
            make_survey_rows("Nepal", "Central", Method.IUD, 2010.5, [0.52, 0.31, 0.17]),
            make_survey_rows("Nepal", "Eastern", Method.OC_PILLS, 2016.0, [0.4, 0.35, 0.25]),
        ]
        path = tmp_path / "subnat.csv"
        write_survey_csv(path, groups)
        ds1 = load_survey_data(path, national=False)
        out = tmp_path / "canonical.csv"
        ds1.to_csv(out)
        ds2 = load_survey_data(out, national=False)
        assert ds1 == ds2

    def test_name_normalization_trims_and_matches_case(self, tmp_path):
        path = tmp_path / "sloppy.csv"
        path.write_text(
            "Country,Region,Method,average_year,sector_categories,proportion,SE.proportion,n\n"
            "  nepal ,,oc pills,2010,Public,0.5,0.02,100\n"
            "nepal,,OC Pills,2010,Commercial_medical,0.3,0.02,60\n"
            "NEPAL,,OC PILLS,2010,Other,0.2,0.02,40\n"
        )
        ds = load_survey_data(path, national=True)
        assert ds.countries() == ("Nepal",)
        assert ds.observations[0].method is Method.OC_PILLS

    def test_fp2030_filter(self, tmp_path, monkeypatch):
        geo_path = tmp_path / "geo.csv"
        geo_path.write_text(
            "Country or area,ISO Code,Major area,Region,FP2020\n"
            "Inland,901,Africa,Testing Region,Yes\n"
            "Outland,902,Africa,Testing Region,No\n"
        )
        groups = [
            make_survey_rows("Inland", None, Method.IUD, 2010.0, [0.5, 0.3, 0.2]),
            make_survey_rows("Outland", None, Method.IUD, 2010.0, [0.5, 0.3, 0.2]),
        ]
        path = tmp_path / "both.csv"
        write_survey_csv(path, groups)
        ds = load_survey_data(path, national=True, geography=geo_path)
        assert ds.countries() == ("Inland",)
        ds_all = load_survey_data(path, national=True, fp2030=False, geography=geo_path)
        assert ds_all.countries() == ("Inland", "Outland")


class TestGeography:
    def test_builtin_classification(self):
        geo = load_geography()
        assert geo.subcontinent_of["Nepal"] == "Southern Asia"
        assert geo.iso_of["Zimbabwe"] == 716
        assert geo.fp2030_of["Kenya"]

    def test_indices_contiguous(self):
        geo = load_geography()
        idx = [geo.country_index(c) for c in geo.countries]
        assert idx == list(range(len(geo.countries)))
        sub = geo.subcon_index_of_country()
        assert sub.min() == 0
        assert set(sub) == set(range(sub.max() + 1))


class TestModelInputs:
    def test_build_inputs_toy(self, tmp_path):
        groups = [
            make_survey_rows("Nepal", None, Method.IUD, 2010.5, [0.5, 0.3, 0.2]),
            make_survey_rows("Nepal", None, Method.IUD, 2016.0, [0.55, 0.25, 0.2]),
            make_survey_rows("Kenya", None, Method.IUD, 2014.0, [0.4, 0.4, 0.2]),
        ]
        path = tmp_path / "nat.csv"
        write_survey_csv(path, groups)
        ds = load_survey_data(path, national=True)
        inputs = build_model_inputs(ds, 1990.0, 2025.5, nsegments=12)
        assert inputs.populations == ("Kenya", "Nepal")
        assert inputs.t_stars() == (2014.0, 2016.0)
        assert inputs.n_methods == 1
        # 2 logit rows per group
        assert len(inputs.observations) == 6
        nepal_obs = [o for o in inputs.observations if o.q == 1]
        assert {o.t for o in nepal_obs} == {
            inputs.bases[1].grid_index(2010.5),
            inputs.bases[1].grid_index(2016.0),
        }
        # Kenya and Nepal are in different subcontinents
        assert inputs.r_of_c[0] != inputs.r_of_c[1]

    def test_subnational_population_keys(self, tmp_path):
        groups = [
            make_survey_rows("Nepal", "Central", Method.IUD, 2010.0, [0.5, 0.3, 0.2]),
            make_survey_rows("Nepal", "Eastern", Method.IUD, 2010.0, [0.5, 0.3, 0.2]),
            make_survey_rows("Kenya", "Coast", Method.IUD, 2010.0, [0.4, 0.4, 0.2]),
        ]
        path = tmp_path / "sub.csv"
        write_survey_csv(path, groups)
        ds = load_survey_data(path, national=False)
        inputs = build_model_inputs(ds, 2000.0, 2020.0, nsegments=4)
        assert inputs.populations == ("Kenya|Coast", "Nepal|Central", "Nepal|Eastern")
        assert list(inputs.c_of_q) == [0, 1, 1]
