import numpy as np
import pytest

from dwimoco.maturity import (
    CohortPoint,
    DegenerateCohortError,
    SaturationFit,
    fit_saturation,
    predict_adc,
)
from dwimoco.phantom import make_cohort

TRUE_ADC_SAT = 3.2e-3
TRUE_ALPHA = 0.07


def clean_cohort(ga_values=tuple(range(20, 39))):
    truth = SaturationFit(TRUE_ADC_SAT, TRUE_ALPHA, 1.0)
    return [
        CohortPoint(f"c{i:02d}", float(ga), predict_adc(float(ga), truth))
        for i, ga in enumerate(ga_values)
    ]


class TestPredict:
    def test_zero_ga_is_zero(self):
        fit = SaturationFit(TRUE_ADC_SAT, TRUE_ALPHA, 1.0)
        assert predict_adc(0.0, fit) == 0.0

    def test_saturation_limit(self):
        fit = SaturationFit(TRUE_ADC_SAT, TRUE_ALPHA, 1.0)
        assert predict_adc(400.0, fit) == pytest.approx(TRUE_ADC_SAT, rel=1e-9)

    def test_direct_evaluation_at_30_weeks(self):
        fit = SaturationFit(3.2e-3, 0.07, 1.0)
        expected = 3.2e-3 * (1.0 - np.exp(-0.07 * 30.0))
        assert predict_adc(30.0, fit) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(2.808e-3, rel=1e-3)

    def test_monotone_and_bounded(self):
        fit = SaturationFit(TRUE_ADC_SAT, TRUE_ALPHA, 1.0)
        ga = np.linspace(1.0, 60.0, 200)
        vals = predict_adc(ga, fit)
        assert np.all(np.diff(vals) > 0)
        assert np.all(vals < TRUE_ADC_SAT)

    def test_rejects_negative_ga(self):
        with pytest.raises(ValueError):
            predict_adc(-1.0, SaturationFit(TRUE_ADC_SAT, TRUE_ALPHA, 1.0))


class TestFitSaturation:
    def test_noiseless_recovery(self):
        fit = fit_saturation(clean_cohort())
        assert fit.adc_sat == pytest.approx(TRUE_ADC_SAT, rel=1e-6)
        assert fit.alpha == pytest.approx(TRUE_ALPHA, rel=1e-6)
        assert fit.r2 == pytest.approx(1.0, abs=1e-9)
        assert not fit.flagged

    def test_refit_on_own_predictions_is_idempotent(self, rng):
        pts = clean_cohort()
        noisy = [
            CohortPoint(p.case_id, p.ga, p.adc + float(rng.normal(0, 2e-4))) for p in pts
        ]
        fit1 = fit_saturation(noisy)
        refit_pts = [
            CohortPoint(p.case_id, p.ga, predict_adc(p.ga, fit1)) for p in noisy
        ]
        fit2 = fit_saturation(refit_pts)
        assert fit2.adc_sat == pytest.approx(fit1.adc_sat, rel=1e-6)
        assert fit2.alpha == pytest.approx(fit1.alpha, rel=1e-6)
        assert fit2.r2 == pytest.approx(1.0, abs=1e-9)

    def test_scaling_cohort_scales_adc_sat_only(self, rng):
        pts = clean_cohort()
        noisy = [
            CohortPoint(p.case_id, p.ga, p.adc + float(rng.normal(0, 1e-4))) for p in pts
        ]
        fit1 = fit_saturation(noisy)
        scaled = [CohortPoint(p.case_id, p.ga, 2.5 * p.adc) for p in noisy]
        fit2 = fit_saturation(scaled)
        assert fit2.adc_sat == pytest.approx(2.5 * fit1.adc_sat, rel=1e-8)
        assert fit2.alpha == pytest.approx(fit1.alpha, rel=1e-6)
        assert fit2.r2 == pytest.approx(fit1.r2, rel=1e-9)

    def test_identical_adc_flagged_zero_r2(self):
        pts = [CohortPoint(f"c{i}", 20.0 + i, 2.5e-3) for i in range(10)]
        fit = fit_saturation(pts)
        assert fit.flagged
        assert fit.r2 == 0.0

    def test_noisy_recovery_within_ten_percent(self):
        errs = []
        for seed in range(30):
            pts = make_cohort(
                38, (20.0, 38.0), (TRUE_ADC_SAT, TRUE_ALPHA), 0.1 * TRUE_ADC_SAT, seed
            )
            fit = fit_saturation(pts)
            errs.append(fit.adc_sat / TRUE_ADC_SAT - 1.0)
        assert abs(np.mean(errs)) < 0.1

    def test_needs_three_points(self):
        with pytest.raises(DegenerateCohortError):
            fit_saturation(clean_cohort((20, 30)))

    def test_rejects_constant_ga(self):
        pts = [CohortPoint(f"c{i}", 25.0, 1e-3 * (1 + i)) for i in range(5)]
        with pytest.raises(DegenerateCohortError):
            fit_saturation(pts)

    def test_three_param_variant_recovers(self):
        truth = SaturationFit(3.2e-3, 0.07, 1.0, b_coeff=0.9)
        pts = [
            CohortPoint(f"c{i}", float(ga), predict_adc(float(ga), truth))
            for i, ga in enumerate(range(20, 39))
        ]
        fit = fit_saturation(pts, three_param=True)
        assert fit.adc_sat == pytest.approx(3.2e-3, rel=1e-4)
        assert fit.alpha == pytest.approx(0.07, rel=1e-3)
        assert fit.b_coeff == pytest.approx(0.9, rel=1e-3)


class TestCohortPoint:
    def test_validates_ga(self):
        with pytest.raises(ValueError):
            CohortPoint("x", 0.0, 1e-3)

    def test_validates_adc_finite(self):
        with pytest.raises(ValueError):
            CohortPoint("x", 25.0, float("nan"))
