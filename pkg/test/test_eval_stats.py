import math

import numpy as np
import pytest
from scipy import stats

from spineage.eval_stats import (
    BiasCorrection,
    EmptyBracketException,
    RankDeficiencyException,
    StatisticsException,
    abs_error_table,
    apply_bias,
    covariate_design,
    degenerative_design,
    drop_constant_columns,
    evaluate,
    fit_bias,
    fit_ols,
    fit_sag_ols,
    heavy_work_by_age,
    icc_1_1,
    icc_by_group,
    icc_scan_rescan,
    icc_summary,
    large_discrepancies,
    lifestyle_design,
    mae,
    odds_ratio_from_counts,
    odds_ratios,
    r2,
    structural_design,
    t_quantile,
    wmae,
    write_ols,
)
from spineage.report_features import (
    DENSE_INDEX,
    DENSE_SIZE,
    STRUCTURAL_KINDS,
    ConditionKind,
    Region,
    Severity,
)
from spineage.utils import read_csv


def test_bias_identity():
    ages = np.array([30.0, 45.0, 60.0, 75.0])
    correction = fit_bias(ages, ages)

    assert correction.alpha == pytest.approx(1.0)
    assert correction.beta == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(apply_bias(correction, ages), ages)


def test_bias_worked_example():
    assert apply_bias(BiasCorrection(2.0, -30.0), [70.0])[0] == pytest.approx(50.0)


def test_refit_after_correction_is_identity():
    rng = np.random.default_rng(0)
    ages = rng.uniform(25, 84, 200)
    predictions = 0.6 * ages + 20.0 + rng.normal(0, 3, 200)
    corrected = apply_bias(fit_bias(ages, predictions), predictions)
    refit = fit_bias(ages, corrected)

    assert refit.alpha == pytest.approx(1.0)
    assert refit.beta == pytest.approx(0.0, abs=1e-8)


def test_bias_fit_rejects_degenerate_input():
    with pytest.raises(StatisticsException):
        fit_bias([50.0, 50.0], [40.0, 60.0])
    with pytest.raises(StatisticsException):
        fit_bias([30.0, 60.0], [50.0, 50.0])
    with pytest.raises(StatisticsException):
        fit_bias([30.0], [31.0])


def test_metrics():
    ages = np.array([30.0, 32.0, 40.0])
    predictions = np.array([31.0, 35.0, 50.0])
    brackets = [30, 30, 40]

    assert mae(ages, predictions) == pytest.approx(14.0 / 3.0)
    assert wmae(ages, predictions, brackets) == pytest.approx(6.0)
    assert r2(ages, ages) == 1.0
    assert r2(ages, np.full(3, ages.mean())) == pytest.approx(0.0)

    with pytest.raises(EmptyBracketException):
        wmae(ages, predictions, brackets, required=[30, 40, 50])
    with pytest.raises(StatisticsException):
        mae([], [])


def test_mae_equals_wmae_on_balanced_brackets():
    rng = np.random.default_rng(7)
    brackets = np.repeat([30, 40, 50, 60, 70, 80], 5)
    ages = brackets + rng.uniform(-5, 5, brackets.size)
    predictions = ages + rng.normal(0, 4, brackets.size)

    assert wmae(ages, predictions, brackets) == pytest.approx(mae(ages, predictions), abs=1e-12)
    assert r2(ages, np.full(ages.size, ages.mean())) == pytest.approx(0.0, abs=1e-12)


def test_wmae_ignores_bracket_size():
    rng = np.random.default_rng(9)
    brackets = np.repeat([30, 40, 50], 6)
    ages = brackets + rng.uniform(-5, 5, brackets.size)
    predictions = ages + rng.normal(0, 4, brackets.size)
    doubled = brackets == 40

    expected = wmae(ages, predictions, brackets)
    assert wmae(np.concatenate([ages, ages[doubled]]), np.concatenate([predictions, predictions[doubled]]),
                np.concatenate([brackets, brackets[doubled]])) == pytest.approx(expected)


def test_evaluate_report():
    ages = np.array([30.0, 42.0, 55.0, 71.0])
    raw = 2.0 * ages - 30.0
    report = evaluate(["a", "b", "c", "d"], ages, [30, 40, 60, 70], raw, BiasCorrection(2.0, -30.0))

    assert report.metrics["mae_corrected"] == pytest.approx(0.0)
    assert report.metrics["r2_corrected"] == pytest.approx(1.0)
    assert np.allclose(report.sag, 0.0)
    assert len(report.metric_row()) == 6
    assert large_discrepancies(report) == []

    table = abs_error_table(report, {"a": "F", "b": "M", "c": "F", "d": "M"})
    assert [row[:3] for row in table] == [["F", 30, 1], ["F", 60, 1], ["M", 40, 1], ["M", 70, 1]]


def test_t_quantile_matches_scipy():
    for dof in (1, 3, 10, 250):
        assert t_quantile(0.975, dof) == pytest.approx(stats.t.ppf(0.975, dof), rel=1e-9)
    assert t_quantile(0.025, 10) == pytest.approx(-t_quantile(0.975, 10))
    with pytest.raises(StatisticsException):
        t_quantile(1.0, 5)


def test_ols_three_point_closed_form():
    x = np.array([0.0, 1.0, 2.0])
    fit = fit_ols(np.column_stack([np.ones(3), x]), [0.0, 1.0, 3.0], ["intercept", "x"])

    assert fit.coefficient("x") == pytest.approx(1.5)
    assert fit.coefficient("intercept") == pytest.approx(-1.0 / 6.0)
    assert fit.dof == 1
    assert fit.standard_errors[1] == pytest.approx(math.sqrt(1.0 / 12.0))
    half_width = stats.t.ppf(0.975, 1) * math.sqrt(1.0 / 12.0)
    assert fit.ci_low[1] == pytest.approx(1.5 - half_width)
    assert fit.ci_high[1] == pytest.approx(1.5 + half_width)
    assert not fit.significant[1]


def test_ols_recovers_planted_effects():
    rng = np.random.default_rng(1)
    n = 400
    male = rng.integers(0, 2, n)
    condition = rng.integers(0, 2, n)
    sag = 0.5 + 1.0 * male + 3.0 * condition + rng.normal(0, 1, n)

    fit = fit_sag_ols(sag, condition, ["bulge"], male)
    expected = np.linalg.lstsq(np.column_stack([np.ones(n), male, condition]), sag, rcond=None)[0]

    assert np.allclose(fit.coefficients, expected)
    assert fit.ci_low[2] < 3.0 < fit.ci_high[2]
    assert fit.significant[2]
    assert [row[0] for row in fit.rows()] == ["bulge"]
    assert fit.rows()[0][1] == int(condition.sum())


def test_ols_residuals_are_orthogonal_to_the_design():
    rng = np.random.default_rng(12)
    design = np.column_stack([np.ones(80), rng.integers(0, 2, 80), rng.normal(size=(80, 3))])
    fit = fit_ols(design, rng.normal(size=80) * 5.0, ["intercept", "male", "a", "b", "c"])

    assert np.allclose(design.T @ fit.residuals, 0.0, atol=1e-8)


def test_ols_recovers_noiseless_model_exactly():
    rng = np.random.default_rng(6)
    covariates = rng.normal(size=(50, 3))
    male = rng.integers(0, 2, 50)
    sag = 2.0 - 1.5 * male + covariates @ np.array([0.5, -3.0, 7.25])

    fit = fit_sag_ols(sag, covariates, ["a", "b", "c"], male)

    assert np.allclose(fit.coefficients, [2.0, -1.5, 0.5, -3.0, 7.25], rtol=0, atol=1e-8)


def test_ols_rank_deficiency_names_column():
    x = np.arange(6, dtype=np.float64)
    design = np.column_stack([np.ones(6), x, 2 * x])

    with pytest.raises(RankDeficiencyException) as info:
        fit_ols(design, x, ["intercept", "x", "twice_x"])
    assert "twice_x" in str(info.value)


def test_degenerative_design_is_severity_exclusive():
    dense = np.zeros((3, DENSE_SIZE))
    moderate = DENSE_INDEX[(Region.LUMBAR, ConditionKind.DISC_BULGE, Severity.MODERATE)]
    mild = DENSE_INDEX[(Region.LUMBAR, ConditionKind.DISC_BULGE, Severity.MILD)]
    dense[0, moderate] = 2
    dense[0, mild] = 5
    dense[1, mild] = 3
    dense[2, mild] = 2

    design, names = degenerative_design(dense, Region.LUMBAR)
    moderate_column = names.index("moderate disc_bulge (No.>1)")
    mild_column = names.index("mild disc_bulge (No.>2)")

    assert design[:, moderate_column].tolist() == [1.0, 0.0, 0.0]
    assert design[:, mild_column].tolist() == [0.0, 1.0, 0.0]
    assert design[0].sum() == 1.0


def test_other_designs():
    dense = np.zeros((2, DENSE_SIZE))
    dense[1, -1] = 1
    flags, names = structural_design(dense)
    assert names == [kind.value for kind in STRUCTURAL_KINDS]
    assert flags[1, -1] == 1.0

    covariates = [
        {"packs_per_day": 1.5, "alcohol_days": 2, "sedentary_hours": 8.0, "work_level": "heavy",
         "exercise_level": "none"},
        {"packs_per_day": 0.0, "alcohol_days": 0, "sedentary_hours": 4.0, "work_level": "light",
         "exercise_level": "vigorous"},
    ]
    design, names = lifestyle_design(covariates)
    assert design[0, names.index("heavy_work")] == 1.0
    assert design[1, names.index("vigorous_exercise")] == 1.0

    assert covariate_design("lifestyle", dense, covariates)[1] == names
    with pytest.raises(StatisticsException):
        covariate_design("diet", dense, covariates)

    kept, kept_names = drop_constant_columns(design, names)
    assert "moderate_work" not in kept_names
    assert kept.shape == (2, len(kept_names))


def test_odds_ratio_worked_example():
    result = odds_ratio_from_counts(19, 8, 4, 8)

    assert result.odds_ratio == pytest.approx(4.75)
    assert not result.corrected
    spread = 1.96 * math.sqrt(1 / 19 + 1 / 8 + 1 / 4 + 1 / 8)
    assert result.ci_low == pytest.approx(4.75 * math.exp(-spread))
    assert result.ci_high == pytest.approx(4.75 * math.exp(spread))


def test_odds_ratio_survives_swapping_rows_and_columns():
    result = odds_ratio_from_counts(19, 8, 4, 8)
    swapped = odds_ratio_from_counts(8, 4, 8, 19)

    assert swapped.odds_ratio == pytest.approx(result.odds_ratio)
    assert (swapped.ci_low, swapped.ci_high) == pytest.approx((result.ci_low, result.ci_high))


def test_odds_ratio_zero_cell_is_corrected():
    result = odds_ratio_from_counts(0, 10, 5, 5)

    assert result.corrected
    assert result.odds_ratio == pytest.approx((0.5 / 10.5) / (5.5 / 5.5))
    assert result.a == 0.5


def test_odds_ratios_from_sag():
    sag = np.array([8.0, 9.0, 6.0, -7.0, -6.0, -8.0, 0.0])
    indicator = np.array([1, 1, 0, 1, 0, 0, 1])
    result = odds_ratios(sag, indicator)

    assert (result.a, result.b, result.c, result.d) == (2.0, 1.0, 1.0, 2.0)
    assert result.odds_ratio == pytest.approx(4.0)

    with pytest.raises(StatisticsException):
        odds_ratios(np.array([8.0, 9.0]), np.array([1, 0]))


def test_icc_identical_rescans():
    values = np.linspace(30, 80, 20)
    result = icc_scan_rescan(np.column_stack([values, values]), bootstrap_reps=50)

    assert result.icc == pytest.approx(1.0)
    assert result.ci_low == pytest.approx(1.0)


def test_icc_independent_measurements_is_near_zero():
    pairs = np.random.default_rng(2).normal(size=(500, 2))

    assert abs(icc_1_1(pairs)) < 0.15


def test_icc_planted_reliability():
    rng = np.random.default_rng(3)
    subject = rng.normal(0, math.sqrt(3.0), 3000)
    pairs = subject[:, None] + rng.normal(0, 1.0, (3000, 2))

    assert icc_1_1(pairs) == pytest.approx(0.75, abs=0.03)


def test_icc_bootstrap_is_seeded():
    rng = np.random.default_rng(4)
    subject = rng.normal(0, 2.0, 40)
    pairs = subject[:, None] + rng.normal(0, 1.0, (40, 2))

    first = icc_scan_rescan(pairs, bootstrap_reps=100, seed=7)
    second = icc_scan_rescan(pairs, bootstrap_reps=100, seed=7)

    assert (first.ci_low, first.ci_high) == (second.ci_low, second.ci_high)
    assert first.ci_low <= first.icc <= first.ci_high


def test_icc_rejects_degenerate_input():
    assert math.isnan(icc_1_1(np.ones((5, 2))))
    with pytest.raises(StatisticsException):
        icc_scan_rescan(np.ones((5, 2)), bootstrap_reps=10)
    with pytest.raises(StatisticsException):
        icc_scan_rescan(np.ones((2, 2)), bootstrap_reps=10)


def test_icc_by_group_skips_small_groups():
    rng = np.random.default_rng(5)
    subject = rng.normal(50, 10, 6)
    pairs = np.column_stack([subject, subject + rng.normal(0, 1, 6)])
    groups = icc_by_group(pairs, ["M", "M", "M", "M", "F", "F"], np.full(6, 1.6), bootstrap_reps=20)

    assert [group.group for group in groups] == ["all", "male"]
    assert groups[0].mean_years == pytest.approx(1.6)
    assert icc_summary(groups).startswith("all: n=6 mean interval 1.60 y")


def test_heavy_work_by_age():
    table = heavy_work_by_age([2.0, 4.0, -1.0, 3.0], [31.0, 38.0, 35.0, 52.0], ["heavy", "heavy", "light", "light"])

    assert table[0] == [30, 2, 3.0, 1, -1.0]
    assert table[1][0] == 50
    assert table[1][1] == 0 and math.isnan(table[1][2])


def test_write_ols(tmp_path):
    x = np.array([0.0, 1.0, 2.0, 3.0])
    fit = fit_sag_ols([0.1, 1.2, 1.9, 3.1], x, ["x"], [0, 1, 0, 1])
    path = str(tmp_path / "ols.csv")
    write_ols(path, {"lifestyle": fit})

    rows = read_csv(path)
    assert [row["condition"] for row in rows] == ["x"]
    assert rows[0]["group"] == "lifestyle"


if __name__ == "__main__":
    test_bias_worked_example()
    test_odds_ratio_worked_example()
