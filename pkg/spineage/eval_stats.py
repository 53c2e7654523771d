"""
Bias correction, accuracy metrics and the spine-age-gap (SAG) statistics:
OLS associations, odds ratios and scan-rescan ICC.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy import linalg, optimize, special

from .report_features import (
    DENSE_INDEX,
    DENSE_SIZE,
    STRUCTURAL_KINDS,
    ConditionKind,
    Region,
    Severity,
)
from .utils import write_csv

logger = logging.getLogger(__name__)

MIN_SLOPE = 1e-6
Z_95 = 1.96

OLS_CSV_HEADER = ["condition", "n", "effect", "ci_low", "ci_high", "significant"]
ODDS_CSV_HEADER = ["condition", "a", "b", "c", "d", "odds_ratio", "ci_low", "ci_high", "corrected"]
ICC_CSV_HEADER = ["group", "n", "mean_years", "icc", "ci_low", "ci_high"]

# (kind, severity, count must exceed) per regression indicator, most severe first within a kind
DEGENERATIVE_ROWS = [
    (ConditionKind.DISC_BULGE, Severity.SEVERE, 0),
    (ConditionKind.DISC_BULGE, Severity.MODERATE, 1),
    (ConditionKind.DISC_BULGE, Severity.MILD, 2),
    (ConditionKind.DESICCATION, Severity.NEAR_COMPLETE, 0),
    (ConditionKind.DESICCATION, Severity.SEVERE, 0),
    (ConditionKind.DESICCATION, Severity.MODERATE, 0),
    (ConditionKind.DESICCATION, Severity.MILD, 1),
    (ConditionKind.ANNULAR_FISSURE, Severity.PRESENT, 0),
    (ConditionKind.ENDPLATE_CHANGE, Severity.PRESENT, 0),
    (ConditionKind.DISC_OSTEOPHYTE_COMPLEX, Severity.MODERATE, 0),
    (ConditionKind.DISC_OSTEOPHYTE_COMPLEX, Severity.MILD, 1),
    (ConditionKind.UNCOVERTEBRAL_OSTEOPHYTE, Severity.MODERATE, 0),
    (ConditionKind.UNCOVERTEBRAL_OSTEOPHYTE, Severity.MILD, 1),
    (ConditionKind.PROTRUSION, Severity.MODERATE, 0),
    (ConditionKind.PROTRUSION, Severity.MILD, 1),
    (ConditionKind.EXTRUSION, Severity.MILD, 0),
]

COVARIATE_GROUPS = (
    "lumbar_degenerative", "structural", "lifestyle", "cervical_degenerative", "thoracic_degenerative",
)


class StatisticsException(Exception):
    pass


class RankDeficiencyException(StatisticsException):
    pass


class EmptyBracketException(StatisticsException):
    pass


@dataclass
class StatsConfig:
    bootstrap_reps: int = 2000
    confidence: float = 0.95
    sag_high: float = 5.0
    sag_low: float = -5.0
    discrepancy_years: float = 15.0
    age_bin_years: int = 10
    seed: int = 0


@dataclass
class BiasCorrection:
    alpha: float
    beta: float

    def __post_init__(self):
        if abs(self.alpha) < MIN_SLOPE:
            raise StatisticsException("Bias slope {} is degenerate".format(self.alpha))


def fit_bias(ages, predictions) -> BiasCorrection:
    """Least-squares fit of predictions on ages: prediction = alpha * age + beta."""
    ages = np.asarray(ages, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if ages.shape != predictions.shape or ages.size < 2:
        raise StatisticsException("Bias fit needs at least two matched (age, prediction) pairs")
    if np.ptp(ages) == 0:
        raise StatisticsException("Bias fit needs at least two distinct ages")

    alpha, beta = np.polyfit(ages, predictions, 1)
    return BiasCorrection(float(alpha), float(beta))


def apply_bias(correction: BiasCorrection, predictions):
    return (np.asarray(predictions, dtype=np.float64) - correction.beta) / correction.alpha


def _pairs(ages, predictions):
    ages = np.asarray(ages, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if ages.shape != predictions.shape:
        raise StatisticsException("Ages and predictions differ in length")
    if ages.size == 0:
        raise StatisticsException("Metrics need at least one prediction")
    return ages, predictions


def mae(ages, predictions):
    ages, predictions = _pairs(ages, predictions)
    return float(np.mean(np.abs(predictions - ages)))


def wmae(ages, predictions, brackets, required=None):
    """Unweighted mean of the per-bracket MAEs."""
    ages, predictions = _pairs(ages, predictions)
    brackets = np.asarray(brackets)
    required = sorted(set(brackets.tolist())) if required is None else list(required)

    empty = [bracket for bracket in required if not np.any(brackets == bracket)]
    if empty:
        raise EmptyBracketException("No predictions in bracket(s) {}".format(", ".join(str(b) for b in empty)))

    return float(np.mean([mae(ages[brackets == bracket], predictions[brackets == bracket]) for bracket in required]))


def r2(ages, predictions):
    ages, predictions = _pairs(ages, predictions)
    total = np.sum((ages - ages.mean()) ** 2)
    if total == 0:
        raise StatisticsException("R^2 is undefined when all ages are equal")
    return float(1.0 - np.sum((ages - predictions) ** 2) / total)


@dataclass
class EvalRow:
    subject_id: str
    age: float
    bracket: int
    raw: float
    corrected: float

    @property
    def sag(self):
        return self.corrected - self.age


@dataclass
class EvalReport:
    rows: List[EvalRow]
    correction: BiasCorrection
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def sag(self):
        return np.array([row.sag for row in self.rows])

    def metric_row(self):
        return [self.metrics[name] for name in METRIC_COLUMNS]


METRIC_COLUMNS = ["mae", "r2", "wmae", "mae_corrected", "r2_corrected", "wmae_corrected"]


def evaluate(subject_ids, ages, brackets, raw_predictions, correction: BiasCorrection) -> EvalReport:
    ages = np.asarray(ages, dtype=np.float64)
    raw_predictions = np.asarray(raw_predictions, dtype=np.float64)
    corrected = apply_bias(correction, raw_predictions)

    rows = [EvalRow(subject_id, float(age), int(bracket), float(raw), float(fixed))
            for subject_id, age, bracket, raw, fixed in zip(subject_ids, ages, brackets, raw_predictions, corrected)]
    metrics = {
        "mae": mae(ages, raw_predictions),
        "r2": r2(ages, raw_predictions),
        "wmae": wmae(ages, raw_predictions, brackets),
        "mae_corrected": mae(ages, corrected),
        "r2_corrected": r2(ages, corrected),
        "wmae_corrected": wmae(ages, corrected, brackets),
    }
    logger.info("MAE %.3f -> %.3f, R2 %.3f -> %.3f after bias correction",
                metrics["mae"], metrics["mae_corrected"], metrics["r2"], metrics["r2_corrected"])

    return EvalReport(rows, correction, metrics)


def t_cdf(value, dof):
    """Student-t CDF from the regularised incomplete beta function."""
    tail = 0.5 * special.betainc(0.5 * dof, 0.5, dof / (dof + value * value))
    return 1.0 - tail if value > 0 else tail


def t_quantile(probability, dof):
    if not 0 < probability < 1 or dof <= 0:
        raise StatisticsException("t quantile needs 0 < p < 1 and positive dof")
    if probability == 0.5:
        return 0.0
    if probability < 0.5:
        return -t_quantile(1.0 - probability, dof)

    upper = 1.0
    while t_cdf(upper, dof) < probability:
        upper *= 2.0
    return optimize.bisect(lambda value: t_cdf(value, dof) - probability, 0.0, upper, xtol=1e-14, maxiter=200)


@dataclass
class OlsFit:
    names: List[str]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    counts: List[int]
    dof: int
    residuals: np.ndarray

    @property
    def significant(self):
        return (self.ci_low > 0) | (self.ci_high < 0)

    def coefficient(self, name):
        return float(self.coefficients[self.names.index(name)])

    def rows(self, skip=("intercept", "male")):
        return [
            [name, count, effect, low, high, flag]
            for name, count, effect, low, high, flag in zip(
                self.names, self.counts, self.coefficients, self.ci_low, self.ci_high, self.significant)
            if name not in skip
        ]


def _collinear_columns(design, names):
    kept = []
    for column in range(design.shape[1]):
        trial = kept + [column]
        if np.linalg.matrix_rank(design[:, trial]) < len(trial):
            return names[column], [names[index] for index in kept]
        kept = trial
    return None, []


def fit_ols(design, response, names: Sequence[str], confidence=0.95) -> OlsFit:
    """OLS through the normal equations with t-based confidence intervals."""
    design = np.asarray(design, dtype=np.float64)
    response = np.asarray(response, dtype=np.float64)
    names = list(names)
    n, p = design.shape
    if len(names) != p or response.shape != (n,):
        raise StatisticsException("Design has {} columns for {} names and {} rows for {} responses".format(
            p, len(names), n, response.size))

    if np.linalg.matrix_rank(design) < p:
        column, basis = _collinear_columns(design, names)
        raise RankDeficiencyException("Design matrix is rank deficient: {} is collinear with {}".format(
            column, ", ".join(basis) or "nothing (all zero)"))
    if n <= p:
        raise StatisticsException("OLS needs more rows ({}) than columns ({})".format(n, p))

    gram = design.T @ design
    coefficients = linalg.solve(gram, design.T @ response, assume_a='gen')
    residuals = response - design @ coefficients
    dof = n - p
    variance = float(residuals @ residuals) / dof
    standard_errors = np.sqrt(np.clip(np.diag(linalg.inv(gram)) * variance, 0.0, None))
    half_width = t_quantile(0.5 + 0.5 * confidence, dof) * standard_errors
    counts = [int(np.count_nonzero(design[:, column])) for column in range(p)]

    return OlsFit(names, coefficients, standard_errors, coefficients - half_width, coefficients + half_width,
                  counts, dof, residuals)


def fit_sag_ols(sag, covariates, names: Sequence[str], male, confidence=0.95) -> OlsFit:
    """SAG regressed on the covariate columns, always with an intercept and a sex indicator."""
    sag = np.asarray(sag, dtype=np.float64)
    covariates = np.asarray(covariates, dtype=np.float64).reshape(sag.size, -1)
    design = np.column_stack([np.ones(sag.size), np.asarray(male, dtype=np.float64), covariates])
    return fit_ols(design, sag, ["intercept", "male"] + list(names), confidence)


def _region_counts(dense_row, region, kind, severity):
    return dense_row[DENSE_INDEX[(region, kind, severity)]]


def degenerative_design(dense, region: Region):
    """
    Severity-exclusive indicators: for each kind a subject falls in the most severe
    row whose count threshold it exceeds, and in no other row of that kind.
    """
    dense = np.asarray(dense).reshape(-1, DENSE_SIZE)
    rows = [(kind, severity, threshold) for kind, severity, threshold in DEGENERATIVE_ROWS
            if (region, kind, severity) in DENSE_INDEX]
    names = ["{} {} (No.>{})".format(severity.value, kind.value, threshold) for kind, severity, threshold in rows]
    design = np.zeros((dense.shape[0], len(rows)))

    for subject, dense_row in enumerate(dense):
        assigned = set()
        for column, (kind, severity, threshold) in enumerate(rows):
            if kind in assigned:
                continue
            if _region_counts(dense_row, region, kind, severity) > threshold:
                design[subject, column] = 1.0
                assigned.add(kind)

    return design, names


def structural_design(dense):
    dense = np.asarray(dense).reshape(-1, DENSE_SIZE)
    flags = dense[:, DENSE_SIZE - len(STRUCTURAL_KINDS):].astype(np.float64)
    return flags, [kind.value for kind in STRUCTURAL_KINDS]


def lifestyle_design(covariates: List[Dict[str, object]]):
    """Continuous smoking, alcohol and sedentary time plus work and exercise indicators."""
    names = ["packs_per_day", "alcohol_days", "sedentary_hours",
             "moderate_work", "heavy_work", "moderate_exercise", "vigorous_exercise"]
    design = np.array([
        [
            float(entry["packs_per_day"]),
            float(entry["alcohol_days"]),
            float(entry["sedentary_hours"]),
            float(entry["work_level"] == "moderate"),
            float(entry["work_level"] == "heavy"),
            float(entry["exercise_level"] == "moderate"),
            float(entry["exercise_level"] == "vigorous"),
        ]
        for entry in covariates
    ]).reshape(len(covariates), len(names))
    return design, names


def covariate_design(group, dense, covariates):
    if group not in COVARIATE_GROUPS:
        raise StatisticsException("Unknown covariate group {!r}; expected one of {}".format(
            group, ", ".join(COVARIATE_GROUPS)))
    if group == "structural":
        return structural_design(dense)
    if group == "lifestyle":
        return lifestyle_design(covariates)
    return degenerative_design(dense, Region(group.split("_")[0]))


def drop_constant_columns(design, names, group=""):
    keep = [column for column in range(design.shape[1]) if np.ptp(design[:, column]) > 0]
    dropped = [names[column] for column in range(design.shape[1]) if column not in keep]
    if dropped:
        logger.warning("Dropping constant covariates from %s: %s", group or "design", ", ".join(dropped))
    return design[:, keep], [names[column] for column in keep]


@dataclass
class OddsRatioResult:
    a: float
    b: float
    c: float
    d: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    corrected: bool

    def row(self, condition):
        return [condition, self.a, self.b, self.c, self.d, self.odds_ratio, self.ci_low, self.ci_high,
                self.corrected]


def odds_ratio_from_counts(a, b, c, d) -> OddsRatioResult:
    """
    Rows are SAG groups (high, low), columns condition (present, absent):
    a = high & present, b = high & absent, c = low & present, d = low & absent.
    """
    corrected = min(a, b, c, d) == 0
    if corrected:
        a, b, c, d = (value + 0.5 for value in (a, b, c, d))

    odds_ratio = (a / b) / (c / d)
    spread = Z_95 * math.sqrt(1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d)
    log_or = math.log(odds_ratio)

    return OddsRatioResult(float(a), float(b), float(c), float(d), odds_ratio,
                           math.exp(log_or - spread), math.exp(log_or + spread), corrected)


def odds_ratios(sag, indicator, sag_high_threshold=5.0, sag_low_threshold=-5.0) -> OddsRatioResult:
    sag = np.asarray(sag, dtype=np.float64)
    indicator = np.asarray(indicator).astype(bool)
    high = sag > sag_high_threshold
    low = sag < sag_low_threshold
    if not high.any() or not low.any():
        raise StatisticsException("Both SAG groups must be nonempty (high {}, low {})".format(
            int(high.sum()), int(low.sum())))

    return odds_ratio_from_counts(
        int(np.sum(high & indicator)), int(np.sum(high & ~indicator)),
        int(np.sum(low & indicator)), int(np.sum(low & ~indicator)),
    )


@dataclass
class IccResult:
    icc: float
    ci_low: float
    ci_high: float
    n: int
    k: int = 2


def icc_1_1(measurements):
    """One-way random-effects single-measure ICC over an [n, k] matrix; NaN when there is no variance."""
    measurements = np.asarray(measurements, dtype=np.float64)
    n, k = measurements.shape
    subject_means = measurements.mean(axis=1)
    between = k * np.sum((subject_means - measurements.mean()) ** 2) / (n - 1)
    within = np.sum((measurements - subject_means[:, None]) ** 2) / (n * (k - 1))
    denominator = between + (k - 1) * within
    if denominator == 0:
        return math.nan
    return float(np.clip((between - within) / denominator, -1.0, 1.0))


def icc_scan_rescan(pairs, bootstrap_reps=2000, seed=0, confidence=0.95) -> IccResult:
    """ICC(1,1) with a percentile bootstrap over subjects; replicate i draws from its own seeded stream."""
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise StatisticsException("Each subject needs exactly two measurements, got shape {}".format(pairs.shape))
    n = pairs.shape[0]
    if n < 3:
        raise StatisticsException("ICC needs at least 3 subjects, got {}".format(n))

    estimate = icc_1_1(pairs)
    if math.isnan(estimate):
        raise StatisticsException("ICC is undefined when every measurement is identical")

    replicates = np.array([
        icc_1_1(pairs[np.random.default_rng([seed, replicate]).integers(0, n, size=n)])
        for replicate in range(bootstrap_reps)
    ])
    tail = 50.0 * (1.0 - confidence)
    low, high = np.nanpercentile(replicates, [tail, 100.0 - tail]) if bootstrap_reps else (estimate, estimate)

    return IccResult(estimate, float(low), float(high), n)


@dataclass
class IccGroup:
    group: str
    mean_years: float
    result: IccResult

    def row(self):
        return [self.group, self.result.n, self.mean_years, self.result.icc, self.result.ci_low, self.result.ci_high]


def icc_by_group(pairs, sexes, years, bootstrap_reps=2000, seed=0) -> List[IccGroup]:
    """ICC for the whole rescan set and for each sex; groups with fewer than 3 subjects are skipped."""
    pairs = np.asarray(pairs, dtype=np.float64)
    sexes = np.asarray(sexes)
    years = np.asarray(years, dtype=np.float64)
    groups = []

    for name, members in (("all", np.ones(len(pairs), dtype=bool)), ("male", sexes == "M"), ("female", sexes == "F")):
        if members.sum() < 3:
            logger.warning("Skipping ICC for %s: only %d rescanned subjects", name, int(members.sum()))
            continue
        result = icc_scan_rescan(pairs[members], bootstrap_reps, seed)
        groups.append(IccGroup(name, float(years[members].mean()), result))

    return groups


def abs_error_table(report: EvalReport, sexes: Dict[str, str]):
    """Mean absolute corrected error per (sex, bracket)."""
    table = []
    for sex in ("F", "M"):
        for bracket in sorted({row.bracket for row in report.rows}):
            errors = [abs(row.sag) for row in report.rows if row.bracket == bracket and sexes[row.subject_id] == sex]
            if errors:
                table.append([sex, bracket, len(errors), float(np.mean(errors))])
    return table


def large_discrepancies(report: EvalReport, threshold=15.0):
    return [[row.subject_id, row.age, row.corrected, row.sag] for row in report.rows if abs(row.sag) > threshold]


def heavy_work_by_age(sag, ages, work_levels, bin_years=10):
    """Mean SAG per age bin for subjects with and without physically heavy work."""
    sag = np.asarray(sag, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    heavy = np.asarray(work_levels) == "heavy"
    bins = (np.floor(ages / bin_years) * bin_years).astype(int)

    table = []
    for start in sorted(set(bins.tolist())):
        in_bin = bins == start
        row = [start]
        for members in (in_bin & heavy, in_bin & ~heavy):
            row.extend([int(members.sum()), float(sag[members].mean()) if members.any() else math.nan])
        table.append(row)
    return table


def write_ols(path, fits: Dict[str, OlsFit]):
    write_csv(path, ["group"] + OLS_CSV_HEADER,
              ([group] + row for group, fit in fits.items() for row in fit.rows()))


def icc_summary(groups: List[IccGroup]):
    lines = []
    for group in groups:
        lines.append("{}: n={} mean interval {:.2f} y, ICC {:.3f} (95% CI {:.3f} to {:.3f})".format(
            group.group, group.result.n, group.mean_years, group.result.icc, group.result.ci_low,
            group.result.ci_high))
    return "\n".join(lines) + "\n"
