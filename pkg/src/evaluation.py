"""Coverage curves, calibration metrics, diagnostics and experiment reports."""

import json
import logging
import math
import typing as t
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from conformal import CalibrationRecord, calibrate, predict_all
from config import Method, Mode
from dataset import FeatureTable
from weighting import WeightSet

logger = logging.getLogger(__name__)

RECOMPUTE_TOL = 1e-12
# report floats carry 17 significant digits
FLOAT_FORMAT = ".17g"
JSON_INDENT = "  "

AGGREGATE_COLUMNS = [
    "dataset",
    "method",
    "mode",
    "level",
    "coverage_mean",
    "coverage_std",
    "mad_mean",
    "mad_std",
    "ess_mean",
    "mmd_mean",
    "retained_fraction_mean",
]
CURVE_COLUMNS = [
    "dataset",
    "method",
    "mode",
    "level",
    "coverage_mean",
    "coverage_std",
    "set_size_mean",
]


class ReportError(Exception):
    """Raise if a curve or report violates its invariants."""


@dataclass(frozen=True)
class CoverageCurve:
    """Empirical coverage per nominal level over the evaluated test rows."""

    levels: t.Tuple[float, ...]
    empirical: t.Tuple[float, ...]
    n_evaluated: int
    set_size: t.Tuple[float, ...] = ()
    class_coverage: t.Dict[int, t.Tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Check list lengths and level ordering."""
        if len(self.levels) != len(self.empirical):
            raise ReportError("levels and empirical coverage differ in length")
        if self.set_size and len(self.set_size) != len(self.levels):
            raise ReportError("set_size and levels differ in length")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ReportError("levels must be strictly increasing")
        if any(not 0 <= value <= 1 for value in self.empirical):
            raise ReportError("empirical coverage must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentReport:  # pylint: disable = too-many-instance-attributes
    """Outcome of one (method, mode, seed) run."""

    dataset: str
    method: Method
    mode: Mode
    curve: CoverageCurve
    mad: float
    ess: float
    mmd: float
    proxy: float
    bound_variance_term: float
    retained_fraction: float
    seed: int
    config: t.Dict[str, t.Any]


def empirical_coverage(sets: t.Sequence[t.Collection[int]], labels: t.Sequence[int]) -> float:
    """Fraction of rows whose label lies in its prediction set."""
    if len(sets) != len(labels):
        raise ReportError("sets and labels differ in length")
    if not sets:
        raise ReportError("empirical_coverage needs at least one row")
    return sum(int(label) in row for row, label in zip(sets, labels)) / len(sets)


def mean_set_size(sets: t.Sequence[t.Collection[int]]) -> float:
    """Average prediction-set size."""
    if not sets:
        raise ReportError("mean_set_size needs at least one row")
    return float(np.mean([len(row) for row in sets]))


def mad(curve: CoverageCurve) -> float:
    """Mean absolute gap between empirical and nominal coverage."""
    if not curve.levels:
        raise ReportError("empty coverage curve")
    return float(np.mean(np.abs(np.subtract(curve.empirical, curve.levels))))


def bias_variance_proxy(mmd_value: float, ess_value: float) -> float:
    """MMD + sqrt(1 / ESS)."""
    return mmd_value + math.sqrt(1.0 / ess_value)


def coverage_bound_variance_term(ess_value: float, delta: float) -> float:
    """(5 + sqrt(0.5 ln(1/delta))) * sqrt(1 / ESS)."""
    return (5.0 + math.sqrt(0.5 * math.log(1.0 / delta))) * math.sqrt(1.0 / ess_value)


def evaluated_targets(test: FeatureTable, weights: WeightSet) -> FeatureTable:
    """Test rows the coverage is measured on: the selected targets for skmm."""
    if weights.selected_target_ids is None:
        return test
    return test.select_ids(weights.selected_target_ids)


def evaluate_curve(  # pylint: disable = too-many-arguments
    records: t.Sequence[CalibrationRecord],
    raw_weights: np.ndarray,
    test: FeatureTable,
    mode: Mode,
    levels: t.Sequence[float],
    test_point_mass: bool = False,
) -> CoverageCurve:
    """Calibrate at every level and measure coverage and set size on ``test``."""
    if test.labels is None:
        raise ReportError("test table has no labels")
    predicted = test.predicted_class()
    labels = test.labels
    classes = sorted(int(c) for c in np.unique(labels))
    empirical, sizes = [], []
    per_class: t.Dict[int, t.List[float]] = {c: [] for c in classes}
    for level in levels:
        calibrator = calibrate(records, level, mode, raw_weights, test_point_mass)
        sets = predict_all(test, calibrator, predicted)
        empirical.append(empirical_coverage(sets, labels))
        sizes.append(mean_set_size(sets))
        for c in classes:
            rows = np.flatnonzero(labels == c)
            per_class[c].append(empirical_coverage([sets[i] for i in rows], labels[rows]))
    return CoverageCurve(
        levels=tuple(float(level) for level in levels),
        empirical=tuple(empirical),
        n_evaluated=test.n_rows,
        set_size=tuple(sizes),
        class_coverage={c: tuple(values) for c, values in per_class.items()},
    )


def build_report(  # pylint: disable = too-many-arguments
    dataset: str,
    mode: Mode,
    curve: CoverageCurve,
    weights: WeightSet,
    seed: int,
    config: t.Mapping[str, t.Any],
    delta: float,
) -> ExperimentReport:
    """Assemble a report; derived metrics are always recomputed here."""
    if weights.mmd is None:
        raise ReportError(f"{weights.method.value} weights carry no MMD")
    if not 1 <= weights.ess <= len(weights.raw):
        raise ReportError(f"ESS {weights.ess} outside [1, n]")
    retained = weights.retained_fraction
    if not 0 < retained <= 1:
        raise ReportError(f"retained fraction {retained} outside (0, 1]")
    snapshot = {key: _plain(value) for key, value in config.items()}
    snapshot.update({f"diagnostics.{k}": _plain(v) for k, v in weights.diagnostics.items()})
    snapshot["weights.converged"] = weights.converged
    return ExperimentReport(
        dataset=dataset,
        method=weights.method,
        mode=Mode(mode),
        curve=curve,
        mad=mad(curve),
        ess=weights.ess,
        mmd=weights.mmd,
        proxy=bias_variance_proxy(weights.mmd, weights.ess),
        bound_variance_term=coverage_bound_variance_term(weights.ess, delta),
        retained_fraction=retained,
        seed=seed,
        config=dict(sorted(snapshot.items())),
    )


def _plain(value: t.Any) -> t.Any:
    """Convert numpy scalars, enums, paths and tuples to JSON-ready values."""
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (tuple, list)):
        return [_plain(item) for item in value]
    return value


def report_to_dict(report: ExperimentReport) -> t.Dict[str, t.Any]:
    """Plain-dict form with the same keys as the report fields."""
    data = asdict(report)
    data["method"] = report.method.value
    data["mode"] = report.mode.value
    data["curve"]["levels"] = list(report.curve.levels)
    data["curve"]["empirical"] = list(report.curve.empirical)
    data["curve"]["set_size"] = list(report.curve.set_size)
    data["curve"]["class_coverage"] = {
        str(c): list(values) for c, values in report.curve.class_coverage.items()
    }
    return data


def _json_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"report value {value!r} is not finite")
    text = format(value, FLOAT_FORMAT)
    return text if any(char in text for char in ".e") else text + ".0"


def _json_text(value: t.Any, depth: int = 0) -> str:
    """JSON with sorted keys, two-space indent and fixed-precision floats."""
    inner = JSON_INDENT * (depth + 1)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            f"{inner}{json.dumps(str(key))}: {_json_text(item, depth + 1)}"
            for key, item in sorted(value.items(), key=lambda pair: str(pair[0]))
        ]
        return "{\n" + ",\n".join(items) + "\n" + JSON_INDENT * depth + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [inner + _json_text(item, depth + 1) for item in value]
        return "[\n" + ",\n".join(items) + "\n" + JSON_INDENT * depth + "]"
    value = _plain(value)
    if isinstance(value, float):
        return _json_float(value)
    return json.dumps(value)


def report_to_json(report: ExperimentReport) -> str:
    """Serialize deterministically; floats are written with 17 significant digits."""
    return _json_text(report_to_dict(report)) + "\n"


def report_from_json(text: str) -> ExperimentReport:
    """Inverse of :func:`report_to_json`."""
    try:
        data = json.loads(text)
        curve = data.pop("curve")
        report = ExperimentReport(
            method=Method(data.pop("method")),
            mode=Mode(data.pop("mode")),
            curve=CoverageCurve(
                levels=tuple(curve["levels"]),
                empirical=tuple(curve["empirical"]),
                n_evaluated=curve["n_evaluated"],
                set_size=tuple(curve["set_size"]),
                class_coverage={
                    int(c): tuple(values) for c, values in curve["class_coverage"].items()
                },
            ),
            **data,
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ReportError(f"malformed report: {err}") from err
    if abs(mad(report.curve) - report.mad) > RECOMPUTE_TOL:
        raise ReportError("report mad does not match its curve")
    if abs(bias_variance_proxy(report.mmd, report.ess) - report.proxy) > RECOMPUTE_TOL:
        raise ReportError("report proxy does not match mmd and ess")
    return report


def write_report(report: ExperimentReport, path: Path) -> bool:
    """Write one report as JSON."""
    try:
        Path(path).write_text(report_to_json(report), encoding="utf-8")
    except OSError as err:
        logger.error(err)
        logger.info("Writing report to %s - Failed.", path)
        return False
    logger.info("Writing report to %s - Done.", path)
    return True


def _level_rows(reports: t.Iterable[ExperimentReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        sizes = report.curve.set_size or (float("nan"),) * len(report.curve.levels)
        for level, coverage, size in zip(report.curve.levels, report.curve.empirical, sizes):
            rows.append(
                {
                    "dataset": report.dataset,
                    "method": report.method.value,
                    "mode": report.mode.value,
                    "level": level,
                    "coverage": coverage,
                    "set_size": size,
                    "mad": report.mad,
                    "ess": report.ess,
                    "mmd": report.mmd,
                    "retained_fraction": report.retained_fraction,
                }
            )
    return pd.DataFrame(
        rows,
        columns=[
            "dataset",
            "method",
            "mode",
            "level",
            "coverage",
            "set_size",
            "mad",
            "ess",
            "mmd",
            "retained_fraction",
        ],
    )


def aggregate_reports(reports: t.Iterable[ExperimentReport]) -> pd.DataFrame:
    """One row per (dataset, method, mode, level) with means over seeds."""
    grouped = _level_rows(reports).groupby(["dataset", "method", "mode", "level"], sort=True)
    frame = grouped.agg(
        coverage_mean=("coverage", "mean"),
        coverage_std=("coverage", lambda s: float(np.std(s, ddof=0))),
        mad_mean=("mad", "mean"),
        mad_std=("mad", lambda s: float(np.std(s, ddof=0))),
        ess_mean=("ess", "mean"),
        mmd_mean=("mmd", "mean"),
        retained_fraction_mean=("retained_fraction", "mean"),
    ).reset_index()
    return frame[AGGREGATE_COLUMNS]


def curve_table(reports: t.Iterable[ExperimentReport]) -> pd.DataFrame:
    """Plot-ready coverage curve per (dataset, method, mode, level)."""
    grouped = _level_rows(reports).groupby(["dataset", "method", "mode", "level"], sort=True)
    frame = grouped.agg(
        coverage_mean=("coverage", "mean"),
        coverage_std=("coverage", lambda s: float(np.std(s, ddof=0))),
        set_size_mean=("set_size", "mean"),
    ).reset_index()
    return frame[CURVE_COLUMNS]


def write_table(frame: pd.DataFrame, path: Path) -> bool:
    """Write an aggregate or curve table as CSV with 17 significant digits."""
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as err:
        logger.error(err)
        logger.info("Writing table to %s - Failed.", path)
        return False
    logger.info("Writing table to %s - Done.", path)
    return True
