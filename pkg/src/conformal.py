"""Nonconformity scores, weighted quantiles and global/Mondrian calibration."""

import logging
import typing as t
from dataclasses import dataclass

import numpy as np

from config import Mode
from dataset import FeatureTable

logger = logging.getLogger(__name__)

GLOBAL_KEY = -1
LEVEL_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-9
TINY_CLASS_SHARE = 1e-6


class CalibrationError(Exception):
    """Raise if a calibration pool or a calibrator cannot be used."""


@dataclass(frozen=True)
class CalibrationRecord:
    """One scored calibration point."""

    id: str  # pylint: disable = invalid-name
    score: float
    label: int
    weight: float


@dataclass(frozen=True)
class Calibrator:
    """Quantile thresholds per group at one level."""

    mode: Mode
    thresholds: t.Dict[int, float]
    level: float

    def threshold_for(self, predicted_class: int) -> float:
        """Threshold applying to a row with the given predicted class."""
        if self.mode == Mode.GLOBAL:
            return self.thresholds[GLOBAL_KEY]
        try:
            return self.thresholds[int(predicted_class)]
        except KeyError as err:
            raise CalibrationError(
                f"no calibration threshold for predicted class {predicted_class}"
            ) from err


def score_from_probs(probs: t.Sequence[float], label: int) -> float:
    """Nonconformity 1 - p[label]."""
    if not 0 <= label < len(probs):
        raise CalibrationError(f"label {label} out of range for {len(probs)} classes")
    return 1.0 - float(probs[label])


def build_records(
    ids: t.Sequence[str],
    probs: np.ndarray,
    labels: np.ndarray,
    normalized: np.ndarray,
) -> t.List[CalibrationRecord]:
    """Score every calibration row and attach its normalized weight."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if not len(ids) == len(probs) == len(labels) == len(normalized):
        raise CalibrationError("ids, probabilities, labels and weights differ in length")
    return [
        CalibrationRecord(
            id=row_id,
            score=score_from_probs(row_probs, int(label)),
            label=int(label),
            weight=float(weight),
        )
        for row_id, row_probs, label, weight in zip(ids, probs, labels, normalized)
    ]


def weighted_quantile(
    records: t.Sequence[CalibrationRecord], level: float, extra_mass: float = 0.0
) -> float:
    """Smallest score whose cumulative weight reaches ``level``.

    Tied scores enter the cumulative sum together. ``extra_mass`` is a point mass at
    +inf added to the denominator. Returns +inf when the level is never reached.
    """
    if not records:
        raise CalibrationError("weighted_quantile needs at least one record")
    if not 0 < level < 1:
        raise CalibrationError(f"level must be in (0, 1), got {level}")
    scores = np.array([record.score for record in records], dtype=float)
    weights = np.array([record.weight for record in records], dtype=float)
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("scores must be finite")
    distinct, group = np.unique(scores, return_inverse=True)
    cumulative = np.cumsum(np.bincount(group, weights=weights)) / (1.0 + extra_mass)
    reached = np.flatnonzero(cumulative >= level - LEVEL_TOL)
    if reached.size == 0:
        return float("inf")
    return float(distinct[reached[0]])


def prediction_set(probs: t.Sequence[float], threshold: float) -> t.Tuple[int, ...]:
    """Classes whose score 1 - p[y] is at most ``threshold``, ascending."""
    scores = 1.0 - np.asarray(probs, dtype=float)
    return tuple(int(k) for k in np.flatnonzero(scores <= threshold))


def _check_normalized(records: t.Sequence[CalibrationRecord]) -> None:
    total = sum(record.weight for record in records)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise CalibrationError(f"calibration weights sum to {total:.12g}, not 1")


def calibrate_global(
    records: t.Sequence[CalibrationRecord], level: float, extra_mass: float = 0.0
) -> Calibrator:
    """One threshold over the whole pool."""
    _check_normalized(records)
    threshold = weighted_quantile(records, level, extra_mass)
    return Calibrator(mode=Mode.GLOBAL, thresholds={GLOBAL_KEY: threshold}, level=level)


def _point_mass(raw: np.ndarray) -> float:
    return float(np.max(raw) / np.sum(raw))


def calibrate_mondrian(
    records: t.Sequence[CalibrationRecord],
    level: float,
    raw_weights: np.ndarray,
    test_point_mass: bool = False,
) -> Calibrator:
    """Per-class thresholds with raw weights renormalized inside each class."""
    raw = np.asarray(raw_weights, dtype=float)
    if len(raw) != len(records):
        raise CalibrationError("raw_weights and records differ in length")
    if not records:
        raise CalibrationError("calibrate_mondrian needs at least one record")
    labels = np.array([record.label for record in records])
    grand_total = float(raw.sum())
    thresholds = {}
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        total = float(raw[members].sum())
        if total <= 0:
            raise CalibrationError(f"class {label} has zero total weight")
        if grand_total > 0 and total / grand_total < TINY_CLASS_SHARE:
            logger.warning(
                "Class %d holds only %.3g of the calibration weight.", label, total / grand_total
            )
        class_records = [
            CalibrationRecord(
                id=records[i].id,
                score=records[i].score,
                label=records[i].label,
                weight=float(raw[i] / total),
            )
            for i in members
        ]
        extra = _point_mass(raw[members]) if test_point_mass else 0.0
        thresholds[int(label)] = weighted_quantile(class_records, level, extra)
    return Calibrator(mode=Mode.MONDRIAN, thresholds=thresholds, level=level)


def calibrate(
    records: t.Sequence[CalibrationRecord],
    level: float,
    mode: Mode,
    raw_weights: np.ndarray,
    test_point_mass: bool = False,
) -> Calibrator:
    """Dispatch to global or Mondrian calibration."""
    if Mode(mode) == Mode.MONDRIAN:
        return calibrate_mondrian(records, level, raw_weights, test_point_mass)
    extra = _point_mass(np.asarray(raw_weights, dtype=float)) if test_point_mass else 0.0
    return calibrate_global(records, level, extra)


def predict_all(
    test: FeatureTable,
    calibrator: Calibrator,
    predicted_class: t.Optional[np.ndarray] = None,
) -> t.List[t.Tuple[int, ...]]:
    """Prediction set for every test row."""
    if test.class_probs is None:
        raise CalibrationError("test table has no class probabilities")
    if predicted_class is None:
        predicted_class = test.predicted_class()
    thresholds = np.array([calibrator.threshold_for(c) for c in predicted_class], dtype=float)
    included = (1.0 - test.class_probs) <= thresholds[:, None]
    return [tuple(int(k) for k in np.flatnonzero(row)) for row in included]
