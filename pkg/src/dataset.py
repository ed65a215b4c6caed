"""Sample tables, CSV ingestion, dataset splits and synthetic covariate shift."""

import logging
import math
import typing as t
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config import LabelRule, SplitMode, SplitSpec, SyntheticShiftSpec

logger = logging.getLogger(__name__)

PROB_SUM_TOL = 1e-6


class DatasetError(Exception):
    """Raise if a table cannot be built, read or split."""


@dataclass(frozen=True)
class FeatureTable:
    """Labeled or unlabeled samples keyed by unique string ids."""

    ids: t.Tuple[str, ...]
    features: np.ndarray
    labels: t.Optional[np.ndarray] = None
    class_probs: t.Optional[np.ndarray] = None
    n_label_classes: t.Optional[int] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        """Validate the table invariants."""
        features = np.array(self.features, dtype=float)
        if features.ndim != 2 or features.shape[1] < 1:
            raise DatasetError("features must be a 2-d matrix with at least one column")
        if features.shape[0] != len(self.ids):
            raise DatasetError("ids and feature rows differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("duplicate id")
        if not np.all(np.isfinite(features)):
            raise DatasetError("features must be finite")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)

        if self.class_probs is not None:
            probs = np.array(self.class_probs, dtype=float)
            if probs.ndim != 2 or probs.shape[0] != features.shape[0]:
                raise DatasetError("class_probs must have one row per sample")
            if np.any(probs < 0) or np.any(probs > 1):
                raise DatasetError("class probabilities must lie in [0, 1]")
            if np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_SUM_TOL):
                raise DatasetError("probability row not normalized")
            probs.setflags(write=False)
            object.__setattr__(self, "class_probs", probs)

        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (features.shape[0],):
                raise DatasetError("labels must have one entry per sample")
            if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DatasetError("labels must be integers")
            labels = labels.astype(int)
            n_classes = self.n_classes
            if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
                raise DatasetError(f"labels must lie in [0, {n_classes})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        """Number of samples."""
        return len(self.ids)

    @property
    def dim(self) -> int:
        """Feature dimensionality."""
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        """Number of classes K, from class_probs, the declared count or the labels."""
        if self.class_probs is not None:
            return int(self.class_probs.shape[1])
        if self.n_label_classes is not None:
            return self.n_label_classes
        if self.labels is not None and len(self.labels):
            return int(np.max(self.labels)) + 1
        return 0

    def subset(self, indices: t.Sequence[int]) -> "FeatureTable":
        """Return the rows at ``indices`` in the given order."""
        index = np.asarray(indices, dtype=int)
        return FeatureTable(
            ids=tuple(self.ids[i] for i in index),
            features=self.features[index],
            labels=None if self.labels is None else self.labels[index],
            class_probs=None if self.class_probs is None else self.class_probs[index],
            n_label_classes=self.n_label_classes,
        )

    def select_ids(self, ids: t.Iterable[str]) -> "FeatureTable":
        """Return the rows whose id is in ``ids``, keeping table order."""
        wanted = set(ids)
        return self.subset([i for i, row_id in enumerate(self.ids) if row_id in wanted])

    def predicted_class(self) -> np.ndarray:
        """Argmax class per row; ties go to the lowest class index."""
        if self.class_probs is None:
            raise DatasetError("table has no class probabilities")
        return np.argmax(self.class_probs, axis=1)


@dataclass(frozen=True)
class SyntheticShift:
    """A generated source/target pair plus target component membership."""

    source: FeatureTable
    target: FeatureTable
    in_support: np.ndarray


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def ingest_features_csv(path: Path, has_labels: bool = True, n_prob_cols: int = 0) -> FeatureTable:
    """Read a table with header ``id,f0,...,f{d-1}[,label][,p0,...,p{K-1}]``."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    if n_prob_cols < 0:
        raise DatasetError("n_prob_cols must be non-negative")
    try:
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    except (OSError, ValueError, pd.errors.ParserError) as err:
        raise DatasetError(f"cannot parse {path}: {err}") from err

    if "id" not in frame.columns:
        raise DatasetError(f"{path}: header has no 'id' column")
    feature_cols = [f"f{i}" for i in range(len(frame.columns)) if f"f{i}" in frame.columns]
    if not feature_cols:
        raise DatasetError(f"{path}: no feature columns f0..")

    try:
        features = frame[feature_cols].apply(pd.to_numeric, errors="raise").to_numpy(float)
    except (ValueError, TypeError) as err:
        raise DatasetError(f"{path}: non-numeric feature cell: {err}") from err

    labels = None
    if has_labels:
        if "label" in frame.columns:
            labels = pd.to_numeric(frame["label"], errors="coerce").to_numpy()
            if np.any(np.isnan(labels)):
                raise DatasetError(f"{path}: non-numeric label cell")
        else:
            logger.warning("%s has no 'label' column; labels left empty.", path)

    class_probs = None
    if n_prob_cols:
        prob_cols = [f"p{k}" for k in range(n_prob_cols)]
        missing = [col for col in prob_cols if col not in frame.columns]
        if missing:
            logger.warning("%s lacks probability columns %s; left empty.", path, missing)
        else:
            try:
                class_probs = frame[prob_cols].apply(pd.to_numeric, errors="raise").to_numpy(float)
            except (ValueError, TypeError) as err:
                raise DatasetError(f"{path}: non-numeric probability cell: {err}") from err

    table = FeatureTable(
        ids=tuple(str(row_id) for row_id in frame["id"]),
        features=features,
        labels=labels,
        class_probs=class_probs,
    )
    logger.info("Read %d rows with d=%d from %s.", table.n_rows, table.dim, path)
    return table


def write_features_csv(table: FeatureTable, path: Path) -> bool:
    """Write a table in the ingestion schema, reals at 17 significant digits."""
    columns: t.Dict[str, t.Any] = {"id": list(table.ids)}
    for j in range(table.dim):
        columns[f"f{j}"] = table.features[:, j]
    if table.labels is not None:
        columns["label"] = table.labels
    if table.class_probs is not None:
        for k in range(table.class_probs.shape[1]):
            columns[f"p{k}"] = table.class_probs[:, k]
    try:
        pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")
    except OSError as err:
        logger.error(err)
        logger.info("Writing table to %s - Failed.", path)
        return False
    logger.info("Writing table to %s - Done.", path)
    return True


def _farthest_first(table: FeatureTable) -> np.ndarray:
    """Row order by decreasing distance to the centroid, ties by ascending id."""
    centroid = table.features.mean(axis=0)
    distances = np.linalg.norm(table.features - centroid, axis=1)
    return np.lexsort((np.asarray(table.ids), -distances))


def centroid_distance_split(
    table: FeatureTable, test_fraction: float
) -> t.Tuple[FeatureTable, FeatureTable]:
    """Hold out the rows farthest from the feature centroid as the test set."""
    if table.n_rows == 0:
        raise DatasetError("empty table")
    if not 0 < test_fraction < 1:
        raise DatasetError("test_fraction must be in (0, 1)")
    n_test = min(table.n_rows, max(1, _round_half_up(test_fraction * table.n_rows)))
    order = _farthest_first(table)
    test_idx = np.sort(order[:n_test])
    pool_idx = np.sort(order[n_test:])
    logger.info("Centroid split: %d pool rows, %d test rows.", len(pool_idx), len(test_idx))
    return table.subset(pool_idx), table.subset(test_idx)


def _random_split(
    table: FeatureTable, n_second: int, seed: int
) -> t.Tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(table.n_rows)
    return np.sort(perm[n_second:]), np.sort(perm[:n_second])


def split_pool_test(table: FeatureTable, spec: SplitSpec) -> t.Tuple[FeatureTable, FeatureTable]:
    """Carve a test set from ``table`` according to ``spec.mode``."""
    if spec.mode == SplitMode.CENTROID_DISTANCE:
        return centroid_distance_split(table, spec.test_fraction)
    if table.n_rows < 2:
        raise DatasetError("table too small for a random test split")
    n_test = min(table.n_rows - 1, max(1, _round_half_up(spec.test_fraction * table.n_rows)))
    pool_idx, test_idx = _random_split(table, n_test, spec.seed)
    return table.subset(pool_idx), table.subset(test_idx)


def split_train_cal(table: FeatureTable, spec: SplitSpec) -> t.Tuple[FeatureTable, FeatureTable]:
    """Partition a labeled table into training and calibration sets by seeded shuffle."""
    if table.labels is None:
        raise DatasetError("split_train_cal needs a labeled table")
    n_cal = max(1, _round_half_up(spec.calibration_fraction * table.n_rows))
    if table.n_rows - n_cal < 1:
        raise DatasetError(f"table too small: {table.n_rows} rows cannot hold train and cal")
    train_idx, cal_idx = _random_split(table, n_cal, spec.seed)
    return table.subset(train_idx), table.subset(cal_idx)


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def generate_gaussian_shift(spec: SyntheticShiftSpec) -> SyntheticShift:
    """Draw a source sample and a partially overlapping target sample.

    The source is N(0, I). Each target point comes from the source component with
    probability ``overlap`` and otherwise from N(separation * e0, I). Labels follow
    ``label_rule`` on both tables. Class probabilities come from a fixed reference
    scorer whose parameters are a seeded perturbation of the label rule.
    """
    rng = np.random.default_rng(spec.seed)
    normal = rng.standard_normal(spec.dim)
    normal /= np.linalg.norm(normal)
    scorer_normal = normal + spec.scorer_noise * rng.standard_normal(spec.dim)
    scorer_norm = np.linalg.norm(scorer_normal)
    scorer_normal = scorer_normal / scorer_norm if scorer_norm > 0 else normal
    radius_jitter = 1.0 + 0.25 * spec.scorer_noise * rng.standard_normal()

    source_x = rng.standard_normal((spec.n_source, spec.dim))
    in_support = rng.random(spec.n_target) < spec.overlap
    target_x = rng.standard_normal((spec.n_target, spec.dim))
    target_x[~in_support, 0] += spec.separation

    if spec.label_rule == LabelRule.LINEAR_LOGIT:

        def margin(x: np.ndarray) -> np.ndarray:
            return x @ normal

        def scorer_margin(x: np.ndarray) -> np.ndarray:
            return x @ scorer_normal

    else:
        radius = float(np.median(np.linalg.norm(source_x, axis=1)))
        scorer_radius = radius * max(radius_jitter, 0.1)

        def margin(x: np.ndarray) -> np.ndarray:
            return np.linalg.norm(x, axis=1) - radius

        def scorer_margin(x: np.ndarray) -> np.ndarray:
            return np.linalg.norm(x, axis=1) - scorer_radius

    def build(prefix: str, x: np.ndarray) -> FeatureTable:
        # sigmoid(margin) >= 0.5 exactly when margin >= 0
        labels = (margin(x) >= 0).astype(int)
        p_one = _sigmoid(scorer_margin(x) / spec.scorer_temperature)
        return FeatureTable(
            ids=tuple(f"{prefix}{i:06d}" for i in range(len(x))),
            features=x,
            labels=labels,
            class_probs=np.column_stack([1.0 - p_one, p_one]),
        )

    shift = SyntheticShift(
        source=build("s", source_x), target=build("t", target_x), in_support=in_support
    )
    logger.debug(
        "Generated shift: %d source, %d target (%d in support).",
        spec.n_source,
        spec.n_target,
        int(in_support.sum()),
    )
    return shift


def make_gaussian_shift(spec: SyntheticShiftSpec) -> t.Tuple[FeatureTable, FeatureTable]:
    """Return the (source, target) tables of :func:`generate_gaussian_shift`."""
    shift = generate_gaussian_shift(spec)
    return shift.source, shift.target
