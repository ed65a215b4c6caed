"""Experiment orchestration over (method, mode, seed) and output files."""

import json
import logging
import sys
import typing as t
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
from jinja2 import Environment, FileSystemLoader

from checksum import MANIFEST_NAME, digest_files
from conformal import CalibrationError, build_records
from config import (
    KERNEL_SETTINGS,
    SOLVER_SETTINGS,
    ConfigError,
    DataSource,
    Method,
    Mode,
    RunConfig,
    flatten_config,
)
from dataset import (
    DatasetError,
    FeatureTable,
    ingest_features_csv,
    make_gaussian_shift,
    split_pool_test,
    split_train_cal,
)
from evaluation import (
    ExperimentReport,
    ReportError,
    aggregate_reports,
    build_report,
    curve_table,
    evaluate_curve,
    evaluated_targets,
    report_to_json,
    write_table,
)
from kernel import KernelError, select_bandwidth_details
from qp import QpError
from weighting import WeightingError, WeightingHelper, WeightSet, resolve_epsilon

logger = logging.getLogger(__name__)

# Source checkout first, then the data-files location of an installed copy.
TEMPLATE_DIRS = [
    Path(__file__).parent / "templates",
    Path(sys.prefix) / "share" / "shiftcal" / "templates",
]
SUMMARY_TEMPLATE = "summary.md.j2"

RUN_ERRORS = (DatasetError, KernelError, QpError, WeightingError, CalibrationError, ReportError)


def run_name(method: Method, mode: Mode, seed: int) -> str:
    """File stem of one run, e.g. ``kmm-global-seed3``."""
    return f"{Method(method).value}-{Mode(mode).value}-seed{seed}"


def write_to_file(path: Path, content: str) -> bool:
    """Write to file with provided content."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as file:
            file.write(content)
    except OSError as err:
        logger.error(err)
        logger.info("Writing file to %s - Failed.", path)
        return False

    logger.info("Writing file to %s - Done.", path)
    return True


@dataclass(frozen=True)
class PreparedData:
    """Labeled calibration and test tables of one seed."""

    cal: FeatureTable
    test: FeatureTable


@dataclass
class GroupResult:
    """Everything one (method, seed) group produced."""

    method: Method
    seed: int
    cal_ids: t.Tuple[str, ...] = ()
    target_ids: t.Tuple[str, ...] = ()
    weights: t.Optional[WeightSet] = None
    reports: t.Dict[str, ExperimentReport] = field(default_factory=dict)
    failures: t.Dict[str, str] = field(default_factory=dict)


@dataclass
class RunOutcome:
    """Files written by a command and the runs that failed."""

    written: t.List[Path] = field(default_factory=list)
    failures: t.Dict[str, str] = field(default_factory=dict)
    io_failed: bool = False


def seeded_config(cfg: RunConfig, seed: int) -> RunConfig:
    """Copy of ``cfg`` with the generator and split seeds set to ``seed``."""
    return cfg.copy(
        update={
            "synthetic": cfg.synthetic.copy(update={"seed": seed}),
            "split": cfg.split.copy(update={"seed": seed}),
            "seeds": (seed,),
        }
    )


def _require_scored(table: FeatureTable, role: str) -> FeatureTable:
    if table.labels is None or table.class_probs is None:
        raise DatasetError(f"{role} table needs labels and class probabilities")
    return table


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Build the calibration and test tables for an already seeded config."""
    data = cfg.data
    if data.source == DataSource.SYNTHETIC:
        cal, test = make_gaussian_shift(cfg.synthetic)
    elif data.table is not None:
        table = ingest_features_csv(data.table, True, data.n_prob_cols)
        pool, test = split_pool_test(table, cfg.split)
        _, cal = split_train_cal(pool, cfg.split)
    else:
        cal = ingest_features_csv(data.calibration, True, data.n_prob_cols)
        test = ingest_features_csv(data.test, True, data.n_prob_cols)
    return PreparedData(
        cal=_require_scored(cal, "calibration"), test=_require_scored(test, "test")
    )


def _bandwidth(cfg: RunConfig, data: PreparedData, seed: int) -> t.Dict[str, t.Any]:
    if cfg.kernel.sigma is not None:
        return {"kernel.sigma_selected": cfg.kernel.sigma}
    selection = select_bandwidth_details(
        data.cal.features, data.test.features, cfg.kernel.n_permutations, seed
    )
    return {
        "kernel.sigma_selected": selection.sigma,
        "kernel.median_distance": selection.median,
    }


def compute_group_weights(
    cfg: RunConfig, method: Method, seed: int
) -> t.Tuple[PreparedData, WeightSet, t.Dict[str, t.Any]]:
    """Data, weights and the config snapshot of one (method, seed) group."""
    seeded = seeded_config(cfg, seed)
    data = prepare_data(seeded)
    snapshot = {**flatten_config(seeded), **_bandwidth(seeded, data, seed)}
    # reports must not depend on where they are written
    snapshot.pop("output.directory", None)
    snapshot.update(
        {
            "kmm.epsilon_resolved": resolve_epsilon(seeded.kmm, data.cal.n_rows),
            "kernel.bandwidth_factors": KERNEL_SETTINGS.bandwidth_factors,
            "solver.relative_tol": SOLVER_SETTINGS.relative_tol,
            "solver.max_iter": SOLVER_SETTINGS.max_iter,
            "data.n_calibration": data.cal.n_rows,
            "data.n_test": data.test.n_rows,
        }
    )
    helper = WeightingHelper(
        seeded.kmm, seeded.kde.holdout_fraction, seeded.classifier.reg, seed
    )
    weights = helper.compute(method, data.cal, data.test, snapshot["kernel.sigma_selected"])
    return data, weights, snapshot


def run_group(
    cfg: RunConfig, method: Method, seed: int, calibrate_modes: bool = True
) -> GroupResult:
    """Weights once per (method, seed), then one report per mode."""
    result = GroupResult(method=Method(method), seed=seed)
    try:
        data, weights, snapshot = compute_group_weights(cfg, method, seed)
    except RUN_ERRORS as err:
        logger.error("Runs for %s seed %d failed: %s", Method(method).value, seed, err)
        for mode in cfg.modes:
            result.failures[run_name(method, mode, seed)] = str(err)
        return result
    result.cal_ids = data.cal.ids
    result.target_ids = data.test.ids
    result.weights = weights
    if not calibrate_modes:
        return result

    records = build_records(
        data.cal.ids, data.cal.class_probs, data.cal.labels, weights.normalized
    )
    targets = evaluated_targets(data.test, weights)
    for mode in cfg.modes:
        name = run_name(method, mode, seed)
        try:
            curve = evaluate_curve(
                records,
                weights.raw,
                targets,
                mode,
                cfg.levels.effective,
                cfg.conformal.test_point_mass,
            )
            result.reports[name] = build_report(
                cfg.data.name, mode, curve, weights, seed, snapshot, cfg.evaluation.delta
            )
        except RUN_ERRORS as err:
            logger.error("Run %s failed: %s", name, err)
            result.failures[name] = str(err)
    return result


def _run_group_job(args: t.Tuple[RunConfig, Method, int, bool]) -> GroupResult:
    return run_group(*args)


class ExperimentRunner:
    """Run every (method, seed) group of a config and write the outputs."""

    def __init__(self, cfg: RunConfig, jobs: int = 1) -> None:
        """Init."""
        self.cfg = cfg
        self.jobs = max(1, jobs)
        self.out_dir = Path(cfg.output.directory)
        self.environment = Environment(
            loader=FileSystemLoader(TEMPLATE_DIRS), keep_trailing_newline=True
        )

    @property
    def groups(self) -> t.List[t.Tuple[Method, int]]:
        """(method, seed) pairs in sorted run order."""
        return sorted(
            ((Method(method), seed) for method in self.cfg.methods for seed in self.cfg.seeds),
            key=lambda item: (item[0].value, item[1]),
        )

    def check_inputs(self) -> None:
        """Fail before any run if a referenced input file is missing."""
        data = self.cfg.data
        if data.source != DataSource.CSV:
            return
        for path in (data.table, data.calibration, data.test):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"file not found: {path}")

    def execute(self, calibrate_modes: bool = True) -> t.List[GroupResult]:
        """Run all groups, in a process pool when ``jobs`` > 1; results in run order."""
        self.check_inputs()
        jobs = [(self.cfg, method, seed, calibrate_modes) for method, seed in self.groups]
        logger.info("Running %d groups with %d worker(s).", len(jobs), self.jobs)
        if self.jobs == 1 or len(jobs) == 1:
            return [_run_group_job(job) for job in jobs]
        with ProcessPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(_run_group_job, jobs))

    def _write(self, outcome: RunOutcome, path: Path, content: str) -> None:
        if write_to_file(path, content):
            outcome.written.append(path)
        else:
            outcome.io_failed = True

    def _write_table(self, outcome: RunOutcome, frame: pd.DataFrame, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        if write_table(frame, path):
            outcome.written.append(path)
        else:
            outcome.io_failed = True

    def _finish(self, outcome: RunOutcome, runs: t.Sequence[str]) -> RunOutcome:
        """Write the manifest of runs, failures and output checksums."""
        manifest = {
            "runs": list(runs),
            "failures": dict(sorted(outcome.failures.items())),
            "files": {
                digest.path: digest.sha256_checksum
                for digest in digest_files(self.out_dir, outcome.written)
            },
        }
        content = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
        if not write_to_file(self.out_dir / MANIFEST_NAME, content):
            outcome.io_failed = True
        return outcome

    @staticmethod
    def _collect(
        results: t.Iterable[GroupResult],
    ) -> t.Tuple[t.List[ExperimentReport], t.Dict[str, str]]:
        reports: t.Dict[str, ExperimentReport] = {}
        failures: t.Dict[str, str] = {}
        for result in results:
            reports.update(result.reports)
            failures.update(result.failures)
        return [reports[name] for name in sorted(reports)], failures

    def render_summary(
        self, reports: t.Sequence[ExperimentReport], failures: t.Mapping[str, str]
    ) -> str:
        """Markdown summary of MAD, ESS, MMD and proxy by method and mode."""
        frame = pd.DataFrame(
            [
                {
                    "method": report.method.value,
                    "mode": report.mode.value,
                    "mad": report.mad,
                    "ess": report.ess,
                    "mmd": report.mmd,
                    "proxy": report.proxy,
                    "retained_fraction": report.retained_fraction,
                }
                for report in reports
            ],
            columns=["method", "mode", "mad", "ess", "mmd", "proxy", "retained_fraction"],
        )
        rows = (
            frame.groupby(["method", "mode"], sort=True)
            .agg(
                mad_mean=("mad", "mean"),
                mad_std=("mad", lambda s: float(s.std(ddof=0))),
                ess_mean=("ess", "mean"),
                mmd_mean=("mmd", "mean"),
                proxy_mean=("proxy", "mean"),
                retained_fraction_mean=("retained_fraction", "mean"),
            )
            .reset_index()
            .to_dict("records")
        )
        return self.environment.get_template(SUMMARY_TEMPLATE).render(
            dataset=self.cfg.data.name,
            n_reports=len(reports),
            seeds=list(self.cfg.seeds),
            levels=list(self.cfg.levels.effective),
            rows=rows,
            failures=dict(sorted(failures.items())),
        )

    def run(self) -> RunOutcome:
        """Reports, aggregate CSV, summary and manifest."""
        reports, failures = self._collect(self.execute())
        outcome = RunOutcome(failures=failures)
        for report in reports:
            name = run_name(report.method, report.mode, report.seed)
            self._write(outcome, self.out_dir / "reports" / f"{name}.json", report_to_json(report))
        if reports:
            self._write_table(outcome, aggregate_reports(reports), self.out_dir / "aggregate.csv")
            summary = self.render_summary(reports, failures)
            self._write(outcome, self.out_dir / "summary.md", summary)
        runs = [run_name(r.method, r.mode, r.seed) for r in reports]
        logger.info("%d runs succeeded, %d failed.", len(runs), len(failures))
        return self._finish(outcome, runs)

    def curve(self) -> RunOutcome:
        """Plot-ready coverage curve CSV."""
        reports, failures = self._collect(self.execute())
        outcome = RunOutcome(failures=failures)
        if reports:
            self._write_table(outcome, curve_table(reports), self.out_dir / "curve.csv")
        return self._finish(outcome, [run_name(r.method, r.mode, r.seed) for r in reports])

    def weights(self) -> RunOutcome:
        """Weight vectors per (method, seed), plus alpha and selection for skmm."""
        outcome = RunOutcome()
        runs = []
        for result in self.execute(calibrate_modes=False):
            stem = f"{result.method.value}-seed{result.seed}"
            if result.weights is None:
                outcome.failures[stem] = next(iter(result.failures.values()), "no weights")
                continue
            runs.append(stem)
            directory = self.out_dir / "weights"
            self._write_table(outcome, weight_frame(result), directory / f"{stem}.csv")
            if result.weights.alpha is not None:
                self._write_table(
                    outcome, target_frame(result), directory / f"{stem}-targets.csv"
                )
        return self._finish(outcome, runs)


def weight_frame(result: GroupResult) -> pd.DataFrame:
    """Raw and normalized weight per calibration id."""
    assert result.weights is not None
    return pd.DataFrame(
        {
            "id": list(result.cal_ids),
            "raw": result.weights.raw,
            "normalized": result.weights.normalized,
        }
    )


def target_frame(result: GroupResult) -> pd.DataFrame:
    """Alpha and selection flag per target id of a selective result."""
    assert result.weights is not None and result.weights.alpha is not None
    selected = set(result.weights.selected_target_ids or ())
    return pd.DataFrame(
        {
            "id": list(result.target_ids),
            "alpha": result.weights.alpha,
            "selected": [int(row_id in selected) for row_id in result.target_ids],
        }
    )
