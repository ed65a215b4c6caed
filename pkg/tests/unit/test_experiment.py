import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
import pytest

from config import ConfigError, Method, Mode, config_from_text
from dataset import DatasetError, make_gaussian_shift, write_features_csv
from experiment import (
    ExperimentRunner,
    GroupResult,
    compute_group_weights,
    prepare_data,
    run_group,
    run_name,
    seeded_config,
    target_frame,
    weight_frame,
    write_to_file,
)
from weighting import WeightSet, uniform_weights

TINY = (
    "synthetic.n_source = 30\n"
    "synthetic.n_target = 30\n"
    "synthetic.overlap = 0.7\n"
    "synthetic.separation = 3\n"
    "kernel.n_permutations = 10\n"
    "levels.grid = 0.5, 0.7, 0.9\n"
)


def _config(tmp_path, extra=""):
    return config_from_text(TINY + extra + f"output.directory = {tmp_path / 'out'}\n")


class TestHelpers(unittest.TestCase):
    def test_run_name(self):
        self.assertEqual(run_name(Method.KMM, Mode.GLOBAL, 3), "kmm-global-seed3")
        self.assertEqual(run_name("skmm", "mondrian", 0), "skmm-mondrian-seed0")

    def test_seeded_config(self):
        cfg = seeded_config(config_from_text("seeds = 1, 2\n"), 7)

        self.assertEqual(cfg.synthetic.seed, 7)
        self.assertEqual(cfg.split.seed, 7)
        self.assertEqual(cfg.seeds, (7,))

    def test_write_to_file_failure(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        blocker = Path(tmp.name) / "blocker"
        blocker.write_text("")

        with self.assertLogs("experiment", level="INFO") as logs:
            self.assertFalse(write_to_file(blocker / "out.txt", "content"))
        self.assertTrue(any("Failed" in line for line in logs.output))

    def test_weight_frames(self):
        weights = uniform_weights(2)
        selective = WeightSet(
            raw=weights.raw,
            normalized=weights.normalized,
            method=Method.SKMM,
            ess=weights.ess,
            selected_target_ids=("t1",),
            alpha=np.array([0.1, 0.9]),
        )
        result = GroupResult(
            method=Method.SKMM,
            seed=0,
            cal_ids=("c0", "c1"),
            target_ids=("t0", "t1"),
            weights=selective,
        )

        self.assertEqual(list(weight_frame(result).columns), ["id", "raw", "normalized"])
        targets = target_frame(result)
        self.assertEqual(targets["selected"].tolist(), [0, 1])
        self.assertEqual(targets["id"].tolist(), ["t0", "t1"])


class TestPrepareData:
    def test_synthetic_uses_source_as_calibration(self, tmp_path):
        cfg = seeded_config(_config(tmp_path), 2)

        data = prepare_data(cfg)

        assert data.cal.n_rows == 30
        assert data.test.n_rows == 30
        assert data.cal.ids[0].startswith("s")

    def test_single_table_is_split(self, tmp_path):
        source, _ = make_gaussian_shift(config_from_text("synthetic.n_source = 40\n").synthetic)
        table_path = tmp_path / "table.csv"
        write_features_csv(source, table_path)
        cfg = config_from_text(
            f"data.source = csv\ndata.table = {table_path}\n"
            "split.test_fraction = 0.25\nsplit.calibration_fraction = 0.5\n"
        )

        data = prepare_data(cfg)

        assert data.test.n_rows == 10
        assert data.cal.n_rows == 15
        assert not set(data.cal.ids) & set(data.test.ids)

    def test_separate_tables(self, tmp_path):
        source, target = make_gaussian_shift(config_from_text("").synthetic)
        write_features_csv(source, tmp_path / "cal.csv")
        write_features_csv(target, tmp_path / "test.csv")
        cfg = config_from_text(
            f"data.source = csv\ndata.calibration = {tmp_path / 'cal.csv'}\n"
            f"data.test = {tmp_path / 'test.csv'}\n"
        )

        data = prepare_data(cfg)

        assert data.cal.ids == source.ids
        np.testing.assert_array_equal(data.test.class_probs, target.class_probs)

    def test_tables_need_probabilities(self, tmp_path):
        path = tmp_path / "table.csv"
        path.write_text("id,f0,label\n" + "".join(f"r{i},{i},{i % 2}\n" for i in range(10)))
        cfg = config_from_text(f"data.source = csv\ndata.table = {path}\n")

        with pytest.raises(DatasetError, match="class probabilities"):
            prepare_data(cfg)


class TestGroups:
    def test_snapshot_contents(self, tmp_path):
        _, weights, snapshot = compute_group_weights(_config(tmp_path), Method.UNIFORM, 1)

        assert "output.directory" not in snapshot
        assert snapshot["data.n_calibration"] == 30
        assert snapshot["kernel.sigma_selected"] > 0
        assert snapshot["kernel.median_distance"] > 0
        assert snapshot["kmm.epsilon_resolved"] == pytest.approx(1.0 - 1.0 / np.sqrt(30))
        assert weights.mmd is not None

    def test_fixed_sigma_skips_selection(self, tmp_path):
        cfg = _config(tmp_path, "kernel.sigma = 0.75\n")

        with mock.patch("experiment.select_bandwidth_details") as mock_select:
            _, _, snapshot = compute_group_weights(cfg, Method.UNIFORM, 0)

        mock_select.assert_not_called()
        assert snapshot["kernel.sigma_selected"] == 0.75

    def test_one_report_per_mode(self, tmp_path):
        cfg = _config(tmp_path, "modes = global, mondrian\n")

        result = run_group(cfg, Method.KMM, 0)

        assert sorted(result.reports) == ["kmm-global-seed0", "kmm-mondrian-seed0"]
        assert not result.failures
        report = result.reports["kmm-global-seed0"]
        assert report.curve.levels == (0.5, 0.7, 0.9)
        assert report.config["kernel.sigma_selected"] > 0

    def test_failures_are_collected(self, tmp_path):
        cfg = _config(tmp_path, "modes = global, mondrian\n")

        with mock.patch("experiment.WeightingHelper.compute", side_effect=DatasetError("boom")):
            result = run_group(cfg, Method.KDE, 4)

        assert result.weights is None
        assert result.failures == {"kde-global-seed4": "boom", "kde-mondrian-seed4": "boom"}


class TestExperimentRunner:
    def _runner(self, tmp_path, extra=""):
        return ExperimentRunner(_config(tmp_path, extra))

    def test_groups_sorted(self, tmp_path):
        runner = self._runner(tmp_path, "methods = skmm, kmm\nseeds = 2, 0\n")

        assert runner.groups == [
            (Method.KMM, 0),
            (Method.KMM, 2),
            (Method.SKMM, 0),
            (Method.SKMM, 2),
        ]

    def test_missing_input_fails_fast(self, tmp_path):
        table = tmp_path / "table.csv"
        table.write_text("id,f0\n")
        runner = ExperimentRunner(
            config_from_text(
                f"data.source = csv\ndata.table = {table}\noutput.directory = {tmp_path / 'out'}\n"
            )
        )
        table.unlink()

        with pytest.raises(ConfigError, match="file not found"):
            runner.run()
        assert not (tmp_path / "out").exists()

    def test_run_writes_outputs(self, tmp_path):
        runner = self._runner(tmp_path, "methods = uniform, kmm\nseeds = 0, 1\n")

        outcome = runner.run()

        out = tmp_path / "out"
        assert not outcome.failures
        assert not outcome.io_failed
        assert sorted(p.name for p in (out / "reports").iterdir()) == [
            "kmm-global-seed0.json",
            "kmm-global-seed1.json",
            "uniform-global-seed0.json",
            "uniform-global-seed1.json",
        ]
        assert len(pd.read_csv(out / "aggregate.csv")) == 2 * 3
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["runs"]) == 4
        assert "summary.md" in manifest["files"]
        assert "| kmm | global |" in (out / "summary.md").read_text()

    @pytest.mark.parametrize(
        "command, relative", [("curve", "curve.csv"), ("weights", "weights/skmm-seed0.csv")]
    )
    def test_commands_write_their_file(self, tmp_path, command, relative):
        runner = self._runner(tmp_path, "methods = skmm\nkmm.tau = 0.3\n")

        outcome = getattr(runner, command)()

        assert not outcome.failures
        assert (tmp_path / "out" / relative).is_file()

    def test_weights_writes_skmm_targets(self, tmp_path):
        outcome = self._runner(tmp_path, "methods = skmm\n").weights()

        out = tmp_path / "out"
        targets = pd.read_csv(out / "weights" / "skmm-seed0-targets.csv")
        assert list(targets.columns) == ["id", "alpha", "selected"]
        assert len(targets) == 30
        assert json.loads((out / "manifest.json").read_text())["runs"] == ["skmm-seed0"]
        assert not outcome.io_failed

    def test_partial_failure_is_recorded_in_manifest(self, tmp_path):
        runner = self._runner(tmp_path, "methods = uniform, kde\n")
        original = run_group

        def failing(cfg, method, seed, calibrate_modes=True):
            if method == Method.KDE:
                return GroupResult(method=method, seed=seed, failures={"kde-global-seed0": "x"})
            return original(cfg, method, seed, calibrate_modes)

        with mock.patch("experiment.run_group", side_effect=failing):
            outcome = runner.run()

        out = tmp_path / "out"
        manifest = json.loads((out / "manifest.json").read_text())
        assert outcome.failures == {"kde-global-seed0": "x"}
        assert manifest["failures"] == {"kde-global-seed0": "x"}
        assert manifest["runs"] == ["uniform-global-seed0"]
        assert "kde-global-seed0" in (out / "summary.md").read_text()
