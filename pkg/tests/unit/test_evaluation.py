import json
import math
import unittest

import numpy as np
import pandas as pd
import pytest
from parameterized import parameterized

from conformal import build_records
from config import DEFAULT_LEVELS, Method, Mode, SyntheticShiftSpec
from dataset import FeatureTable, make_gaussian_shift
from evaluation import (
    AGGREGATE_COLUMNS,
    CURVE_COLUMNS,
    CoverageCurve,
    ReportError,
    aggregate_reports,
    bias_variance_proxy,
    build_report,
    coverage_bound_variance_term,
    curve_table,
    empirical_coverage,
    evaluate_curve,
    evaluated_targets,
    mad,
    mean_set_size,
    report_from_json,
    report_to_json,
    write_report,
    write_table,
)
from weighting import WeightSet, uniform_weights


def _curve(levels=(0.5, 0.9), empirical=(0.4, 0.95)):
    return CoverageCurve(
        levels=levels, empirical=empirical, n_evaluated=20, set_size=(1.0, 1.5)[: len(levels)]
    )


def _weights(method=Method.UNIFORM, mmd=0.3, n=4):
    weights = uniform_weights(n)
    return WeightSet(
        raw=weights.raw,
        normalized=weights.normalized,
        method=method,
        ess=weights.ess,
        mmd=mmd,
        diagnostics={"epsilon": 0.5},
    )


def _report(seed=0, method=Method.UNIFORM, mode=Mode.GLOBAL, curve=None):
    return build_report(
        "toy",
        mode,
        curve or _curve(),
        _weights(method),
        seed,
        {"kmm.b_bound": 30.0, "methods": (method,)},
        0.05,
    )


class TestMetrics(unittest.TestCase):
    @parameterized.expand(
        [
            ("all_full", [(0, 1), (0, 1)], [0, 1], 1.0),
            ("all_empty", [(), ()], [0, 1], 0.0),
            ("mixed", [(0,), (0, 1), (1,)], [0, 1, 0], 2.0 / 3.0),
        ]
    )
    def test_empirical_coverage(self, _, sets, labels, expected):
        self.assertAlmostEqual(empirical_coverage(sets, labels), expected)

    def test_empirical_coverage_needs_rows(self):
        with self.assertRaises(ReportError):
            empirical_coverage([], [])

    def test_mean_set_size(self):
        self.assertAlmostEqual(mean_set_size([(0,), (0, 1), ()]), 1.0)

    @parameterized.expand(
        [
            ("exact", (0.5, 0.9), (0.5, 0.9), 0.0),
            ("offset", (0.5, 0.7, 0.9), (0.45, 0.65, 0.85), 0.05),
            ("mixed", (0.5, 0.9), (0.40, 0.95), 0.075),
        ]
    )
    def test_mad(self, _, levels, empirical, expected):
        curve = CoverageCurve(levels=levels, empirical=empirical, n_evaluated=10)

        self.assertAlmostEqual(mad(curve), expected)

    @parameterized.expand([(0.0, 100.0, 0.1), (0.0, 1.0, 1.0), (0.3, 4.0, 0.8)])
    def test_bias_variance_proxy(self, mmd_value, ess_value, expected):
        self.assertAlmostEqual(bias_variance_proxy(mmd_value, ess_value), expected)

    def test_coverage_bound_variance_term(self):
        self.assertAlmostEqual(coverage_bound_variance_term(1.0, math.exp(-2.0)), 6.0)
        self.assertAlmostEqual(coverage_bound_variance_term(100.0, 0.05), 0.6224, places=4)
        self.assertLess(coverage_bound_variance_term(1e12, 0.05), 1e-5)


class TestCoverageCurve:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"levels": (0.5, 0.9), "empirical": (0.5,)},
            {"levels": (0.9, 0.5), "empirical": (0.5, 0.5)},
            {"levels": (0.5,), "empirical": (1.2,)},
            {"levels": (0.5,), "empirical": (0.5,), "set_size": (1.0, 2.0)},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ReportError):
            CoverageCurve(n_evaluated=1, **kwargs)


class TestEvaluateCurve:
    def _tables(self):
        cal_probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.4, 0.6]])
        test_probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
        cal = FeatureTable(
            ids=("c0", "c1", "c2", "c3"),
            features=np.zeros((4, 1)),
            labels=np.array([0, 0, 1, 0]),
            class_probs=cal_probs,
        )
        test = FeatureTable(
            ids=("t0", "t1", "t2", "t3"),
            features=np.zeros((4, 1)),
            labels=np.array([0, 1, 1, 1]),
            class_probs=test_probs,
        )
        return cal, test

    def test_global_curve(self):
        cal, test = self._tables()
        records = build_records(cal.ids, cal.class_probs, cal.labels, np.full(4, 0.25))

        curve = evaluate_curve(records, np.ones(4), test, Mode.GLOBAL, (0.5, 0.75))

        # scores 0.1, 0.2, 0.3, 0.6: thresholds 0.2 and 0.3
        assert curve.levels == (0.5, 0.75)
        assert curve.empirical == (0.5, 0.75)
        assert curve.set_size == (0.5, 0.75)
        assert curve.n_evaluated == 4
        assert curve.class_coverage == {0: (0.0, 1.0), 1: (2.0 / 3.0, 2.0 / 3.0)}

    def test_uniform_coverage_tracks_levels(self):
        cal, test = make_gaussian_shift(SyntheticShiftSpec(n_source=2000, n_target=2000, seed=4))
        records = build_records(cal.ids, cal.class_probs, cal.labels, np.full(2000, 1 / 2000))

        curve = evaluate_curve(records, np.ones(2000), test, Mode.GLOBAL, DEFAULT_LEVELS)

        assert curve.n_evaluated == 2000
        for level, covered in zip(curve.levels, curve.empirical):
            assert abs(covered - level) <= 0.05

    def test_needs_labels(self):
        cal, test = self._tables()
        records = build_records(cal.ids, cal.class_probs, cal.labels, np.full(4, 0.25))
        unlabeled = FeatureTable(
            ids=test.ids, features=test.features, class_probs=test.class_probs
        )

        with pytest.raises(ReportError):
            evaluate_curve(records, np.ones(4), unlabeled, Mode.GLOBAL, (0.5,))

    def test_evaluated_targets_for_selection(self):
        _, test = self._tables()
        weights = _weights()
        selective = WeightSet(
            raw=weights.raw,
            normalized=weights.normalized,
            method=Method.SKMM,
            ess=weights.ess,
            selected_target_ids=("t3", "t1"),
            alpha=np.array([0.0, 1.0, 0.1, 0.9]),
        )

        assert evaluated_targets(test, weights) is test
        assert evaluated_targets(test, selective).ids == ("t1", "t3")
        assert selective.retained_fraction == 0.5


class TestReport(unittest.TestCase):
    def test_derived_metrics(self):
        report = _report()

        self.assertAlmostEqual(report.mad, 0.075)
        self.assertAlmostEqual(report.proxy, 0.3 + 0.5)
        self.assertEqual(report.ess, 4.0)
        self.assertEqual(report.retained_fraction, 1.0)
        self.assertEqual(report.config["methods"], ["uniform"])
        self.assertEqual(report.config["diagnostics.epsilon"], 0.5)
        self.assertTrue(report.config["weights.converged"])

    def test_missing_mmd(self):
        with self.assertRaises(ReportError):
            build_report("toy", Mode.GLOBAL, _curve(), uniform_weights(4), 0, {}, 0.05)

    def test_json_is_lossless_and_sorted(self):
        report = _report(seed=3, method=Method.KMM, mode=Mode.MONDRIAN)
        text = report_to_json(report)

        self.assertEqual(report_from_json(text), report)
        data = json.loads(text)
        self.assertEqual(list(data), sorted(data))
        self.assertEqual(data["method"], "kmm")
        self.assertEqual(data["mode"], "mondrian")

    def test_json_floats_carry_17_significant_digits(self):
        report = _report()
        report.config["kmm.epsilon"] = 0.1

        text = report_to_json(report)

        self.assertIn('"kmm.epsilon": 0.10000000000000001', text)
        self.assertIn('"kmm.b_bound": 30.0', text)
        self.assertIn(f'"mad": {report.mad:.17g},', text)
        self.assertTrue(text.endswith('"seed": 0\n}\n'))
        self.assertEqual(json.loads(text)["config"]["kmm.epsilon"], 0.1)

    def test_non_finite_value_is_rejected(self):
        report = _report()
        report.config["extra"] = float("nan")

        with self.assertRaises(ValueError):
            report_to_json(report)

    def test_tampered_json_is_rejected(self):
        data = json.loads(report_to_json(_report()))
        data["mad"] = 0.5

        with self.assertRaises(ReportError):
            report_from_json(json.dumps(data))

    def test_malformed_json(self):
        with self.assertRaises(ReportError):
            report_from_json('{"method": "kmm"}')

    def test_write_report_failure(self):
        self.assertFalse(write_report(_report(), "/nonexistent-dir/report.json"))


class TestAggregate:
    def test_aggregate_over_seeds(self):
        reports = [
            _report(seed=0, curve=_curve(empirical=(0.4, 0.8))),
            _report(seed=1, curve=_curve(empirical=(0.6, 1.0))),
        ]

        frame = aggregate_reports(reports)

        assert list(frame.columns) == AGGREGATE_COLUMNS
        assert list(frame["level"]) == [0.5, 0.9]
        assert frame["coverage_mean"].tolist() == pytest.approx([0.5, 0.9])
        assert frame["coverage_std"].tolist() == pytest.approx([0.1, 0.1])
        assert frame["mad_std"].tolist() == pytest.approx([0.0, 0.0])

    def test_single_seed_std_is_zero(self):
        frame = aggregate_reports([_report()])

        assert frame["coverage_std"].tolist() == [0.0, 0.0]

    def test_rows_sorted_by_method_mode_level(self):
        reports = [
            _report(method=Method.SKMM, mode=Mode.GLOBAL),
            _report(method=Method.KMM, mode=Mode.MONDRIAN),
            _report(method=Method.KMM, mode=Mode.GLOBAL),
        ]

        frame = curve_table(reports)

        assert list(frame.columns) == CURVE_COLUMNS
        assert list(zip(frame["method"], frame["mode"])) == [
            ("kmm", "global"),
            ("kmm", "global"),
            ("kmm", "mondrian"),
            ("kmm", "mondrian"),
            ("skmm", "global"),
            ("skmm", "global"),
        ]
        assert frame["set_size_mean"].tolist() == pytest.approx([1.0, 1.5] * 3)

    def test_write_table(self, tmp_path):
        path = tmp_path / "aggregate.csv"

        assert write_table(aggregate_reports([_report()]), path)
        restored = pd.read_csv(path)

        assert list(restored.columns) == AGGREGATE_COLUMNS
        assert restored["mad_mean"].tolist() == pytest.approx([0.075, 0.075])
        assert not write_table(aggregate_reports([_report()]), tmp_path / "no" / "a.csv")
