import json

import numpy as np
from django.test import SimpleTestCase

from ..config import SegParams
from ..exceptions import IndexMismatch
from ..evaluation import (
    METRICS, MIN_TRUTH_POINTS, CorpusReport, MatchOutcome, ScanEvaluation, SegMetrics, evaluate_corpus,
    evaluate_scan, match, oracle_cluster, oracle_partition,
)
from ..pipeline import run_stream
from ..synth import BUNDLED_SCENES, SceneObject, SceneSpec, bundled_scene, random_scene, raycast_scan

TRUTH = {1: set(range(0, 10)), 2: set(range(10, 20))}


def evaluation(name, outcome):
    return ScanEvaluation(scene=name, outcome=outcome, metrics=SegMetrics.from_outcome(outcome),
                          clusters=outcome.predictions, ground_points=100)


class MatchTests(SimpleTestCase):

    def test_true_positive_and_false_negative(self):
        outcome = match({'a': range(0, 10)}, TRUTH)
        self.assertEqual((outcome.tp, outcome.fn, outcome.fp), (1, 1, 0))
        self.assertEqual((outcome.all_objects, outcome.predictions), (2, 1))

    def test_low_purity_is_not_a_true_positive(self):
        outcome = match({'a': list(range(0, 10)) + list(range(100, 120))}, TRUTH)
        self.assertEqual(outcome.tp, 0)
        self.assertEqual(outcome.fn, 2)

    def test_under_segmentation(self):
        outcome = match({'a': range(0, 20)}, TRUTH)
        self.assertEqual(outcome.under_segmented, 2)
        self.assertEqual(outcome.fp, 0)

    def test_under_segmentation_takes_precedence(self):
        outcome = match({'a': range(0, 16), 'b': range(16, 20)}, TRUTH)
        self.assertEqual((outcome.under_segmented, outcome.tp), (2, 0))

    def test_over_segmentation(self):
        outcome = match({'a': range(0, 5), 'b': range(5, 10)}, TRUTH)
        self.assertEqual((outcome.over_segmented, outcome.fn), (1, 1))

    def test_false_positive(self):
        outcome = match({'a': range(0, 10), 'c': [100, 101, 102]}, TRUTH)
        self.assertEqual((outcome.tp, outcome.fp, outcome.predictions), (1, 1, 2))

    def test_predictions_of_ignored_objects_are_left_out(self):
        outcome = match({'d': range(200, 206)}, TRUTH, ignored={9: range(200, 206)})
        self.assertEqual((outcome.predictions, outcome.fp), (0, 0))

    def test_threshold(self):
        predicted = {'a': range(0, 7)}
        self.assertEqual(match(predicted, TRUTH, overlap_threshold=0.5).tp, 1)
        self.assertEqual(match(predicted, TRUTH, overlap_threshold=0.8).tp, 0)

    def test_keys_outside_the_scan(self):
        with self.assertRaises(IndexMismatch):
            match({'a': [999]}, TRUTH, universe=range(0, 20))
        with self.assertRaises(IndexMismatch):
            match({}, {1: [999]}, universe=range(0, 20))

    def test_identities_over_random_partitions(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            keys = np.arange(300)
            truth_ids = rng.integers(0, 8, size=300)
            predicted_ids = np.where(rng.random(300) < 0.8, truth_ids, rng.integers(0, 12, size=300))
            truth = {t: keys[truth_ids == t].tolist() for t in range(1, 8)}
            predicted = {p: keys[predicted_ids == p].tolist() for p in range(1, 12)}
            outcome = match(predicted, truth)
            n = outcome.all_objects
            self.assertEqual(outcome.tp + outcome.fn + outcome.over_segmented + outcome.under_segmented, n)
            metrics = SegMetrics.from_outcome(outcome)
            if n:
                self.assertAlmostEqual(metrics.recall + metrics.fnr, 1.0)
                self.assertLessEqual(metrics.tpr, metrics.recall)
            for name in METRICS:
                value = getattr(metrics, name)
                self.assertTrue(value is None or 0.0 <= value <= 1.0)


class MetricsTests(SimpleTestCase):

    def test_ratios(self):
        outcome = MatchOutcome(tp=6, fp=1, fn=2, over_segmented=1, under_segmented=1, all_objects=10, predictions=9)
        metrics = SegMetrics.from_outcome(outcome)
        self.assertAlmostEqual(metrics.precision, 8 / 9)
        self.assertAlmostEqual(metrics.recall, 0.8)
        self.assertAlmostEqual(metrics.tpr, 0.6)
        self.assertAlmostEqual(metrics.fnr, 0.2)
        self.assertAlmostEqual(metrics.osr, 6 / 7)
        self.assertAlmostEqual(metrics.usr, 6 / 7)

    def test_no_objects_is_not_applicable(self):
        metrics = SegMetrics.from_outcome(MatchOutcome(fp=3, predictions=3))
        self.assertTrue(all(v is None for v in metrics.as_dict().values()))
        self.assertEqual(set(metrics.formatted().values()), {'n/a'})

    def test_outcomes_add_up(self):
        total = MatchOutcome(tp=1, all_objects=2) + MatchOutcome(fn=1, fp=2, all_objects=1, predictions=3)
        self.assertEqual(total, MatchOutcome(tp=1, fn=1, fp=2, all_objects=3, predictions=3))


class OracleTests(SimpleTestCase):

    def test_components(self):
        points = [(0, 0, 0), (0.5, 0, 0), (1.0, 0, 0), (5, 0, 0), (5.4, 0, 0), (20, 0, 0)]
        labels = oracle_cluster(points, epsilon=0.6, chunk=2)
        self.assertEqual(labels.tolist(), [0, 0, 0, 1, 1, 2])

    def test_partition(self):
        keys = [(0, 0), (0, 1), (7, 3)]
        partition = oracle_partition(keys, [(0, 0, 0), (0, 0, 0.3), (3, 3, 0)], epsilon=0.5)
        self.assertEqual(partition, {frozenset({(0, 0), (0, 1)}), frozenset({(7, 3)})})

    def test_chain_links_across_chunks(self):
        order = np.random.default_rng(4).permutation(40)
        points = np.stack([order * 0.5, np.zeros(40), np.zeros(40)], axis=1)
        self.assertEqual(set(oracle_cluster(points, epsilon=0.6, chunk=3).tolist()), {0})
        self.assertEqual(len(set(oracle_cluster(points, epsilon=0.4, chunk=3).tolist())), 40)
        self.assertEqual(oracle_cluster(np.empty((0, 3)), epsilon=1.0).shape, (0,))


class OracleAgreementTests(SimpleTestCase):
    """
    Emitted clusters against single-linkage components at t_merge, on objects
    that are one component by themselves and lie further than t_ccl from any
    other object.
    """

    def separated_objects(self, scan, params):
        x, y, z, _ = scan.cartesian()
        truth = {oid: keys for oid, keys in scan.object_keys().items() if len(keys) >= MIN_TRUTH_POINTS}
        keys = [key for oid in sorted(truth) for key in truth[oid]]
        cols = np.array([k[0] for k in keys], dtype=int)
        rows = np.array([k[1] for k in keys], dtype=int)
        points = np.stack([x[rows, cols], y[rows, cols], z[rows, cols]], axis=1)
        components = oracle_partition(keys, points, params.t_merge)
        isolated = oracle_partition(keys, points, params.t_ccl)
        return {oid: keys for oid, keys in truth.items() if frozenset(keys) in components & isolated}

    def test_clusters_match_oracle_components(self):
        params = SegParams()
        scenes = [bundled_scene(name) for name in BUNDLED_SCENES] + [random_scene(seed) for seed in range(10)]
        matched = total = 0
        missed = []
        for spec in scenes:
            scan = raycast_scan(spec)
            objects = self.separated_objects(scan, params)
            (result,) = run_stream(scan.to_buffers(params.buffer_packets), params)
            outcome = match({c.cluster_id: c.keys for c in result.clusters}, objects, overlap_threshold=0.8)
            matched += outcome.tp
            total += outcome.all_objects
            if outcome.tp < outcome.all_objects:
                missed.append(f'{spec.name}: {outcome.tp}/{outcome.all_objects}')
        self.assertGreater(total, 50)
        self.assertGreaterEqual(matched / total, 0.99, ', '.join(missed))


class ScanEvaluationTests(SimpleTestCase):

    def test_isolated_box_is_found(self):
        spec = SceneSpec(name='box', objects=(SceneObject(1, 'box', (8.0, 2.0), (2.0, 1.5, 1.5)),), seed=2)
        result = evaluate_scan(spec)
        self.assertEqual(result.outcome.all_objects, 1)
        self.assertEqual(result.outcome.tp, 1)
        self.assertEqual(result.metrics.tpr, 1.0)
        self.assertGreater(result.ground_points, 0)

    def test_range_gate(self):
        spec = SceneSpec(name='far', objects=(SceneObject(1, 'box', (40.0, 0.0), (2.0, 2.0, 2.0)),), seed=2)
        self.assertEqual(evaluate_scan(spec).outcome.all_objects, 0)
        self.assertEqual(evaluate_scan(spec, range_gate=None).outcome.all_objects, 1)

    def test_scene_without_objects(self):
        result = evaluate_scan(bundled_scene('flat'))
        self.assertEqual(result.outcome.all_objects, 0)
        self.assertIsNone(result.metrics.precision)


class CorpusReportTests(SimpleTestCase):

    def test_empty_corpus(self):
        report = evaluate_corpus([])
        self.assertTrue(report.is_empty)
        self.assertIsNone(report.metrics.recall)
        self.assertTrue(report.table().empty)
        self.assertEqual(report.to_text(), "Empty corpus, nothing evaluated.\n")
        self.assertEqual(report.check_gates({'precision': 0.9}), [])

    def test_pooled_metrics_and_table(self):
        report = CorpusReport([
            evaluation('a', MatchOutcome(tp=3, fn=1, all_objects=4, predictions=3)),
            evaluation('b', MatchOutcome(fp=2, predictions=2)),
        ])
        self.assertEqual(report.outcome.all_objects, 4)
        self.assertAlmostEqual(report.metrics.precision, 3 / 5)
        table = report.table()
        self.assertEqual(list(table['scene']), ['a', 'b', 'ALL'])
        self.assertEqual(table.iloc[-1]['ground_points'], 200)
        text = report.to_text()
        self.assertIn('n/a', text)
        self.assertIn('0.750', text)

    def test_gates(self):
        report = CorpusReport([evaluation('a', MatchOutcome(tp=3, fn=1, all_objects=4, predictions=4))])
        self.assertEqual(report.check_gates({'recall': 0.75, 'fnr': 0.25, 'precision': None}), [])
        failures = report.check_gates({'recall': 0.9, 'fnr': 0.1})
        self.assertEqual(len(failures), 2)
        self.assertIn('below the required', failures[0])
        self.assertIn('above the allowed', failures[1])

        summary = json.loads(report.to_json({'recall': 0.9, 'osr': None}))
        self.assertFalse(summary['passed'])
        self.assertEqual(summary['gates'], {'recall': 0.9})
        self.assertEqual(summary['metrics']['tpr'], 0.75)
