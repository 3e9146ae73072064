import json

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from ..config import SegParams
from ..exceptions import CaptureError
from ..packet import N_BEAMS, PacketBuffer
from ..pipeline import (
    REFERENCE_SCAN_US, LatencyReport, SegmentationPipeline, StreamRunner, canonical_records, measure_latency,
    run_batch, run_stream,
)
from ..cluster import InitialCluster
from ..synth import SceneObject, SceneSpec, bundled_scene, random_scene, raycast_scan

STREAM_SCENES = ('seam_box', 'two_pedestrians', 'pole_occlusion', 'car_window')


def box_scene():
    return SceneSpec(name='box', objects=(SceneObject(id=1, kind='box', center=(8.0, 2.0), size=(2.0, 1.5, 1.5)),),
                     seed=1)


class StreamBatchTests(SimpleTestCase):

    def assertSamePartition(self, scan):
        buffers = scan.to_buffers(buffer_packets=5)
        (streamed,) = run_stream(buffers)
        (batched,) = run_batch(buffers)
        self.assertEqual(streamed.partition(), batched.partition())
        self.assertEqual(streamed.to_ndjson(), batched.to_ndjson())
        self.assertEqual(streamed.ground_points, batched.ground_points)

    def test_bundled_scenes(self):
        for name in STREAM_SCENES:
            with self.subTest(scene=name):
                self.assertSamePartition(raycast_scan(bundled_scene(name)))

    def test_random_scenes(self):
        for seed in range(100):
            with self.subTest(seed=seed):
                self.assertSamePartition(raycast_scan(random_scene(seed, n_objects=5)))

    def test_every_slot_is_accounted_for(self):
        scan = raycast_scan(box_scene())
        (result,) = run_stream(scan.to_buffers())
        self.assertEqual(result.total_slots, N_BEAMS * scan.n_cols)
        self.assertEqual(result.columns, scan.n_cols)
        self.assertEqual(result.invalid_points, int((scan.rho == 0).sum()))
        self.assertEqual(sum(c.point_count for c in result.clusters), result.obstacle_points)

    def test_box_is_one_cluster(self):
        scan = raycast_scan(box_scene())
        (result,) = run_stream(scan.to_buffers())
        truth = set(scan.object_keys()[1])
        biggest = max(result.clusters, key=lambda c: c.point_count)
        self.assertGreaterEqual(len(truth & set(biggest.keys)) / len(truth), 0.9)

    def test_ground_points_kept_on_request(self):
        scan = raycast_scan(box_scene())
        (result,) = run_stream(scan.to_buffers(), keep_ground_points=True)
        self.assertEqual(result.ground_xyz.shape, (result.ground_points, 3))
        (without,) = run_stream(scan.to_buffers())
        self.assertEqual(without.ground_xyz.shape, (0, 3))

class RefinementTests(SimpleTestCase):
    """The car behind a windshield with 30% dropout, under 100 noise seeds"""

    SEEDS = range(100)

    def car_pieces(self, spec, params):
        scan = raycast_scan(spec)
        (result,) = run_stream(scan.to_buffers(params.buffer_packets), params)
        car = set(scan.object_keys()[1])
        return sum(1 for c in result.clusters if 2 * len(car.intersection(c.keys)) > c.point_count)

    def test_refinement_joins_the_car(self):
        spec = bundled_scene('car_window')
        pieces = [self.car_pieces(spec.with_seed(seed), SegParams()) for seed in self.SEEDS]
        self.assertGreaterEqual(pieces.count(1), 95, pieces)

    def test_car_is_split_without_refinement(self):
        spec = bundled_scene('car_window')
        params = SegParams(refine_clusters=False)
        pieces = [self.car_pieces(spec.with_seed(seed), params) for seed in self.SEEDS]
        self.assertGreaterEqual(sum(1 for n in pieces if n >= 2), 50, pieces)



class PipelineTests(SimpleTestCase):

    def setUp(self):
        self.scan = raycast_scan(box_scene())
        self.buffers = self.scan.to_buffers()

    def test_empty_and_repeated_buffers_are_skipped(self):
        pipeline = SegmentationPipeline()
        empty = PacketBuffer(0, 99, 60, np.empty(0), np.empty((N_BEAMS, 0)), np.empty((N_BEAMS, 0)),
                             self.scan.calibration)
        pipeline.process_buffer(self.buffers[0])
        pipeline.process_buffer(self.buffers[1])
        pipeline.process_buffer(self.buffers[1])
        pipeline.process_buffer(empty)
        for buffer in self.buffers[2:]:
            pipeline.process_buffer(buffer)
        self.assertEqual(pipeline.malformed_buffers, 2)
        (expected,) = run_stream(self.buffers)
        self.assertEqual(pipeline.results[0].partition(), expected.partition())

    def test_new_scan_id_flushes_the_open_scan(self):
        pipeline = SegmentationPipeline()
        first, second = self.buffers[:10], self.scan.to_buffers(scan_id=1)
        for buffer in first + second:
            pipeline.process_buffer(buffer)
        self.assertEqual([r.scan_id for r in pipeline.results], [0, 1])
        self.assertEqual(pipeline.results[0].columns, 10 * 60)

    def test_on_scan_callback(self):
        seen = []
        pipeline = SegmentationPipeline(on_scan=seen.append)
        for buffer in self.buffers:
            pipeline.process_buffer(buffer)
        self.assertEqual(len(seen), 1)
        pipeline.flush()
        self.assertEqual(len(seen), 1)

    def test_timings_are_recorded(self):
        pipeline = SegmentationPipeline()
        for buffer in self.buffers:
            pipeline.process_buffer(buffer)
        self.assertEqual(len(pipeline.buffer_timings), len(self.buffers))
        (scan,) = pipeline.scan_timings
        self.assertEqual(scan.buffers, len(self.buffers))
        self.assertGreaterEqual(scan.total_cpu_us, 0.0)

    def test_canonical_records_order_and_ndjson(self):
        late = InitialCluster.seed(7, 20, 1, (1.0, 0.0, 0.0))
        late.add(19, 3, (1.0, 0.0, 1.0))
        early = InitialCluster.seed(3, 5, 0, (2.0, 0.0, 0.0))
        records = canonical_records(4, [late, early])
        self.assertEqual([r.cluster_id for r in records], [0, 1])
        self.assertEqual(records[1].keys, ((19, 3), (20, 1)))
        self.assertEqual(records[1].xyz.tolist(), [[1.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        line = json.loads(records[1].to_json(include_points=True))
        self.assertEqual(line['points'], [[19, 3], [20, 1]])
        self.assertEqual((line['col_start'], line['col_end'], line['point_count']), (19, 20, 2))
        self.assertEqual(line['centroid'], [1.0, 0.0, 0.5])
        self.assertNotIn('points', json.loads(records[1].to_json()))


class StreamRunnerTests(SimpleTestCase):

    def test_matches_direct_processing(self):
        buffers = raycast_scan(box_scene()).to_buffers()
        results = StreamRunner(SegmentationPipeline(), queue_size=4).run(iter(buffers))
        (expected,) = run_stream(buffers)
        self.assertEqual(results[0].to_ndjson(), expected.to_ndjson())

    def test_producer_errors_are_raised(self):
        buffers = raycast_scan(box_scene()).to_buffers()

        def source():
            yield from buffers[:3]
            raise CaptureError("capture ended mid-record")

        runner = StreamRunner(SegmentationPipeline())
        with self.assertRaises(CaptureError):
            runner.run(source())
        # the partial scan was still flushed
        self.assertEqual(len(runner.pipeline.results), 1)

    def test_live_queue_drops_oldest(self):
        runner = StreamRunner(SegmentationPipeline(), live=True, queue_size=1)
        runner._put('a')
        runner._put('b')
        self.assertEqual(runner.dropped, 1)
        self.assertEqual(runner.queue.get_nowait(), 'b')


class LatencyTests(SimpleTestCase):

    def test_repetitions_must_be_positive(self):
        with self.assertRaises(ValueError):
            measure_latency([], repetitions=0)

    def test_report(self):
        buffers = raycast_scan(box_scene()).to_buffers()
        report = measure_latency(buffers, SegParams(), repetitions=2)
        self.assertTrue(report.deterministic)
        self.assertEqual(len(report.buffers), 2 * len(buffers))
        self.assertEqual(len(report.scans), 2)
        summary = report.summary()
        self.assertIn('buffer total', list(summary['quantity']))
        self.assertTrue((summary['p99'] <= summary['max']).all())
        reference = report.reference()
        self.assertEqual(list(reference['stage']), list(REFERENCE_SCAN_US))
        self.assertIn('Repetitions: 2', report.to_text())

    def test_empty_report(self):
        report = measure_latency([], repetitions=3)
        self.assertTrue(report.is_empty)
        self.assertIsNone(report.buffer_p99())
        self.assertTrue(report.meets_realtime_budget())
        self.assertEqual(report.to_text(), "No buffers were processed.\n")
        self.assertTrue(report.summary().empty)

    def test_budgets(self):
        report = LatencyReport(
            buffers=pd.DataFrame({'total_cpu_us': [100.0] * 90 + [900.0] * 10}),
            scans=pd.DataFrame({'total_cpu_us': [1500.0, 2500.0]}),
            repetitions=1,
        )
        self.assertFalse(report.meets_realtime_budget())
        self.assertTrue(report.meets_realtime_budget(budget_us=1000.0))
        (failure,) = report.check_budgets()
        self.assertTrue(failure.startswith('Buffer p99'))
        self.assertEqual(len(report.check_budgets(max_buffer_us=1000.0, max_scan_us=2000.0)), 1)
        self.assertEqual(report.check_budgets(max_buffer_us=0, max_scan_us=0), [])
