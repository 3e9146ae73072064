from django.test import TestCase
from django.urls import reverse

from ..models import BenchmarkRun, EvaluationRun
from ..synth import BUNDLED_SCENES

SUMMARY = [
    {'quantity': 'buffer total', 'mean': 400.0, 'p50': 380.0, 'p99': 900.0, 'max': 950.0, 'count': 60},
    {'quantity': 'scan total', 'mean': 12000.0, 'p50': 11900.0, 'p99': 13000.0, 'max': 13100.0, 'count': 2},
]


def benchmark(**fields):
    values = dict(input_kind='scene', input_location='seam_box', repetitions=2, buffers=60, scans=2,
                  buffer_mean_us=400.0, buffer_p99_us=900.0, scan_ground_mean_us=5000.0,
                  scan_cluster_mean_us=7000.0, scan_total_mean_us=12000.0, summary=SUMMARY)
    values.update(fields)
    return BenchmarkRun.objects.create(**values)


def evaluation(**fields):
    values = dict(corpus='scenes', scenes=1, precision=1.0, recall=0.5, tpr=0.5, fnr=0.5, osr=1.0, usr=1.0,
                  table=[{'scene': 'seam_box', 'precision': 1.0, 'recall': 0.5, 'tpr': 0.5, 'fnr': 0.5,
                          'osr': 1.0, 'usr': None}],
                  gates={'fnr': 0.2}, failures=['fnr 0.500 is above the allowed 0.200'], passed=False)
    values.update(fields)
    return EvaluationRun.objects.create(**values)


class HistoryViewTests(TestCase):

    def test_empty_history(self):
        response = self.client.get(reverse('streaming_lidar_segmentation:history'))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.json(), {'benchmarks': [], 'evaluations': []})

    def test_history_lists_runs(self):
        benchmark()
        evaluation()
        data = self.client.get(reverse('streaming_lidar_segmentation:history')).json()
        self.assertEqual(len(data['benchmarks']), 1)
        self.assertFalse(data['benchmarks'][0]['meets_realtime_budget'])
        self.assertEqual(data['evaluations'][0]['fnr'], 0.5)
        self.assertFalse(data['evaluations'][0]['passed'])

    def test_history_is_get_only(self):
        response = self.client.post(reverse('streaming_lidar_segmentation:history'))
        self.assertEqual(response.status_code, 405)


class DetailViewTests(TestCase):

    def test_benchmark_detail(self):
        run = benchmark(buffer_p99_us=500.0)
        response = self.client.get(reverse('streaming_lidar_segmentation:benchmark_detail', args=[run.pk]))
        data = response.json()
        self.assertTrue(data['meets_realtime_budget'])
        self.assertEqual([r['stage'] for r in data['reference']], ['ground', 'cluster', 'total'])
        self.assertEqual(data['reference'][2]['measured_us'], 12000.0)
        self.assertEqual(len(data['figure']['data']), 4)

    def test_evaluation_detail(self):
        run = evaluation()
        data = self.client.get(reverse('streaming_lidar_segmentation:evaluation_detail', args=[run.pk])).json()
        self.assertEqual(data['failures'], ['fnr 0.500 is above the allowed 0.200'])
        self.assertEqual(len(data['figure']['data']), 6)

    def test_missing_runs(self):
        for name in ('benchmark_detail', 'evaluation_detail'):
            response = self.client.get(reverse(f'streaming_lidar_segmentation:{name}', args=[999]))
            self.assertEqual(response.status_code, 404)

    def test_scene_catalogue(self):
        scenes = self.client.get(reverse('streaming_lidar_segmentation:scenes')).json()['scenes']
        self.assertEqual([s['name'] for s in scenes], list(BUNDLED_SCENES))
        urban = scenes[BUNDLED_SCENES.index('urban_block')]
        self.assertEqual(urban['objects'], 50)
        self.assertEqual(urban['kinds'], ['box', 'cylinder', 'panel'])


class ClearHistoryTests(TestCase):

    def test_clear(self):
        benchmark()
        benchmark()
        evaluation()
        response = self.client.post(reverse('streaming_lidar_segmentation:clear_history'))
        data = response.json()
        self.assertTrue(data['success'])
        self.assertEqual((data['deleted_benchmarks'], data['deleted_evaluations']), (2, 1))
        self.assertFalse(BenchmarkRun.objects.exists())
        self.assertFalse(EvaluationRun.objects.exists())

    def test_clear_needs_post(self):
        response = self.client.get(reverse('streaming_lidar_segmentation:clear_history'))
        self.assertEqual(response.status_code, 405)
