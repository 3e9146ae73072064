import pandas as pd
from django.http import JsonResponse
from django.shortcuts import get_object_or_404
from django.views.decorators.csrf import csrf_exempt
from django.views.decorators.http import require_http_methods

from .evaluation import METRICS
from .exceptions import SceneError
from .models import BenchmarkRun, EvaluationRun
from .pipeline import REFERENCE_SCAN_US
from .reports import figure_json, latency_summary_figure, metrics_figure
from .synth import BUNDLED_SCENES, bundled_scene


def _benchmark_row(run):
    return {
        'id': run.pk,
        'input_kind': run.input_kind,
        'input_location': run.input_location,
        'repetitions': run.repetitions,
        'buffers': run.buffers,
        'scans': run.scans,
        'buffer_mean_us': run.buffer_mean_us,
        'buffer_p99_us': run.buffer_p99_us,
        'scan_total_mean_us': run.scan_total_mean_us,
        'meets_realtime_budget': run.meets_realtime_budget,
        'deterministic': run.deterministic,
        'created_at': run.created_at.isoformat(),
    }


def _evaluation_row(run):
    row = {
        'id': run.pk,
        'corpus': run.corpus,
        'scenes': run.scenes,
        'passed': run.passed,
        'created_at': run.created_at.isoformat(),
    }
    row.update({name: getattr(run, name) for name in METRICS})
    return row


@require_http_methods(["GET"])
def results_history(request):
    """Recent benchmark and evaluation runs"""
    benchmarks = BenchmarkRun.objects.all()[:20]
    evaluations = EvaluationRun.objects.all()[:20]
    return JsonResponse({
        'benchmarks': [_benchmark_row(r) for r in benchmarks],
        'evaluations': [_evaluation_row(r) for r in evaluations],
    })


@require_http_methods(["GET"])
def benchmark_detail(request, pk):
    run = get_object_or_404(BenchmarkRun, pk=pk)
    summary = pd.DataFrame(run.summary, columns=['quantity', 'mean', 'p50', 'p99', 'max', 'count'])
    measured = {'ground': run.scan_ground_mean_us, 'cluster': run.scan_cluster_mean_us,
                'total': run.scan_total_mean_us}
    reference = pd.DataFrame([
        {'stage': stage, 'reference_us': value, 'measured_us': measured[stage]}
        for stage, value in REFERENCE_SCAN_US.items()
    ])
    data = _benchmark_row(run)
    data.update({
        'params': run.params,
        'scan_ground_mean_us': run.scan_ground_mean_us,
        'scan_cluster_mean_us': run.scan_cluster_mean_us,
        'completion_lag_p99_us': run.completion_lag_p99_us,
        'summary': run.summary,
        'reference': reference.to_dict('records'),
        'figure': figure_json(latency_summary_figure(summary, reference)),
    })
    return JsonResponse(data)


@require_http_methods(["GET"])
def evaluation_detail(request, pk):
    run = get_object_or_404(EvaluationRun, pk=pk)
    data = _evaluation_row(run)
    data.update({
        'params': run.params,
        'overlap_threshold': run.overlap_threshold,
        'range_gate': run.range_gate,
        'table': run.table,
        'gates': run.gates,
        'failures': run.failures,
        'figure': figure_json(metrics_figure(run.table)),
    })
    return JsonResponse(data)


@require_http_methods(["GET"])
def scene_catalogue(request):
    """Bundled simulation scenes and what they contain"""
    scenes = []
    for name in BUNDLED_SCENES:
        try:
            spec = bundled_scene(name)
        except SceneError as e:
            scenes.append({'name': name, 'error': str(e)})
            continue
        scenes.append({
            'name': name,
            'objects': len(spec.objects),
            'kinds': sorted({o.kind for o in spec.objects}),
            'ground_planes': len(spec.ground),
            'noise_sigma': spec.noise_sigma,
        })
    return JsonResponse({'scenes': scenes})


@csrf_exempt
@require_http_methods(["POST"])
def clear_history(request):
    """Delete every recorded benchmark and evaluation run"""
    try:
        benchmarks_count = BenchmarkRun.objects.count()
        BenchmarkRun.objects.all().delete()

        evaluations_count = EvaluationRun.objects.count()
        EvaluationRun.objects.all().delete()

        return JsonResponse({
            'success': True,
            'message': f'Cleared {benchmarks_count} benchmark runs and {evaluations_count} evaluation runs.',
            'deleted_benchmarks': benchmarks_count,
            'deleted_evaluations': evaluations_count,
        })

    except Exception as e:
        return JsonResponse({'error': str(e)}, status=500)
