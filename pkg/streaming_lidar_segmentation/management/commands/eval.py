import dataclasses
import os

from django.core.management.base import CommandError

from ...config import RunConfig, SegParams, parse_overrides
from ...evaluation import CEILING_METRICS, DEFAULT_OVERLAP, DEFAULT_RANGE_GATE, METRICS, evaluate_corpus
from ...models import EvaluationRun
from ...reports import metric_rows, write_metrics_report
from ...synth import SCENE_DIR, load_corpus
from ._base import EXIT_GATE, RECORD_HELP, SegmentationCommand, load_scene, usage_error


class Command(SegmentationCommand):
    help = 'Segment simulated scenes and score the clusters against their ground truth'

    def add_arguments(self, parser):
        parser.add_argument('corpus', nargs='*', help='scene files, directories of them or bundled scene names')
        for source in ('pcap', 'raw', 'udp'):
            parser.add_argument(f'--{source}', help='not supported: captures carry no ground truth')
        parser.add_argument('--config', help='JSON run configuration to take segmentation parameters from')
        parser.add_argument('--param', action='append', default=[], metavar='KEY=VALUE')
        parser.add_argument('--seeds', type=int, help='evaluate every scene under this many noise seeds')
        parser.add_argument('--overlap', type=float, default=DEFAULT_OVERLAP, help='point overlap threshold')
        parser.add_argument('--range-gate', type=float, default=DEFAULT_RANGE_GATE,
                            help='ignore objects whose centroid is further than this (m); 0 disables')
        for name in METRICS:
            bound = 'max' if name in CEILING_METRICS else 'min'
            parser.add_argument(f'--{bound}-{name}', type=float, dest=f'gate_{name}',
                                help=f'fail with exit code 3 if {name.upper()} is past this value')
        parser.add_argument('--out', default='out', help='output directory')
        parser.add_argument('--record', action='store_true', help=RECORD_HELP)

    def run(self, **options):
        for source in ('pcap', 'raw', 'udp'):
            if options.get(source) is not None:
                raise usage_error(f"eval needs scene descriptions with ground truth, not --{source}")

        gates = {}
        for name in METRICS:
            limit = options[f'gate_{name}']
            if limit is None:
                continue
            if not 0.0 <= limit <= 1.0:
                raise usage_error(f"Gate for {name} must be a ratio in [0, 1], got {limit}")
            gates[name] = limit
        if not 0.0 < options['overlap'] <= 1.0:
            raise usage_error(f"--overlap must be in (0, 1], got {options['overlap']}")
        if options['seeds'] is not None and options['seeds'] < 1:
            raise usage_error("--seeds must be at least 1")
        range_gate = options['range_gate'] if options['range_gate'] > 0 else None

        params = RunConfig.load(options['config']).params if options['config'] else SegParams.from_settings()
        params = params.with_overrides(parse_overrides(options['param']))

        corpus = options['corpus'] or [SCENE_DIR]
        scenes = self.load_scenes(corpus, options['seeds'])
        output_dir = options['out']
        os.makedirs(output_dir, exist_ok=True)

        report = evaluate_corpus(scenes, params, options['overlap'], range_gate)
        written = write_metrics_report(report, output_dir, gates)
        self.stdout.write(report.to_text())

        if options['record']:
            run = EvaluationRun.from_report(report, ', '.join(corpus), params, gates, metric_rows(report))
            run.save()
            self.stdout.write(f"Recorded evaluation run {run.pk}")
        self.stdout.write(f"Wrote {len(written)} files to {output_dir}")

        failures = report.check_gates(gates)
        if failures:
            for failure in failures:
                self.stderr.write(self.style.ERROR(failure))
            raise CommandError(f"{len(failures)} quality gates failed", returncode=EXIT_GATE)
        if gates:
            self.stdout.write(self.style.SUCCESS(f"All {len(gates)} quality gates passed"))

    def load_scenes(self, corpus, seeds):
        scenes = []
        for location in corpus:
            if os.path.exists(location):
                scenes.extend(load_corpus([location]))
            else:
                scenes.append(load_scene(location))
        if seeds is None:
            return scenes
        return [dataclasses.replace(s, name=f'{s.name}@{seed}', seed=seed) for s in scenes for seed in range(seeds)]
