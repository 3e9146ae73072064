from django.core.management.base import CommandError

from ...ingest import IngestStats
from ...models import BenchmarkRun
from ...pipeline import REALTIME_BUFFER_BUDGET_US, measure_latency
from ...reports import write_latency_report
from ._base import EXIT_GATE, RECORD_HELP, SegmentationCommand, usage_error


class Command(SegmentationCommand):
    help = 'Replay an offline input and report per-stage processing latency'

    def add_arguments(self, parser):
        self.add_input_arguments(parser, udp=False)
        parser.add_argument('--repetitions', type=int, default=10, help='times to replay the input')
        parser.add_argument('--max-buffer-us', type=float, default=REALTIME_BUFFER_BUDGET_US,
                            help='fail with exit code 3 if the per-buffer p99 reaches this many microseconds; '
                                 '0 disables the gate')
        parser.add_argument('--max-scan-us', type=float, default=0.0,
                            help='fail with exit code 3 if the per-scan p99 reaches this many microseconds; '
                                 '0 (the default) disables the gate')
        parser.add_argument('--record', action='store_true', help=RECORD_HELP)

    def run(self, **options):
        repetitions = options['repetitions']
        if repetitions < 1:
            raise usage_error(f"--repetitions must be at least 1, got {repetitions}")
        if options['revolutions'] < 1:
            raise usage_error("--revolutions must be at least 1")
        for flag in ('max_buffer_us', 'max_scan_us'):
            if options[flag] < 0:
                raise usage_error(f"--{flag.replace('_', '-')} must not be negative, got {options[flag]}")
        config = self.run_config(options, 'bench', allowed=('pcap', 'raw', 'scene'))
        self.ensure_output_dir(config)

        # decode once so only segmentation is timed
        stats = IngestStats()
        buffers = list(self.open_buffers(config, stats, revolutions=options['revolutions']))
        self.check_decode_rate(stats)

        report = measure_latency(buffers, config.params, repetitions)
        written = write_latency_report(report, config.output_dir)
        self.stdout.write(report.to_text())

        if not report.deterministic:
            self.stderr.write(self.style.ERROR("Cluster output differed between repetitions"))
        if report.is_empty:
            self.stdout.write(self.style.WARNING("The input held no data blocks"))

        if options['record']:
            run = BenchmarkRun.from_report(report, config)
            run.save()
            self.stdout.write(f"Recorded benchmark run {run.pk}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(written)} files to {config.output_dir}"))

        failures = report.check_budgets(options['max_buffer_us'], options['max_scan_us'])
        if failures:
            for failure in failures:
                self.stderr.write(self.style.ERROR(failure))
            raise CommandError(f"{len(failures)} latency budgets exceeded", returncode=EXIT_GATE)
        if not report.is_empty and (options['max_buffer_us'] or options['max_scan_us']):
            self.stdout.write(self.style.SUCCESS("Latency is within budget"))
