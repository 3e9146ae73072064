import logging

from django.conf import settings

from ...ingest import IngestStats
from ...pipeline import SegmentationPipeline, StreamRunner, run_batch
from ...reports import write_scan_outputs
from ._base import SegmentationCommand, usage_error

logger = logging.getLogger(__name__)


class Command(SegmentationCommand):
    help = 'Segment packets from a capture, a live sensor or a simulated scene and write cluster records'

    def add_arguments(self, parser):
        self.add_input_arguments(parser)
        parser.add_argument('--format', help='comma separated output formats: ndjson, ply, csv')
        parser.add_argument('--batch', action='store_true', help='segment each scan as one buffer')
        parser.add_argument('--stream', action='store_true', help='segment buffer by buffer (default)')
        parser.add_argument('--max-packets', type=int, help='stop a live run after this many datagrams')
        parser.add_argument('--idle-timeout', type=float, help='stop a live run after this many idle seconds')

    def run(self, **options):
        if options['batch'] and options['stream']:
            raise usage_error("--batch and --stream are mutually exclusive")
        if options['revolutions'] < 1:
            raise usage_error("--revolutions must be at least 1")
        mode = 'batch' if options['batch'] else 'stream'
        config = self.run_config(options, mode)
        if mode == 'batch' and not config.is_offline:
            raise usage_error("--batch needs an offline input")
        self.ensure_output_dir(config)

        stats = IngestStats()
        keep_ground = 'ply' in config.formats
        if mode == 'batch':
            buffers = self.open_buffers(config, stats, revolutions=options['revolutions'])
            results = run_batch(list(buffers), config.params, keep_ground_points=keep_ground)
            dropped = malformed = 0
            interrupted = False
        else:
            pipeline = SegmentationPipeline(config.params, keep_ground_points=keep_ground)
            runner = StreamRunner(pipeline, live=not config.is_offline, queue_size=settings.INGEST_QUEUE_SIZE)
            buffers = self.open_buffers(
                config, stats, stop_event=runner.stop_event, revolutions=options['revolutions'],
                max_packets=options['max_packets'], idle_limit=options['idle_timeout'],
            )
            results = runner.run(buffers)
            dropped, malformed, interrupted = runner.dropped, pipeline.malformed_buffers, runner.interrupted

        self.check_decode_rate(stats)
        written = write_scan_outputs(results, config.output_dir, config.formats)

        clusters = sum(len(r.clusters) for r in results)
        self.stdout.write(
            f"{len(results)} scans, {clusters} clusters, "
            f"{sum(r.ground_points for r in results)} ground / "
            f"{sum(r.obstacle_points for r in results)} obstacle / "
            f"{sum(r.noise_points for r in results)} noise / "
            f"{sum(r.invalid_points for r in results)} invalid points"
        )
        self.stdout.write(f"{stats.decoded} packets decoded, {stats.decode_failures} rejected, "
                          f"{dropped} buffers dropped, {malformed} malformed")
        if interrupted:
            self.stdout.write(self.style.WARNING("Interrupted; the scan in progress was flushed"))
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(written)} files to {config.output_dir}"))
