"""
Shared plumbing for the segmentation management commands.

Exit codes: 0 success, 1 usage, 2 unreadable input or too many undecodable
packets, 3 quality gate failure.
"""

import logging
import os

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ...config import OUTPUT_FORMATS, RunConfig, SegParams, parse_overrides
from ...exceptions import CalibrationError, CaptureError, ConfigError, PacketError, SceneError
from ...ingest import IngestStats, decode_payloads, listen_udp, read_pcap, read_raw
from ...packet import BeamCalibration, assemble_buffers, load_calibration
from ...synth import BUNDLED_SCENES, SceneSpec, bundled_scene, raycast_scan, scene_to_packets

logger = logging.getLogger(__name__)


EXIT_USAGE = 1
EXIT_IO = 2
EXIT_GATE = 3

INPUT_FLAGS = ('pcap', 'udp', 'raw', 'scene')


RECORD_HELP = (
    'also save the run to the Django database (LIDAR_SEG_DB, default db.sqlite3 in the project directory); '
    'the only write outside the output directory'
)


def usage_error(message):
    return CommandError(message, returncode=EXIT_USAGE)


def io_error(message):
    return CommandError(message, returncode=EXIT_IO)


def load_scene(location) -> SceneSpec:
    """A scene file, or the name of a bundled scene"""
    if not os.path.exists(location) and location in BUNDLED_SCENES:
        return bundled_scene(location)
    return SceneSpec.load(location)


class SegmentationCommand(BaseCommand):
    """
    Base for commands that read packets and segment them.

    Subclasses implement `run(**options)`; typed library errors raised from it
    are turned into CommandErrors with the matching exit code.
    """

    def add_input_arguments(self, parser, udp=True):
        parser.add_argument('--pcap', help='pcap capture to replay')
        if udp:
            parser.add_argument('--udp', type=int, nargs='?', const=settings.UDP_PORT, metavar='PORT',
                                help=f'listen for live packets (default port {settings.UDP_PORT})')
        parser.add_argument('--raw', help='file of length-prefixed raw packets')
        parser.add_argument('--scene', help='scene JSON (or bundled scene name) to simulate')
        parser.add_argument('--revolutions', type=int, default=1, help='revolutions to simulate from --scene')
        parser.add_argument('--calibration', help='32-row beam calibration table (default VLP-32C)')
        parser.add_argument('--config', help='JSON run configuration; flags override its values')
        parser.add_argument('--param', action='append', default=[], metavar='KEY=VALUE',
                            help='override one segmentation parameter, may be repeated')
        parser.add_argument('--out', help='output directory')

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CommandError:
            raise
        except ConfigError as e:
            raise usage_error(str(e))
        except (CaptureError, CalibrationError, SceneError, PacketError) as e:
            raise io_error(str(e))
        except OSError as e:
            raise io_error(str(e))

    def run(self, **options):
        raise NotImplementedError

    # configuration

    def run_config(self, options, mode, allowed=INPUT_FLAGS, default_formats=('ndjson',)) -> RunConfig:
        """Merge settings, --config file and flags into one RunConfig"""
        base = RunConfig.load(options['config']) if options.get('config') else None

        given = [kind for kind in INPUT_FLAGS if options.get(kind) is not None]
        if len(given) > 1:
            raise usage_error(f"Give exactly one input, got --{' and --'.join(given)}")
        if given:
            kind = given[0]
            location = str(options[kind])
        elif base is not None:
            kind, location = base.input_kind, base.input_location
        else:
            raise usage_error(f"An input is required: one of --{', --'.join(allowed)}")
        if kind not in allowed:
            raise usage_error(f"--{kind} input is not supported by this command")

        params = base.params if base is not None else SegParams.from_settings()
        params = params.with_overrides(parse_overrides(options.get('param')))

        formats = options.get('format')
        if formats:
            formats = tuple(f.strip() for f in formats.split(',') if f.strip())
            bad = [f for f in formats if f not in OUTPUT_FORMATS]
            if bad:
                raise usage_error(f"Unknown output format {', '.join(bad)}; choose from {', '.join(OUTPUT_FORMATS)}")
        else:
            formats = base.formats if base is not None else default_formats

        port = int(location) if kind == 'udp' else (base.port if base is not None else settings.UDP_PORT)
        return RunConfig(
            input_kind=kind,
            input_location=location,
            params=params,
            output_dir=options.get('out') or (base.output_dir if base is not None else 'out'),
            formats=formats,
            mode=mode,
            port=port,
            calibration=options.get('calibration') or (base.calibration if base is not None else None),
        )

    # input

    def open_buffers(self, config: RunConfig, stats: IngestStats, stop_event=None, revolutions=1,
                     max_packets=None, idle_limit=None):
        """Lazy PacketBuffer stream for the configured input"""
        params = config.params
        calibration = load_calibration(config.calibration) if config.calibration else None

        if config.input_kind == 'scene':
            spec = load_scene(config.input_location)
            scan = raycast_scan(spec, calibration)
            payloads = scene_to_packets(scan, revolutions=revolutions)
            stats.datagrams += len(payloads)
            calibration = scan.calibration
        elif config.input_kind == 'pcap':
            payloads = read_pcap(config.input_location, port=config.port, stats=stats)
        elif config.input_kind == 'raw':
            payloads = read_raw(config.input_location, stats=stats)
        else:
            payloads = listen_udp(port=config.port, max_packets=max_packets, idle_limit=idle_limit,
                                  stop_event=stop_event, stats=stats)

        packets = decode_payloads(payloads, stats)
        return assemble_buffers(packets, calibration or BeamCalibration.vlp32c(), params.buffer_packets)

    def check_decode_rate(self, stats: IngestStats):
        limit = settings.DECODE_FAILURE_LIMIT
        if stats.failure_rate > limit:
            raise io_error(
                f"{stats.decode_failures} of {stats.decoded + stats.decode_failures} packets failed to decode "
                f"({stats.failure_rate:.1%}, limit {limit:.0%})"
            )
        if stats.decode_failures:
            self.stderr.write(self.style.WARNING(f"Skipped {stats.decode_failures} undecodable packets"))

    def ensure_output_dir(self, config: RunConfig):
        try:
            return config.ensure_output_dir()
        except ConfigError as e:
            raise io_error(str(e))
