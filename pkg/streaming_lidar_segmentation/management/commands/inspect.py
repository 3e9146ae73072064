from django.conf import settings

from ...ingest import IngestStats, decode_payloads, read_pcap, read_raw
from ...packet import RANGE_TICK, load_calibration, render_calibration
from ._base import SegmentationCommand, usage_error


class Command(SegmentationCommand):
    help = 'Dump decoded data packet headers from a capture'

    def add_arguments(self, parser):
        parser.add_argument('--pcap', help='pcap capture')
        parser.add_argument('--raw', help='file of length-prefixed raw packets')
        parser.add_argument('--port', type=int, default=settings.UDP_PORT, help='UDP port of the data packets')
        parser.add_argument('--limit', type=int, default=20, help='packets to print, 0 for all')
        parser.add_argument('--calibration', help='print this calibration table instead of packets')

    def run(self, **options):
        if options['calibration'] is not None:
            self.stdout.write(render_calibration(load_calibration(options['calibration'])))
            return
        if (options['pcap'] is None) == (options['raw'] is None):
            raise usage_error("Give exactly one of --pcap or --raw")
        if options['limit'] < 0:
            raise usage_error("--limit must not be negative")

        stats = IngestStats()
        if options['pcap'] is not None:
            payloads = read_pcap(options['pcap'], port=options['port'], stats=stats)
        else:
            payloads = read_raw(options['raw'], stats=stats)

        self.stdout.write(f"{'packet':>7} {'timestamp_us':>12} {'first_az':>9} {'last_az':>9} {'returns':>7} "
                          f"{'nearest_m':>9}")
        shown = 0
        for index, packet in enumerate(decode_payloads(payloads, stats)):
            if options['limit'] and shown >= options['limit']:
                continue
            ranges = packet.ranges[packet.ranges > 0]
            nearest = f"{ranges.min() * RANGE_TICK:.3f}" if ranges.size else '-'
            self.stdout.write(
                f"{index:>7} {packet.timestamp_us:>12} {packet.azimuths[0] / 100:>9.2f} "
                f"{packet.azimuths[-1] / 100:>9.2f} {packet.return_count:>7} {nearest:>9}"
            )
            shown += 1
        self.stdout.write(
            f"{stats.datagrams} datagrams, {stats.skipped} skipped, {stats.decoded} decoded, "
            f"{stats.decode_failures} rejected"
        )
        self.check_decode_rate(stats)
