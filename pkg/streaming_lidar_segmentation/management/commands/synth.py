import json
import os
from dataclasses import asdict

from django.conf import settings

from ...ingest import write_pcap, write_raw
from ...synth import BUNDLED_SCENES, NO_RETURN, bundled_scene, random_scene, raycast_scan, scene_to_packets
from ._base import SegmentationCommand, load_scene, usage_error

CAPTURE_FORMATS = ('raw', 'pcap')


def truth_summary(scan):
    return {
        'name': scan.name,
        'columns': scan.n_cols,
        'ground_points': scan.ground_count,
        'no_return': int((scan.truth == NO_RETURN).sum()),
        'objects': [asdict(o) for o in scan.truth_objects],
    }


class Command(SegmentationCommand):
    help = 'Simulate scenes and write them as packet captures with ground truth'

    def add_arguments(self, parser):
        parser.add_argument('scenes', nargs='*', help='scene files or bundled scene names (default: all bundled)')
        parser.add_argument('--random', type=int, default=0, metavar='N', help='also generate N random scenes')
        parser.add_argument('--seed', type=int, default=0, help='seed of the first random scene')
        parser.add_argument('--objects', type=int, default=8, help='objects per random scene')
        parser.add_argument('--revolutions', type=int, default=1)
        parser.add_argument('--format', default='raw,pcap', help='comma separated: raw, pcap')
        parser.add_argument('--out', default='corpus', help='output directory')

    def run(self, **options):
        formats = [f.strip() for f in options['format'].split(',') if f.strip()]
        bad = [f for f in formats if f not in CAPTURE_FORMATS]
        if bad or not formats:
            raise usage_error(f"--format takes {', '.join(CAPTURE_FORMATS)}, got {options['format']!r}")
        if options['revolutions'] < 1 or options['random'] < 0 or options['objects'] < 0:
            raise usage_error("--revolutions must be positive and --random/--objects not negative")

        specs = [load_scene(s) for s in options['scenes']]
        if not specs and not options['random']:
            specs = [bundled_scene(name) for name in BUNDLED_SCENES]
        specs += [random_scene(options['seed'] + k, n_objects=options['objects']) for k in range(options['random'])]

        output_dir = options['out']
        os.makedirs(output_dir, exist_ok=True)
        for spec in specs:
            scan = raycast_scan(spec)
            payloads = scene_to_packets(scan, revolutions=options['revolutions'])
            base = os.path.join(output_dir, spec.name)
            if 'raw' in formats:
                write_raw(f'{base}.raw', payloads)
            if 'pcap' in formats:
                write_pcap(f'{base}.pcap', payloads, port=settings.UDP_PORT)
            with open(f'{base}.scene.json', 'w') as f:
                f.write(spec.to_json())
            with open(f'{base}.truth.json', 'w') as f:
                json.dump(truth_summary(scan), f, indent=2)
            self.stdout.write(f"{spec.name}: {len(payloads)} packets, {len(spec.objects)} objects")
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(specs)} scenes to {output_dir}"))
