"""
Streaming segmentation: packet buffers in, ground labels and closed clusters out.

Every buffer runs ground segmentation and then clustering; clusters are emitted
as soon as the sweep has moved far enough past them. Batch mode runs the same
code on a whole scan concatenated into one buffer and is the oracle for the
streaming path.
"""

import dataclasses
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .cluster import ClusterBuffer, InitialCluster
from .config import SegParams
from .geometry import GroundLabel
from .ground import segment_buffer
from .packet import PacketBuffer

logger = logging.getLogger(__name__)


# Reference per-scan timings (microseconds) of a compiled C++ build on an i7-7820
REFERENCE_SCAN_US = {'ground': 98.0, 'cluster': 167.0, 'total': 265.0}

# 600 RPM, ~0.55 ms per packet, 5 packets per buffer
REALTIME_BUFFER_BUDGET_US = 833.0


@dataclass(frozen=True, eq=False)
class ClusterRecord:
    """A closed cluster in canonical form: member cells sorted by (col, row)"""

    scan_id: int
    cluster_id: int
    keys: Tuple[Tuple[int, int], ...]
    xyz: np.ndarray

    @property
    def point_count(self):
        return len(self.keys)

    @property
    def col_start(self):
        return min(k[0] for k in self.keys)

    @property
    def col_end(self):
        return max(k[0] for k in self.keys)

    @property
    def centroid(self):
        return self.xyz.mean(axis=0)

    @property
    def bbox(self):
        return self.xyz.min(axis=0), self.xyz.max(axis=0)

    def to_dict(self, include_points=False):
        low, high = self.bbox
        record = {
            'scan_id': self.scan_id,
            'cluster_id': self.cluster_id,
            'point_count': self.point_count,
            'col_start': self.col_start,
            'col_end': self.col_end,
            'centroid': [round(float(v), 6) for v in self.centroid],
            'bbox_min': [round(float(v), 6) for v in low],
            'bbox_max': [round(float(v), 6) for v in high],
        }
        if include_points:
            record['points'] = [list(k) for k in self.keys]
        return record

    def to_json(self, include_points=False):
        return json.dumps(self.to_dict(include_points), sort_keys=True)


def canonical_records(scan_id: int, clusters: Sequence[InitialCluster]) -> List[ClusterRecord]:
    """Sort member points and renumber clusters by their first (col, row) cell"""
    prepared = []
    for cluster in clusters:
        keys = cluster.keys
        order = sorted(range(len(keys)), key=keys.__getitem__)
        prepared.append((tuple(keys[i] for i in order), cluster.coordinates()[order]))
    prepared.sort(key=lambda item: item[0][0])
    return [ClusterRecord(scan_id=scan_id, cluster_id=i, keys=keys, xyz=xyz)
            for i, (keys, xyz) in enumerate(prepared)]


@dataclass
class ScanResult:
    scan_id: int
    clusters: List[ClusterRecord]
    ground_points: int
    obstacle_points: int
    noise_points: int
    invalid_points: int
    columns: int = 0
    ground_xyz: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    noise_keys: Tuple[Tuple[int, int], ...] = ()

    @property
    def total_slots(self):
        return self.ground_points + self.obstacle_points + self.noise_points + self.invalid_points

    def partition(self):
        """Cluster membership as a set of frozensets of (col, row) cells"""
        return {frozenset(c.keys) for c in self.clusters}

    def to_ndjson(self, include_points=True):
        return ''.join(c.to_json(include_points) + '\n' for c in self.clusters)

    def summary(self):
        return {
            'scan_id': self.scan_id,
            'columns': self.columns,
            'clusters': len(self.clusters),
            'ground_points': self.ground_points,
            'obstacle_points': self.obstacle_points,
            'noise_points': self.noise_points,
            'invalid_points': self.invalid_points,
        }


@dataclass(frozen=True)
class BufferTiming:
    scan_id: int
    buffer_seq: int
    columns: int
    ground_cpu_us: float
    cluster_cpu_us: float
    ground_wall_us: float
    cluster_wall_us: float
    emitted: int

    @property
    def total_cpu_us(self):
        return self.ground_cpu_us + self.cluster_cpu_us


@dataclass(frozen=True)
class ScanTiming:
    scan_id: int
    buffers: int
    ground_cpu_us: float
    cluster_cpu_us: float
    total_cpu_us: float
    total_wall_us: float
    completion_lag_us: float


class _ScanAccumulator:
    def __init__(self, scan_id):
        self.scan_id = scan_id
        self.ground = 0
        self.obstacle = 0
        self.invalid = 0
        self.columns = 0
        self.next_col = None
        self.ground_xyz = []
        self.buffers = 0
        self.ground_cpu = 0
        self.cluster_cpu = 0
        self.wall = 0


class SegmentationPipeline:
    """
    Stateful per-buffer processing.

    Call process_buffer for each PacketBuffer in arrival order and flush at the
    end of the stream. Finished scans collect in `results`, and `on_scan` is
    called with each as it completes.
    """

    def __init__(self, params: Optional[SegParams] = None, on_scan: Optional[Callable] = None,
                 keep_ground_points: bool = False):
        self.params = params or SegParams()
        self.on_scan = on_scan
        self.keep_ground_points = keep_ground_points
        self.results: List[ScanResult] = []
        self.buffer_timings: List[BufferTiming] = []
        self.scan_timings: List[ScanTiming] = []
        self.malformed_buffers = 0
        self._clusters: Optional[ClusterBuffer] = None
        self._scan: Optional[_ScanAccumulator] = None

    def process_buffer(self, buffer: PacketBuffer) -> List[InitialCluster]:
        """Segment one buffer; returns the clusters closed by it"""
        if self._scan is not None and buffer.scan_id != self._scan.scan_id:
            self.flush()
        if self._scan is None:
            self._scan = _ScanAccumulator(buffer.scan_id)
            self._clusters = ClusterBuffer(self.params, buffer.scan_id)

        if not self._accepts(buffer):
            return []

        wall_start = time.perf_counter_ns()
        cpu_start = time.process_time_ns()

        ground = segment_buffer(buffer, self.params)

        cpu_ground = time.process_time_ns()
        wall_ground = time.perf_counter_ns()

        self._cluster_buffer(buffer, ground.labels)
        if buffer.closes_scan:
            emitted = self._clusters.finish_scan(total_columns=buffer.col_offset + buffer.n_cols)
        else:
            emitted = self._clusters.close_and_emit(int(buffer.columns[-1]))

        cpu_end = time.process_time_ns()
        wall_end = time.perf_counter_ns()

        timing = BufferTiming(
            scan_id=buffer.scan_id,
            buffer_seq=buffer.buffer_seq,
            columns=buffer.n_cols,
            ground_cpu_us=(cpu_ground - cpu_start) / 1000.0,
            cluster_cpu_us=(cpu_end - cpu_ground) / 1000.0,
            ground_wall_us=(wall_ground - wall_start) / 1000.0,
            cluster_wall_us=(wall_end - wall_ground) / 1000.0,
            emitted=len(emitted),
        )
        self.buffer_timings.append(timing)
        self._account(buffer, ground.labels, timing)

        if buffer.closes_scan:
            self._complete_scan(completion_lag_us=(wall_end - wall_start) / 1000.0)
        return emitted

    def flush(self):
        """Finish the scan in progress, e.g. at end of stream or on shutdown"""
        if self._scan is None:
            return
        wall_start = time.perf_counter_ns()
        cpu_start = time.process_time_ns()
        self._clusters.finish_scan(self._scan.next_col)
        self._scan.cluster_cpu += time.process_time_ns() - cpu_start
        self._scan.wall += time.perf_counter_ns() - wall_start
        self._complete_scan(completion_lag_us=(time.perf_counter_ns() - wall_start) / 1000.0)

    def _accepts(self, buffer: PacketBuffer):
        scan = self._scan
        if buffer.n_cols == 0:
            self.malformed_buffers += 1
            logger.warning("Skipping empty buffer %d of scan %d", buffer.buffer_seq, buffer.scan_id)
            return False
        if scan.next_col is not None and buffer.col_offset < scan.next_col:
            self.malformed_buffers += 1
            logger.warning(
                "Skipping buffer %d of scan %d: starts at column %d, expected %d or later",
                buffer.buffer_seq, buffer.scan_id, buffer.col_offset, scan.next_col,
            )
            return False
        return True

    def _cluster_buffer(self, buffer, labels):
        x, y, z, rho_xy = buffer.cartesian
        # column-major order: bottom to top within each column
        cols, rows = np.nonzero(labels.T == GroundLabel.OBSTACLE)
        xyz = np.stack([x[rows, cols], y[rows, cols], z[rows, cols]], axis=1)
        self._clusters.add_points(buffer.col_offset + cols, rows, rho_xy[rows, cols], xyz)
        self._clusters.refine()

    def _account(self, buffer, labels, timing):
        scan = self._scan
        ground = labels == GroundLabel.GROUND
        scan.ground += int(np.count_nonzero(ground))
        scan.obstacle += int(np.count_nonzero(labels == GroundLabel.OBSTACLE))
        scan.invalid += int(np.count_nonzero(labels == GroundLabel.INVALID))
        scan.columns += buffer.n_cols
        scan.next_col = buffer.col_offset + buffer.n_cols
        scan.buffers += 1
        scan.ground_cpu += timing.ground_cpu_us * 1000
        scan.cluster_cpu += timing.cluster_cpu_us * 1000
        scan.wall += (timing.ground_wall_us + timing.cluster_wall_us) * 1000
        if self.keep_ground_points:
            x, y, z, _ = buffer.cartesian
            scan.ground_xyz.append(np.stack([x[ground], y[ground], z[ground]], axis=1))

    def _complete_scan(self, completion_lag_us):
        scan, clusters = self._scan, self._clusters
        noise_keys = tuple(sorted(k for c in clusters.noise for k in c.keys))
        result = ScanResult(
            scan_id=scan.scan_id,
            clusters=canonical_records(scan.scan_id, clusters.emitted),
            ground_points=scan.ground,
            obstacle_points=scan.obstacle - len(noise_keys),
            noise_points=len(noise_keys),
            invalid_points=scan.invalid,
            columns=scan.columns,
            ground_xyz=np.concatenate(scan.ground_xyz) if scan.ground_xyz else np.empty((0, 3)),
            noise_keys=noise_keys,
        )
        self.scan_timings.append(ScanTiming(
            scan_id=scan.scan_id,
            buffers=scan.buffers,
            ground_cpu_us=scan.ground_cpu / 1000.0,
            cluster_cpu_us=scan.cluster_cpu / 1000.0,
            total_cpu_us=(scan.ground_cpu + scan.cluster_cpu) / 1000.0,
            total_wall_us=scan.wall / 1000.0,
            completion_lag_us=completion_lag_us,
        ))
        self.results.append(result)
        self._scan = None
        self._clusters = None
        logger.debug("Scan %d done: %s", result.scan_id, result.summary())
        if self.on_scan is not None:
            self.on_scan(result)
        return result


def run_stream(buffers: Iterable[PacketBuffer], params: Optional[SegParams] = None,
               keep_ground_points=False) -> List[ScanResult]:
    pipeline = SegmentationPipeline(params, keep_ground_points=keep_ground_points)
    for buffer in buffers:
        pipeline.process_buffer(buffer)
    pipeline.flush()
    return pipeline.results


def group_scans(buffers: Iterable[PacketBuffer]) -> List[List[PacketBuffer]]:
    scans = []
    for buffer in buffers:
        if not scans or scans[-1][-1].scan_id != buffer.scan_id:
            scans.append([])
        scans[-1].append(buffer)
    return scans


def run_batch(buffers, params: Optional[SegParams] = None, keep_ground_points=False) -> List[ScanResult]:
    """Process each scan as one buffer holding all of its columns"""
    if isinstance(buffers, PacketBuffer):
        buffers = [buffers]
    pipeline = SegmentationPipeline(params, keep_ground_points=keep_ground_points)
    for scan in group_scans(buffers):
        whole = PacketBuffer.concatenate(scan)
        if not whole.closes_scan:
            whole = dataclasses.replace(whole, closes_scan=True)
        pipeline.process_buffer(whole)
    pipeline.flush()
    return pipeline.results


STAGES = ('ground_cpu_us', 'cluster_cpu_us', 'total_cpu_us')


@dataclass
class LatencyReport:
    """Per-buffer and per-scan timings over all repetitions"""

    buffers: pd.DataFrame
    scans: pd.DataFrame
    repetitions: int
    deterministic: bool = True

    @property
    def is_empty(self):
        return self.buffers.empty

    def summary(self) -> pd.DataFrame:
        """mean / p50 / p99 / max in microseconds per measured quantity"""
        rows = []
        measured = [
            ('buffer ground', self.buffers, 'ground_cpu_us'),
            ('buffer cluster', self.buffers, 'cluster_cpu_us'),
            ('buffer total', self.buffers, 'total_cpu_us'),
            ('buffer wall', self.buffers, 'total_wall_us'),
            ('scan ground', self.scans, 'ground_cpu_us'),
            ('scan cluster', self.scans, 'cluster_cpu_us'),
            ('scan total', self.scans, 'total_cpu_us'),
            ('completion lag', self.scans, 'completion_lag_us'),
        ]
        for name, frame, column in measured:
            if frame.empty:
                continue
            values = frame[column]
            rows.append({
                'quantity': name,
                'mean': values.mean(),
                'p50': values.quantile(0.5),
                'p99': values.quantile(0.99),
                'max': values.max(),
                'count': int(values.count()),
            })
        return pd.DataFrame(rows, columns=['quantity', 'mean', 'p50', 'p99', 'max', 'count'])

    def reference(self) -> pd.DataFrame:
        """Published per-scan means next to the measured ones"""
        measured = {}
        if not self.scans.empty:
            measured = {
                'ground': self.scans['ground_cpu_us'].mean(),
                'cluster': self.scans['cluster_cpu_us'].mean(),
                'total': self.scans['total_cpu_us'].mean(),
            }
        return pd.DataFrame([
            {'stage': stage, 'reference_us': ref, 'measured_us': measured.get(stage, np.nan)}
            for stage, ref in REFERENCE_SCAN_US.items()
        ])

    def buffer_p99(self):
        if self.is_empty:
            return None
        return float(self.buffers['total_cpu_us'].quantile(0.99))

    def scan_p99(self):
        if self.scans.empty:
            return None
        return float(self.scans['total_cpu_us'].quantile(0.99))

    def meets_realtime_budget(self, budget_us=REALTIME_BUFFER_BUDGET_US):
        p99 = self.buffer_p99()
        return p99 is None or p99 < budget_us

    def check_budgets(self, max_buffer_us=REALTIME_BUFFER_BUDGET_US, max_scan_us=None):
        """Messages for every p99 past its limit; a limit of None or 0 is not checked"""
        failures = []
        for name, p99, limit in (('buffer', self.buffer_p99(), max_buffer_us),
                                 ('scan', self.scan_p99(), max_scan_us)):
            if limit and p99 is not None and p99 >= limit:
                failures.append(f"{name.capitalize()} p99 {p99:.1f} us is over the {limit:.0f} us budget")
        return failures

    def to_text(self):
        if self.is_empty:
            return "No buffers were processed.\n"
        lines = [
            f"Repetitions: {self.repetitions}",
            f"Buffers: {len(self.buffers)}  Scans: {len(self.scans)}",
            f"Deterministic cluster output: {'yes' if self.deterministic else 'NO'}",
            '',
            self.summary().to_string(index=False, float_format=lambda v: f"{v:.1f}"),
            '',
            self.reference().to_string(index=False, float_format=lambda v: f"{v:.1f}"),
            '',
            f"Buffer p99 {self.buffer_p99():.1f} us vs realtime budget {REALTIME_BUFFER_BUDGET_US:.0f} us",
        ]
        return '\n'.join(lines) + '\n'


def measure_latency(buffers: Sequence[PacketBuffer], params: Optional[SegParams] = None,
                    repetitions: int = 1) -> LatencyReport:
    """Replay the same buffers `repetitions` times and collect stage timings"""
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    buffers = list(buffers)
    buffer_rows, scan_rows = [], []
    signature = None
    deterministic = True
    for repetition in range(repetitions):
        pipeline = SegmentationPipeline(params)
        for buffer in buffers:
            pipeline.process_buffer(buffer)
        pipeline.flush()

        for t in pipeline.buffer_timings:
            buffer_rows.append({
                'repetition': repetition, 'scan_id': t.scan_id, 'buffer_seq': t.buffer_seq,
                'columns': t.columns, 'ground_cpu_us': t.ground_cpu_us, 'cluster_cpu_us': t.cluster_cpu_us,
                'total_cpu_us': t.total_cpu_us, 'total_wall_us': t.ground_wall_us + t.cluster_wall_us,
                'emitted': t.emitted,
            })
        for t in pipeline.scan_timings:
            scan_rows.append({
                'repetition': repetition, 'scan_id': t.scan_id, 'buffers': t.buffers,
                'ground_cpu_us': t.ground_cpu_us, 'cluster_cpu_us': t.cluster_cpu_us,
                'total_cpu_us': t.total_cpu_us, 'total_wall_us': t.total_wall_us,
                'completion_lag_us': t.completion_lag_us,
            })

        output = ''.join(r.to_ndjson() for r in pipeline.results)
        if signature is None:
            signature = output
        elif output != signature:
            deterministic = False
            logger.warning("Repetition %d produced different clusters", repetition)

    buffer_columns = ['repetition', 'scan_id', 'buffer_seq', 'columns', 'ground_cpu_us', 'cluster_cpu_us',
                      'total_cpu_us', 'total_wall_us', 'emitted']
    scan_columns = ['repetition', 'scan_id', 'buffers', 'ground_cpu_us', 'cluster_cpu_us', 'total_cpu_us',
                    'total_wall_us', 'completion_lag_us']
    return LatencyReport(
        buffers=pd.DataFrame(buffer_rows, columns=buffer_columns),
        scans=pd.DataFrame(scan_rows, columns=scan_columns),
        repetitions=repetitions,
        deterministic=deterministic,
    )


_END = object()


class StreamRunner:
    """
    Two-stage runner: a producer thread pulls buffers (decoding and assembling
    on the way) into a bounded queue; the calling thread segments them in order.

    In live mode a full queue drops its oldest buffer; offline sources block.
    """

    def __init__(self, pipeline: SegmentationPipeline, live: bool = False, queue_size: int = 64):
        self.pipeline = pipeline
        self.live = live
        self.queue = queue.Queue(maxsize=queue_size)
        self.dropped = 0
        self.interrupted = False
        self._stop = threading.Event()
        self._error = None

    @property
    def stop_event(self):
        return self._stop

    def _produce(self, buffers):
        try:
            for buffer in buffers:
                if self._stop.is_set():
                    break
                self._put(buffer)
        except Exception as e:
            self._error = e
        finally:
            self._put(_END)

    def _put(self, item):
        if self.live and item is not _END:
            try:
                self.queue.put_nowait(item)
            except queue.Full:
                self._drop_oldest()
                self.queue.put_nowait(item)
            return
        while not self._stop.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _drop_oldest(self):
        try:
            self.queue.get_nowait()
        except queue.Empty:
            return
        self.dropped += 1
        logger.warning("Processing is falling behind, dropped a buffer (%d so far)", self.dropped)

    def run(self, buffers: Iterable[PacketBuffer]) -> List[ScanResult]:
        producer = threading.Thread(target=self._produce, args=(buffers,), name='lidar-ingest', daemon=True)
        producer.start()
        try:
            while True:
                item = self.queue.get()
                if item is _END:
                    break
                self.pipeline.process_buffer(item)
        except KeyboardInterrupt:
            self.interrupted = True
            logger.info("Interrupted, flushing the current scan")
        finally:
            self._stop.set()
            self.pipeline.flush()
        producer.join(timeout=1.0)
        if self._error is not None:
            raise self._error
        return self.pipeline.results
