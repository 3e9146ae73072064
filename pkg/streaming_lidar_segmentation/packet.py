"""
Raw data packet codec and packet-buffer assembly for a 32-beam spinning LiDAR.

Wire layout of one 1248-byte data packet:

    12 data blocks of 100 bytes
        flag          uint16 LE   (0xEEFF on the wire, carried opaquely)
        azimuth       uint16 LE   centidegrees in [0, 36000)
        32 returns    (range uint16 LE in 4 mm ticks, reflectivity uint8)
    48 tail bytes                 (timestamp in the first 4 bytes, rest opaque)

Each data block opens one column of the range image. Returns arrive in wire
channel order and are permuted into ascending vertical-angle rows. A return
belongs to the column nearest its own azimuth (block azimuth plus the beam's
offset and firing delay), which for beams with a large offset is a few blocks
away from the block that carried it.
"""

import io
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .exceptions import BadAzimuth, CalibrationError, OutOfOrderPacket, WrongLength
from .geometry import GroundLabel, SphericalPoint, to_cartesian_arrays, wrap_degrees

logger = logging.getLogger(__name__)


N_BEAMS = 32
BLOCKS_PER_PACKET = 12
PACKET_SIZE = 1248
TAIL_SIZE = 48
RANGE_TICK = 0.004
AZIMUTH_LIMIT = 36000
UPPER_BLOCK_FLAG = 0xEEFF
WRAP_THRESHOLD = 18000
DEFAULT_AZIMUTH_STEP = 0.2

RETURN_DTYPE = np.dtype([('range', '<u2'), ('reflectivity', 'u1')])
BLOCK_DTYPE = np.dtype([('flag', '<u2'), ('azimuth', '<u2'), ('returns', RETURN_DTYPE, (N_BEAMS,))])
PACKET_DTYPE = np.dtype([('blocks', BLOCK_DTYPE, (BLOCKS_PER_PACKET,)), ('tail', 'u1', (TAIL_SIZE,))])

assert BLOCK_DTYPE.itemsize == 100
assert PACKET_DTYPE.itemsize == PACKET_SIZE


@dataclass(frozen=True)
class DataBlock:
    flag: int
    azimuth: int
    ranges: np.ndarray
    reflectivity: np.ndarray

    @property
    def azimuth_degrees(self):
        return self.azimuth / 100.0


@dataclass(frozen=True, eq=False)
class DataPacket:
    """
    One decoded data packet, stored column-wise.

    ranges and reflectivity are (12, 32) arrays in wire channel order.
    """

    azimuths: np.ndarray
    ranges: np.ndarray
    reflectivity: np.ndarray
    flags: np.ndarray = field(default_factory=lambda: np.full(BLOCKS_PER_PACKET, UPPER_BLOCK_FLAG, dtype=np.uint16))
    tail: bytes = bytes(TAIL_SIZE)

    def __post_init__(self):
        object.__setattr__(self, 'azimuths', np.asarray(self.azimuths, dtype=np.uint16).reshape(BLOCKS_PER_PACKET))
        object.__setattr__(self, 'ranges', np.asarray(self.ranges, dtype=np.uint16).reshape(BLOCKS_PER_PACKET, N_BEAMS))
        object.__setattr__(self, 'reflectivity',
                           np.asarray(self.reflectivity, dtype=np.uint8).reshape(BLOCKS_PER_PACKET, N_BEAMS))
        object.__setattr__(self, 'flags', np.asarray(self.flags, dtype=np.uint16).reshape(BLOCKS_PER_PACKET))
        if len(self.tail) != TAIL_SIZE:
            raise WrongLength(len(self.tail), TAIL_SIZE)
        object.__setattr__(self, 'tail', bytes(self.tail))

    def __eq__(self, other):
        if not isinstance(other, DataPacket):
            return NotImplemented
        return (np.array_equal(self.azimuths, other.azimuths)
                and np.array_equal(self.ranges, other.ranges)
                and np.array_equal(self.reflectivity, other.reflectivity)
                and np.array_equal(self.flags, other.flags)
                and self.tail == other.tail)

    @property
    def blocks(self) -> List[DataBlock]:
        return [DataBlock(int(self.flags[b]), int(self.azimuths[b]), self.ranges[b], self.reflectivity[b])
                for b in range(BLOCKS_PER_PACKET)]

    @property
    def timestamp_us(self):
        """Microseconds past the hour, from the first four tail bytes"""
        return int.from_bytes(self.tail[:4], 'little')

    @property
    def return_count(self):
        return int(np.count_nonzero(self.ranges))

    @classmethod
    def build(cls, azimuths, ranges, reflectivity=None, timestamp_us=0, flags=None):
        """Packet with a timestamped tail; reflectivity defaults to zero"""
        if reflectivity is None:
            reflectivity = np.zeros((BLOCKS_PER_PACKET, N_BEAMS), dtype=np.uint8)
        if flags is None:
            flags = np.full(BLOCKS_PER_PACKET, UPPER_BLOCK_FLAG, dtype=np.uint16)
        tail = int(timestamp_us).to_bytes(4, 'little') + bytes(TAIL_SIZE - 4)
        return cls(azimuths=azimuths, ranges=ranges, reflectivity=reflectivity, flags=flags, tail=tail)


def decode_packet(data: bytes) -> DataPacket:
    if len(data) != PACKET_SIZE:
        raise WrongLength(len(data), PACKET_SIZE)

    record = np.frombuffer(data, dtype=PACKET_DTYPE, count=1)[0]
    blocks = record['blocks']
    azimuths = blocks['azimuth']
    bad = np.flatnonzero(azimuths >= AZIMUTH_LIMIT)
    if bad.size:
        raise BadAzimuth(int(bad[0]), int(azimuths[bad[0]]))

    return DataPacket(
        azimuths=azimuths.copy(),
        ranges=blocks['returns']['range'].copy(),
        reflectivity=blocks['returns']['reflectivity'].copy(),
        flags=blocks['flag'].copy(),
        tail=record['tail'].tobytes(),
    )


def encode_packet(packet: DataPacket) -> bytes:
    bad = np.flatnonzero(packet.azimuths >= AZIMUTH_LIMIT)
    if bad.size:
        raise BadAzimuth(int(bad[0]), int(packet.azimuths[bad[0]]))

    record = np.zeros(1, dtype=PACKET_DTYPE)
    blocks = record[0]['blocks']
    blocks['flag'] = packet.flags
    blocks['azimuth'] = packet.azimuths
    blocks['returns']['range'] = packet.ranges
    blocks['returns']['reflectivity'] = packet.reflectivity
    record[0]['tail'] = np.frombuffer(packet.tail, dtype=np.uint8)
    return record.tobytes()


# Published VLP-32C beam table, wire channel order
VLP32C_VERTICAL = (
    -25.0, -1.0, -1.667, -15.639, -11.31, 0.0, -0.667, -8.843,
    -7.254, 0.333, -0.333, -6.148, -5.333, 1.333, 0.667, -4.0,
    -4.667, 1.667, 1.0, -3.667, -3.333, 3.333, 2.333, -2.667,
    -3.0, 7.0, 4.667, -2.333, -2.0, 15.0, 10.333, -1.333,
)
VLP32C_AZIMUTH_OFFSET = (
    1.4, -4.2, 1.4, -1.4, 1.4, -1.4, 4.2, -1.4,
    1.4, -4.2, 1.4, -1.4, 4.2, -1.4, 4.2, -1.4,
    1.4, -4.2, 1.4, -4.2, 4.2, -1.4, 1.4, -1.4,
    1.4, -1.4, 1.4, -4.2, 4.2, -1.4, 1.4, -1.4,
)
# channels fire in pairs every 2.304 us of a 55.296 us firing cycle
VLP32C_FIRING_FRACTION = tuple(round((channel // 2) / 24.0, 6) for channel in range(N_BEAMS))


@dataclass(frozen=True, eq=False)
class ColumnLayout:
    """
    Where each row's returns land for a given column step.

    Row i of block b belongs to column b + shifts[i]; its azimuth is that
    column's block azimuth plus residuals[i], with |residual| <= step / 2.
    """

    step: float
    shifts: np.ndarray
    residuals: np.ndarray

    @property
    def lag(self):
        """Blocks that must follow block b before column b is complete"""
        return max(0, -int(self.shifts.min()))

    @property
    def lead(self):
        return max(0, int(self.shifts.max()))


@dataclass(frozen=True)
class BeamCalibration:
    """
    Beam geometry in range-image row order.

    vertical_angles, azimuth_offsets and firing_fractions are indexed by row
    (ascending vertical angle); channel_to_row maps a wire channel to its row.
    A firing fraction is the beam's firing time within a block as a fraction
    of the block period.
    """

    vertical_angles: tuple
    azimuth_offsets: tuple
    channel_to_row: tuple
    firing_fractions: tuple = (0.0,) * N_BEAMS

    def __post_init__(self):
        for name in ('vertical_angles', 'azimuth_offsets', 'channel_to_row', 'firing_fractions'):
            values = tuple(getattr(self, name))
            if len(values) != N_BEAMS:
                raise CalibrationError(f"{name} needs {N_BEAMS} entries, got {len(values)}")
            object.__setattr__(self, name, values)
        if sorted(self.channel_to_row) != list(range(N_BEAMS)):
            raise CalibrationError("channel_to_row is not a permutation of the beam rows")
        if np.any(np.diff(self.vertical_angles) <= 0):
            raise CalibrationError("vertical angles must be strictly increasing in row order")
        if not all(0.0 <= f < 1.0 for f in self.firing_fractions):
            raise CalibrationError("firing fractions must lie in [0, 1)")

    @classmethod
    def from_channels(cls, vertical_by_channel: Sequence[float], offsets_by_channel: Sequence[float],
                      firing_by_channel: Optional[Sequence[float]] = None):
        vertical = np.asarray(vertical_by_channel, dtype=np.float64)
        offsets = np.asarray(offsets_by_channel, dtype=np.float64)
        firing = np.zeros(N_BEAMS) if firing_by_channel is None else np.asarray(firing_by_channel, dtype=np.float64)
        if vertical.shape != (N_BEAMS,) or offsets.shape != (N_BEAMS,) or firing.shape != (N_BEAMS,):
            raise CalibrationError(f"Calibration needs {N_BEAMS} channels")
        order = np.argsort(vertical, kind='stable')
        channel_to_row = np.empty(N_BEAMS, dtype=int)
        channel_to_row[order] = np.arange(N_BEAMS)
        return cls(
            vertical_angles=tuple(float(v) for v in vertical[order]),
            azimuth_offsets=tuple(float(o) for o in offsets[order]),
            channel_to_row=tuple(int(r) for r in channel_to_row),
            firing_fractions=tuple(float(f) for f in firing[order]),
        )

    @classmethod
    def vlp32c(cls):
        return cls.from_channels(VLP32C_VERTICAL, VLP32C_AZIMUTH_OFFSET, VLP32C_FIRING_FRACTION)

    @classmethod
    def uniform(cls, low=-16.0, step=1.0):
        """Evenly spaced beams firing together with no azimuth offsets; row 16 is horizontal by default"""
        vertical = [low + step * i for i in range(N_BEAMS)]
        return cls(tuple(vertical), (0.0,) * N_BEAMS, tuple(range(N_BEAMS)))

    @cached_property
    def phi(self):
        return np.asarray(self.vertical_angles, dtype=np.float64)

    @cached_property
    def offsets(self):
        return np.asarray(self.azimuth_offsets, dtype=np.float64)

    @cached_property
    def firing(self):
        return np.asarray(self.firing_fractions, dtype=np.float64)

    def column_layout(self, step: float = DEFAULT_AZIMUTH_STEP) -> ColumnLayout:
        """Column shift and leftover azimuth of every row, for blocks `step` degrees apart"""
        if step <= 0:
            raise CalibrationError(f"Column step must be positive, got {step}")
        total = self.offsets + self.firing * step
        shifts = np.round(total / step).astype(np.intp)
        return ColumnLayout(step=float(step), shifts=shifts, residuals=total - shifts * step)

    @cached_property
    def row_of_channel(self):
        return np.asarray(self.channel_to_row, dtype=np.intp)

    @cached_property
    def channel_of_row(self):
        inverse = np.empty(N_BEAMS, dtype=np.intp)
        inverse[self.row_of_channel] = np.arange(N_BEAMS)
        return inverse

    def to_rows(self, per_channel):
        """Reorder a (..., 32) per-channel array into row order"""
        return np.asarray(per_channel)[..., self.channel_of_row]

    def to_channels(self, per_row):
        return np.asarray(per_row)[..., self.row_of_channel]


def parse_calibration(text: str) -> BeamCalibration:
    """
    Parse the 32-row `channel vertical_deg azimuth_offset_deg [firing_fraction]`
    table. Without the fourth column every beam fires at the block start.
    """
    try:
        table = np.loadtxt(io.StringIO(text), comments='#', ndmin=2)
    except ValueError as e:
        raise CalibrationError(f"Calibration table is not numeric: {e}")
    if table.shape not in ((N_BEAMS, 3), (N_BEAMS, 4)):
        raise CalibrationError(f"Calibration table must have {N_BEAMS} rows of 3 or 4 columns, got {table.shape}")

    channels = table[:, 0].astype(int)
    if sorted(channels) != list(range(N_BEAMS)):
        raise CalibrationError("Calibration channels must be 0..31, each exactly once")
    order = np.argsort(channels)
    firing = table[order, 3] if table.shape[1] == 4 else None
    return BeamCalibration.from_channels(table[order, 1], table[order, 2], firing)


def load_calibration(path) -> BeamCalibration:
    try:
        with open(path) as f:
            return parse_calibration(f.read())
    except OSError as e:
        raise CalibrationError(f"Cannot read calibration file {path}: {e}")


def render_calibration(calibration: BeamCalibration) -> str:
    vertical = calibration.to_channels(calibration.phi)
    offsets = calibration.to_channels(calibration.offsets)
    firing = calibration.to_channels(calibration.firing)
    lines = ['# channel vertical_deg azimuth_offset_deg firing_fraction']
    for channel in range(N_BEAMS):
        lines.append(f"{channel} {vertical[channel]:.3f} {offsets[channel]:.3f} {firing[channel]:.6f}")
    return '\n'.join(lines) + '\n'


@dataclass(frozen=True, eq=False)
class PacketBuffer:
    """
    N x M' slice of one scan: rows are beams in ascending vertical order,
    columns are consecutive blocks starting at global column col_offset.
    azimuths are the block azimuths; a cell's own azimuth adds its row's
    residual for blocks azimuth_step degrees apart.
    """

    scan_id: int
    buffer_seq: int
    col_offset: int
    azimuths: np.ndarray
    rho: np.ndarray
    reflectivity: np.ndarray
    calibration: BeamCalibration
    closes_scan: bool = False
    azimuth_step: float = DEFAULT_AZIMUTH_STEP

    def __post_init__(self):
        azimuths = np.array(self.azimuths, dtype=np.float64)
        rho = np.array(self.rho, dtype=np.float64)
        reflectivity = np.array(self.reflectivity, dtype=np.uint8)
        if rho.shape != (N_BEAMS, azimuths.size) or reflectivity.shape != rho.shape:
            raise ValueError(f"Buffer arrays disagree: rho {rho.shape}, {azimuths.size} azimuths")
        for name, array in (('azimuths', azimuths), ('rho', rho), ('reflectivity', reflectivity)):
            array.flags.writeable = False
            object.__setattr__(self, name, array)

    @property
    def n_rows(self):
        return self.rho.shape[0]

    @property
    def n_cols(self):
        return self.rho.shape[1]

    @property
    def columns(self):
        return np.arange(self.col_offset, self.col_offset + self.n_cols)

    @cached_property
    def valid(self):
        return self.rho > 0.0

    @cached_property
    def phi(self):
        return np.broadcast_to(self.calibration.phi[:, None], self.rho.shape)

    @cached_property
    def theta(self):
        residuals = self.calibration.column_layout(self.azimuth_step).residuals
        return wrap_degrees(self.azimuths[None, :] + residuals[:, None])

    @cached_property
    def cartesian(self):
        """(x, y, z, rho_xy) arrays of shape (N, M')"""
        return to_cartesian_arrays(self.rho, self.phi, self.theta)

    @property
    def return_count(self):
        return int(np.count_nonzero(self.valid))

    def point_grid(self) -> List[List[SphericalPoint]]:
        """Fresh SphericalPoint objects, one list per column, bottom row first"""
        grid = []
        for j in range(self.n_cols):
            column = []
            for i in range(self.n_rows):
                column.append(SphericalPoint(
                    rho=float(self.rho[i, j]), phi=float(self.phi[i, j]), theta=float(self.theta[i, j]),
                    row=i, col=self.col_offset + j,
                    label=GroundLabel.UNLABELED if self.valid[i, j] else GroundLabel.INVALID,
                ))
            grid.append(column)
        return grid

    @classmethod
    def concatenate(cls, buffers: Sequence['PacketBuffer']) -> 'PacketBuffer':
        """Join the consecutive buffers of one scan into a single buffer"""
        if not buffers:
            raise ValueError("Nothing to concatenate")
        first = buffers[0]
        expected = first.col_offset
        for b in buffers:
            if b.scan_id != first.scan_id or b.col_offset != expected:
                raise ValueError("Buffers are not consecutive slices of one scan")
            expected += b.n_cols
        return cls(
            scan_id=first.scan_id,
            buffer_seq=first.buffer_seq,
            col_offset=first.col_offset,
            azimuths=np.concatenate([b.azimuths for b in buffers]),
            rho=np.concatenate([b.rho for b in buffers], axis=1),
            reflectivity=np.concatenate([b.reflectivity for b in buffers], axis=1),
            calibration=first.calibration,
            closes_scan=buffers[-1].closes_scan,
            azimuth_step=first.azimuth_step,
        )


class BufferAssembler:
    """
    Incremental packet-to-buffer assembly.

    Blocks are numbered across the whole stream and block b opens column b.
    Row i of block b is written to column b + shift_i of a ring of pending
    columns, so a scan boundary moves returns between neighbouring scans
    rather than losing them. A column is complete once the last block that
    feeds it has arrived; buffers of buffer_packets * 12 complete columns are
    emitted as soon as it is known whether they close their scan. Returns
    that fall before the first column or after the last column of the stream
    are dropped and counted in dropped_returns.
    """

    def __init__(self, calibration: Optional[BeamCalibration] = None, buffer_packets: int = 5, strict=False):
        if buffer_packets < 1:
            raise ValueError(f"buffer_packets must be >= 1, got {buffer_packets}")
        self.calibration = calibration or BeamCalibration.vlp32c()
        self.buffer_columns = buffer_packets * BLOCKS_PER_PACKET
        self.strict = strict

        self.scan_id = 0
        self.buffer_seq = 0
        self.packets = 0
        self.out_of_order = 0
        self.scan_boundaries = 0
        self.dropped_returns = 0
        self.layout: Optional[ColumnLayout] = None

        self._blocks = 0
        self._emitted = 0
        self._previous_azimuth = None
        # (scan_id, first block) of every scan with columns still to emit
        self._scans = deque([(0, 0)])
        self._capacity = 0
        self._ticks = self._reflectivity = self._azimuths = None

    @property
    def azimuth_step(self):
        return self.layout.step if self.layout is not None else DEFAULT_AZIMUTH_STEP

    def push(self, packet: DataPacket) -> List[PacketBuffer]:
        if self.layout is None:
            self._configure(packet.azimuths)
        first = self._blocks
        for b in range(BLOCKS_PER_PACKET):
            azimuth = int(packet.azimuths[b])
            if self._starts_new_scan(azimuth):
                self._open_scan(first + b)
            self._previous_azimuth = azimuth

        blocks = first + np.arange(BLOCKS_PER_PACKET)
        self._azimuths[blocks % self._capacity] = packet.azimuths / 100.0

        # (32, 12) in row order
        ranges = self.calibration.to_rows(packet.ranges).T
        reflectivity = self.calibration.to_rows(packet.reflectivity).T
        target = blocks[None, :] + self.layout.shifts[:, None]
        keep = target >= self._emitted
        self.dropped_returns += int(np.count_nonzero(ranges[~keep]))
        rows = np.broadcast_to(np.arange(N_BEAMS)[:, None], target.shape)[keep]
        slots = target[keep] % self._capacity
        self._ticks[rows, slots] = ranges[keep]
        self._reflectivity[rows, slots] = reflectivity[keep]

        self._blocks += BLOCKS_PER_PACKET
        self.packets += 1
        return self._drain(final=False)

    def flush(self) -> List[PacketBuffer]:
        """Emit whatever is pending as the end of the current scan"""
        if self.layout is None or self._emitted == self._blocks:
            return []
        emitted = self._drain(final=True)
        overflow = np.arange(self._blocks, self._blocks + self.layout.lead) % self._capacity
        self.dropped_returns += int(np.count_nonzero(self._ticks[:, overflow]))
        self._clear(overflow)
        self._open_scan(self._blocks)
        self._previous_azimuth = None
        return emitted

    def _configure(self, azimuths):
        steps = np.diff(azimuths.astype(np.int64)) % AZIMUTH_LIMIT
        steps = steps[(steps > 0) & (steps < WRAP_THRESHOLD)]
        step = float(np.median(steps)) / 100.0 if steps.size else DEFAULT_AZIMUTH_STEP
        self.layout = self.calibration.column_layout(step)
        # room for a buffer still filling plus every column a packet can reach
        pending = self.buffer_columns + self.layout.lag + self.layout.lead + 2 * BLOCKS_PER_PACKET
        self._capacity = 1 << int(np.ceil(np.log2(pending)))
        self._ticks = np.zeros((N_BEAMS, self._capacity), dtype=np.uint16)
        self._reflectivity = np.zeros((N_BEAMS, self._capacity), dtype=np.uint8)
        self._azimuths = np.zeros(self._capacity, dtype=np.float64)
        logger.debug("Column step %.3f deg, row shifts %d..%d", step, self.layout.shifts.min(),
                     self.layout.shifts.max())

    def _starts_new_scan(self, azimuth):
        previous = self._previous_azimuth
        if previous is None or azimuth >= previous:
            return False
        if previous - azimuth > WRAP_THRESHOLD:
            self.scan_boundaries += 1
            return True

        self.out_of_order += 1
        if self.strict:
            raise OutOfOrderPacket(previous / 100.0, azimuth / 100.0)
        logger.warning(
            "Out-of-order block in scan %d: azimuth %.2f after %.2f, starting a new scan",
            self.scan_id, azimuth / 100.0, previous / 100.0,
        )
        return True

    def _open_scan(self, first_block):
        self.scan_id += 1
        self._scans.append((self.scan_id, first_block))

    def _drain(self, final):
        complete = self._blocks if final else self._blocks - self.layout.lag
        width = self.buffer_columns
        emitted = []
        while self._emitted < complete and self._scans:
            scan_id, start = self._scans[0]
            end = self._scans[1][1] if len(self._scans) > 1 else (self._blocks if final else None)
            stop = start + ((self._emitted - start) // width + 1) * width
            if end is not None:
                stop = min(stop, end)
            if stop > complete:
                break
            if end is None and self._blocks <= stop:
                # the block after this buffer may still open a new scan
                break
            closes = stop == end
            emitted.append(self._build(scan_id, start, stop, closes))
            if closes:
                self._scans.popleft()
        return emitted

    def _build(self, scan_id, scan_start, stop, closes_scan):
        slots = np.arange(self._emitted, stop) % self._capacity
        buffer = PacketBuffer(
            scan_id=scan_id,
            buffer_seq=self.buffer_seq,
            col_offset=self._emitted - scan_start,
            azimuths=self._azimuths[slots],
            rho=self._ticks[:, slots].astype(np.float64) * RANGE_TICK,
            reflectivity=self._reflectivity[:, slots],
            calibration=self.calibration,
            closes_scan=closes_scan,
            azimuth_step=self.azimuth_step,
        )
        self._clear(slots)
        self.buffer_seq += 1
        self._emitted = stop
        return buffer

    def _clear(self, slots):
        self._ticks[:, slots] = 0
        self._reflectivity[:, slots] = 0


def assemble_buffers(packets: Iterable[DataPacket], calibration: Optional[BeamCalibration] = None,
                     buffer_packets: int = 5, strict=False) -> Iterator[PacketBuffer]:
    """Group a packet stream into PacketBuffers, opening a new scan at each 0 degree wrap"""
    assembler = BufferAssembler(calibration, buffer_packets, strict=strict)
    for packet in packets:
        yield from assembler.push(packet)
    yield from assembler.flush()
