"""
Ground segmentation for one packet buffer.

Coarse step: every column is swept bottom to top starting from a virtual
ground point beneath the sensor. A point whose slope to the next valid point
above it exceeds t_alpha is a change point; the points above a change point are
change-follow while they stay within t_delta_rho of the previous point and
uncertain after that.

Fine step: the Ground and Uncertain points of each block of `block_size`
columns are projected into the (rho_xy, z) plane and split into line segments
by sequential least squares. A point is ground when it lies within t_p2line of
its segment; change points are always obstacles.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import SegParams
from .exceptions import DegenerateBlock
from .geometry import GroundLabel, SphericalPoint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LineSegment:
    """z = a * rho_xy + b, valid on [rho_start, rho_end]"""

    a: float
    b: float
    rho_start: float
    rho_end: float
    inlier_count: int

    def z_at(self, rho_xy):
        return self.a * rho_xy + self.b

    def vertical_distance(self, rho_xy, z):
        return np.abs(z - self.z_at(rho_xy))

    def contains(self, rho_xy):
        return self.rho_start <= rho_xy <= self.rho_end

    def is_plausible(self, params: SegParams):
        slope_low, slope_high = params.line_slope_range
        intercept_low, intercept_high = params.line_intercept_range
        return slope_low <= self.a <= slope_high and intercept_low <= self.b <= intercept_high


def is_change_point(p: SphericalPoint, p_next: SphericalPoint, params: SegParams) -> bool:
    return bool(_is_change(p.rho_xy, p.z, p_next.rho_xy, p_next.z, params))


def _is_change(rho, z, rho_next, z_next, params):
    d_rho = np.asarray(rho_next - rho, dtype=np.float64)
    steep = np.abs(d_rho) < params.vertical_epsilon
    with np.errstate(divide='ignore', invalid='ignore'):
        slope = np.abs((z_next - z) / d_rho)
    return steep | (~steep & (slope > params.t_alpha))


def coarse_grid(rho_xy: np.ndarray, z: np.ndarray, valid: np.ndarray, params: SegParams) -> np.ndarray:
    """
    Coarse labels of an (N, M) grid, every column swept bottom to top.

    The sweep's state only changes at change points, so each label follows
    from two running counts: change points below the point, and points more
    than t_delta_rho from their predecessor since the last change point.
    """
    n_rows = rho_xy.shape[0]
    row = np.broadcast_to(np.arange(n_rows)[:, None], rho_xy.shape)

    # next valid row above and previous valid row below each row
    at_or_above = np.minimum.accumulate(np.where(valid, row, n_rows)[::-1], axis=0)[::-1]
    above = np.vstack([at_or_above[1:], np.full((1, rho_xy.shape[1]), n_rows)])
    at_or_below = np.maximum.accumulate(np.where(valid, row, -1), axis=0)
    below = np.vstack([np.full((1, rho_xy.shape[1]), -1), at_or_below[:-1]])

    has_next = above < n_rows
    nxt = np.minimum(above, n_rows - 1)
    change = valid & has_next & _is_change(
        rho_xy, z, np.take_along_axis(rho_xy, nxt, axis=0), np.take_along_axis(z, nxt, axis=0), params,
    )

    prev_rho = np.take_along_axis(rho_xy, np.maximum(below, 0), axis=0)
    far = valid & ~change & (below >= 0) & (np.abs(rho_xy - prev_rho) >= params.t_delta_rho)
    far_count = np.cumsum(far, axis=0)
    last_change = np.maximum.accumulate(np.where(change, row, -1), axis=0)
    far_since_change = far_count - np.take_along_axis(far_count, np.maximum(last_change, 0), axis=0)

    labels = np.full(rho_xy.shape, GroundLabel.INVALID, dtype=np.int8)
    settled = valid & ~change
    labels[settled & (last_change < 0)] = GroundLabel.GROUND
    labels[settled & (last_change >= 0) & (far_since_change == 0)] = GroundLabel.CHANGE_FOLLOW
    labels[settled & (last_change >= 0) & (far_since_change > 0)] = GroundLabel.UNCERTAIN
    labels[change] = GroundLabel.CHANGE
    return labels


def coarse_labels(rho_xy: np.ndarray, z: np.ndarray, valid: np.ndarray, params: SegParams) -> np.ndarray:
    """Coarse labels of one column given bottom-to-top arrays"""
    rho_xy = np.asarray(rho_xy, dtype=np.float64)[:, None]
    z = np.asarray(z, dtype=np.float64)[:, None]
    valid = np.asarray(valid, dtype=bool)[:, None]
    return coarse_grid(rho_xy, z, valid, params)[:, 0]


def coarse_segment_column(column: Sequence[SphericalPoint], params: SegParams) -> List[GroundLabel]:
    """Label a column of points in place and return the labels"""
    rho_xy = np.array([p.rho_xy for p in column])
    z = np.array([p.z for p in column])
    valid = np.array([p.is_valid for p in column], dtype=bool)
    labels = coarse_labels(rho_xy, z, valid, params)
    for point, label in zip(column, labels):
        point.label = GroundLabel(int(label))
    return [p.label for p in column]


SEGMENT_WINDOW = 32


def _fit(n, sx, sy, sxx, sxy):
    """Least-squares slope and intercept from sums; NaN where fewer than two distinct x"""
    n = np.asarray(n, dtype=np.float64)
    det = n * sxx - sx * sx
    usable = (n >= 2) & (det > 1e-12 * np.maximum(1.0, n * sxx))
    with np.errstate(divide='ignore', invalid='ignore'):
        a = np.where(usable, (n * sxy - sx * sy) / det, np.nan)
        b = np.where(usable, (sy - a * sx) / n, np.nan)
    return a, b


def _segment_end(x, y, start, params: SegParams):
    """
    Index one past the last point the segment starting at `start` takes.

    A point is tried against the points already taken: while they span less
    than line_min_span (or fit no line) the residual is measured from their
    mean height, less the steepest admissible slope times the horizontal
    offset, otherwise from their least-squares line.
    """
    max_slope = max(abs(s) for s in params.line_slope_range)
    total = x.size
    width = SEGMENT_WINDOW
    while True:
        stop = min(start + width, total)
        # shifted to the segment's first point for conditioning
        xs = x[start:stop] - x[start]
        ys = y[start:stop] - y[start]
        taken = np.arange(1, xs.size)
        sx = np.cumsum(xs)[:-1]
        sy = np.cumsum(ys)[:-1]
        a, b = _fit(taken, sx, sy, np.cumsum(xs * xs)[:-1], np.cumsum(xs * ys)[:-1])
        line = (xs[:-1] >= params.line_min_span) & np.isfinite(a)
        tried_x, tried_y = xs[1:], ys[1:]
        with np.errstate(invalid='ignore'):
            line_residual = np.abs(tried_y - (a * tried_x + b))
        mean_residual = np.maximum(0.0, np.abs(tried_y - sy / taken) - max_slope * np.abs(tried_x - sx / taken))
        residual = np.where(line, line_residual, mean_residual)
        breaks = np.flatnonzero(residual > params.t_p2line)
        if breaks.size:
            return start + 1 + int(breaks[0])
        if stop == total:
            return total
        width *= 2


def _segment(x, y) -> Optional[LineSegment]:
    if x.size < 2 or not x[0] < x[-1]:
        return None
    xs, ys = x - x[0], y - y[0]
    a, b = _fit(xs.size, xs.sum(), ys.sum(), (xs * xs).sum(), (xs * ys).sum())
    if not np.isfinite(a):
        return None
    # back from the shifted frame
    intercept = b + y[0] - a * x[0]
    return LineSegment(a=float(a), b=float(intercept), rho_start=float(x[0]), rho_end=float(x[-1]),
                       inlier_count=int(x.size))


def fit_line_segments(rho_xy: np.ndarray, z: np.ndarray, params: SegParams, block=None) -> List[LineSegment]:
    """
    Split the candidate points of one block into line segments.

    Points are visited in ascending rho_xy. A segment is closed when the next
    point's residual exceeds t_p2line. Segments with fewer than two points or
    implausible slope / intercept are discarded.

    Raises:
        DegenerateBlock: fewer than two candidate points
    """
    rho_xy = np.asarray(rho_xy, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if rho_xy.size < 2:
        raise DegenerateBlock(block, int(rho_xy.size))

    order = np.lexsort((z, rho_xy))
    x, y = rho_xy[order], z[order]
    segments = []
    start = 0
    while start < x.size:
        stop = _segment_end(x, y, start, params)
        segment = _segment(x[start:stop], y[start:stop])
        if segment is not None:
            if segment.is_plausible(params):
                segments.append(segment)
            else:
                logger.debug("Block %s: rejected segment a=%.3f b=%.3f", block, segment.a, segment.b)
        start = stop
    return segments


def _nearest_segment_index(rho_xy: np.ndarray, segments: Sequence[LineSegment]) -> np.ndarray:
    starts = np.array([s.rho_start for s in segments])
    ends = np.array([s.rho_end for s in segments])
    rho = rho_xy[:, None]
    inside = (rho >= starts) & (rho <= ends)
    endpoint_gap = np.minimum(np.abs(rho - starts), np.abs(rho - ends))
    nearest = np.argmin(endpoint_gap, axis=1)
    return np.where(inside.any(axis=1), np.argmax(inside, axis=1), nearest)


def fine_labels(labels: np.ndarray, rho_xy: np.ndarray, z: np.ndarray,
                segments: Sequence[LineSegment], params: SegParams) -> np.ndarray:
    """Resolve coarse labels of valid points to Ground or Obstacle"""
    labels = np.asarray(labels)
    shape = labels.shape
    labels = labels.ravel()
    rho_xy = np.asarray(rho_xy, dtype=np.float64).ravel()
    z = np.asarray(z, dtype=np.float64).ravel()
    result = labels.copy()
    valid = labels != GroundLabel.INVALID
    change = labels == GroundLabel.CHANGE

    if segments:
        pick = _nearest_segment_index(rho_xy, segments)
        a = np.array([s.a for s in segments])[pick]
        b = np.array([s.b for s in segments])[pick]
        off_line = np.abs(z - (a * rho_xy + b)) > params.t_p2line
        obstacle = change | off_line
    else:
        obstacle = labels != GroundLabel.GROUND

    result[valid & obstacle] = GroundLabel.OBSTACLE
    result[valid & ~obstacle] = GroundLabel.GROUND
    return result.reshape(shape)


def fine_segment(points: Sequence[SphericalPoint], segments: Sequence[LineSegment], params: SegParams):
    """Final Ground/Obstacle labels for coarse-labelled points, written in place"""
    labels = np.array([int(p.label) for p in points], dtype=np.int8)
    rho_xy = np.array([p.rho_xy for p in points])
    z = np.array([p.z for p in points])
    final = fine_labels(labels, rho_xy, z, segments, params)
    for point, label in zip(points, final):
        point.label = GroundLabel(int(label))
    return [p.label for p in points]


@dataclass
class GroundResult:
    labels: np.ndarray
    segments: Dict[int, List[LineSegment]] = field(default_factory=dict)
    degenerate_blocks: int = 0

    @property
    def ground_count(self):
        return int(np.count_nonzero(self.labels == GroundLabel.GROUND))

    @property
    def obstacle_count(self):
        return int(np.count_nonzero(self.labels == GroundLabel.OBSTACLE))


def segment_buffer(buffer, params: SegParams) -> GroundResult:
    """Coarse then fine ground segmentation of one PacketBuffer"""
    x, y, z, rho_xy = buffer.cartesian
    valid = buffer.valid
    labels = coarse_grid(rho_xy, z, valid, params)

    result = GroundResult(labels=labels)
    block_of_column = buffer.columns // params.block_size
    candidate_mask = (labels == GroundLabel.GROUND) | (labels == GroundLabel.UNCERTAIN)
    for block in np.unique(block_of_column):
        cols = block_of_column == block
        block_labels = labels[:, cols]
        block_rho = rho_xy[:, cols]
        block_z = z[:, cols]
        candidates = candidate_mask[:, cols]
        try:
            segments = fit_line_segments(block_rho[candidates], block_z[candidates], params, block=int(block))
        except DegenerateBlock as e:
            logger.debug("Scan %d: %s", buffer.scan_id, e)
            result.degenerate_blocks += 1
            segments = []
        result.segments[int(block)] = segments
        labels[:, cols] = fine_labels(block_labels, block_rho, block_z, segments, params)
    return result
