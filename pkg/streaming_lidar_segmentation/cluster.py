"""
Obstacle clustering over a sliding window of range-image columns.

Initial clustering is connected-component labelling: each obstacle point joins
the cluster of the first earlier point in its search region whose horizontal
range differs by less than t_ccl. The search region is the lower part of the
point's own column followed by the previous 5 (near) or 10 (far) columns.

Refinement merges clusters whose azimuth spans contain, overlap or neighbour
each other when the n-th smallest mutual point distance is below t_merge.
Clusters are emitted once the sweep is far enough past them that no future
point can join or link them.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .config import SegParams
from .disjoint_set import DisjointSet

logger = logging.getLogger(__name__)

NO_MATCH = -1


class Linkage(Enum):
    CONTAIN = 'contain'
    OVERLAP = 'overlap'
    NEIGHBOUR = 'neighbour'
    NONE = 'none'


class ClusterState(Enum):
    OPEN = 'open'
    CLOSED = 'closed'


@dataclass(eq=False)
class InitialCluster:
    """
    Member points are appended in chunks and joined on first read. The bounding
    box is kept up to date on every append.
    """

    id: int
    col_start: int = 0
    col_end: int = 0
    state: ClusterState = ClusterState.OPEN
    _chunks: list = field(default_factory=list, repr=False)
    _low: Optional[np.ndarray] = field(default=None, repr=False)
    _high: Optional[np.ndarray] = field(default=None, repr=False)
    _size: int = field(default=0, repr=False)
    _tree: Optional[cKDTree] = field(default=None, repr=False)

    @classmethod
    def seed(cls, cluster_id, col, row, xyz):
        cluster = cls(id=cluster_id, col_start=col, col_end=col)
        cluster.add(col, row, xyz)
        return cluster

    def add(self, col, row, xyz):
        self.extend([col], [row], [xyz])

    def extend(self, cols, rows, xyz):
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if not cols.size:
            return
        low, high = xyz.min(axis=0), xyz.max(axis=0)
        if self._size:
            self.col_start = min(self.col_start, int(cols.min()))
            self.col_end = max(self.col_end, int(cols.max()))
            self._low = np.minimum(self._low, low)
            self._high = np.maximum(self._high, high)
        else:
            self.col_start, self.col_end = int(cols.min()), int(cols.max())
            self._low, self._high = low, high
        self._chunks.append((cols, rows, xyz))
        self._size += cols.size
        self._tree = None

    def absorb(self, other: 'InitialCluster'):
        self.extend(*other._joined())

    def _joined(self):
        if len(self._chunks) != 1:
            if not self._chunks:
                return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty((0, 3))
            self._chunks = [tuple(np.concatenate(parts) for parts in zip(*self._chunks))]
        return self._chunks[0]

    @property
    def size(self):
        return self._size

    @property
    def span(self):
        return self.col_end - self.col_start

    @property
    def col_array(self):
        return self._joined()[0]

    @property
    def cols(self):
        return self._joined()[0].tolist()

    @property
    def rows(self):
        return self._joined()[1].tolist()

    @property
    def keys(self):
        """(col, row) range-image cells of the member points"""
        cols, rows, _ = self._joined()
        return list(zip(cols.tolist(), rows.tolist()))

    def coordinates(self):
        return self._joined()[2]

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.coordinates())
        return self._tree

    @property
    def bbox(self):
        if not self._size:
            raise ValueError(f"Cluster {self.id} has no points")
        return self._low, self._high

    @property
    def centroid(self):
        return self.coordinates().mean(axis=0)


def linkage(c1: InitialCluster, c2: InitialCluster, params: SegParams, shift: int = 0) -> Linkage:
    """Span relation of two clusters; c2's columns are moved by `shift`"""
    s1, e1 = c1.col_start, c1.col_end
    s2, e2 = c2.col_start + shift, c2.col_end + shift
    if (s1 <= s2 and e2 <= e1) or (s2 <= s1 and e1 <= e2):
        return Linkage.CONTAIN
    if s1 <= e2 and s2 <= e1:
        return Linkage.OVERLAP
    gap = s2 - e1 - 1 if s2 > e1 else s1 - e2 - 1
    if gap < params.t_neighbour:
        return Linkage.NEIGHBOUR
    return Linkage.NONE


def bbox_gap(c1: InitialCluster, c2: InitialCluster) -> float:
    """Lower bound on every point distance between two clusters"""
    low1, high1 = c1.bbox
    low2, high2 = c2.bbox
    gap = np.maximum(0.0, np.maximum(low2 - high1, low1 - high2))
    return float(np.sqrt(gap @ gap))


def cluster_distance(c1: InitialCluster, c2: InitialCluster, n: int, params: SegParams, shift: int = 0) -> float:
    """
    n-th smallest Cartesian distance between the points of c1 and c2 that lie
    in each other's span widened by t_neighbour columns.

    With fewer than n pairs the largest available distance is returned, and
    infinity when there is no pair at all.
    """
    widen = params.t_neighbour
    cols1 = c1.col_array
    cols2 = c2.col_array + shift
    s2, e2 = c2.col_start + shift, c2.col_end + shift
    in1 = (cols1 >= s2 - widen) & (cols1 <= e2 + widen)
    in2 = (cols2 >= c1.col_start - widen) & (cols2 <= c1.col_end + widen)
    a = c1.coordinates()[in1]
    b = c2.coordinates()[in2]
    if len(a) == 0 or len(b) == 0:
        return float('inf')

    tree = c2.tree() if in2.all() else cKDTree(b)
    k = min(n, len(b))
    distances, _ = tree.query(a, k=k)
    distances = np.ravel(distances)
    rank = min(n, len(a) * len(b))
    return float(np.partition(distances, rank - 1)[rank - 1])


class ClusterBuffer:
    """
    Open clusters of the scan being swept, plus the recent points CCL searches.

    Single owner: only the pipeline worker touches it.
    """

    def __init__(self, params: SegParams, scan_id: int = 0):
        self.params = params
        self.scan_id = scan_id
        self.open: Dict[int, InitialCluster] = {}
        self.emitted: List[InitialCluster] = []
        self.noise: List[InitialCluster] = []
        self.last_column_seen = -1
        self.merges = 0

        self._ids = DisjointSet()
        self._next_id = 0
        # points of the last search_cols_far columns, in sweep order
        self._recent_cols = np.empty(0, dtype=np.int64)
        self._recent_rho = np.empty(0, dtype=np.float64)
        self._recent_ids = np.empty(0, dtype=np.int64)

    # initial clustering

    def ccl_step(self, col: int, row: int, rho_xy: float, xyz) -> int:
        """Assign one obstacle point to a cluster; returns the cluster id"""
        return self.add_points([col], [row], [rho_xy], [xyz])[0]

    def add_column(self, col: int, rows, rho_xy, xyz) -> List[int]:
        """Cluster the obstacle points of one column, given bottom to top"""
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        return self.add_points(np.full(rows.size, col, dtype=np.int64), rows, rho_xy, xyz)

    def add_points(self, cols, rows, rho_xy, xyz) -> List[int]:
        """
        Cluster a batch of obstacle points in sweep order: ascending column,
        then the given order within a column. The result is the same as
        visiting the points one at a time.

        Raises:
            ValueError: a point lies in a column before one already swept
        """
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        if not cols.size:
            return []
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        rho_xy = np.asarray(rho_xy, dtype=np.float64).reshape(-1)
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if int(cols.min()) < self.last_column_seen:
            raise ValueError(f"Column {int(cols.min())} arrived after column {self.last_column_seen}")
        order = np.argsort(cols, kind='stable')
        cols, rows, rho_xy, xyz = cols[order], rows[order], rho_xy[order], xyz[order]

        n_recent = self._recent_cols.size
        all_cols = np.concatenate([self._recent_cols, cols])
        all_rho = np.concatenate([self._recent_rho, rho_xy])
        target = self._ccl_targets(all_cols, all_rho, n_recent)

        # recent points only count while their cluster is still open
        recent_owner = np.array([self._open_root(i) for i in self._recent_ids.tolist()], dtype=np.int64)
        from_recent = (target >= 0) & (target < n_recent)
        closed = np.zeros(target.shape, dtype=bool)
        closed[from_recent] = recent_owner[target[from_recent]] == NO_MATCH
        target[closed] = NO_MATCH

        # every match is an earlier point, so following parents ends at a seed or a recent point
        index = n_recent + np.arange(cols.size)
        parent = np.arange(all_cols.size)
        parent[index] = np.where(target >= 0, target, index)
        while True:
            jumped = parent[parent]
            if np.array_equal(jumped, parent):
                break
            parent = jumped
        root = parent[index]

        seeds = root >= n_recent
        owner = np.empty(cols.size, dtype=np.int64)
        owner[~seeds] = recent_owner[root[~seeds]]
        seed_points = np.flatnonzero(root == index)
        seed_ids = self._next_id + np.arange(seed_points.size)
        seed_of = np.empty(all_cols.size, dtype=np.int64)
        seed_of[n_recent + seed_points] = seed_ids
        owner[seeds] = seed_of[root[seeds]]
        self._next_id += seed_points.size

        for cid in seed_ids.tolist():
            self._ids.add(cid)
            self.open[cid] = InitialCluster(id=cid)
        groups = np.argsort(owner, kind='stable')
        ids, starts = np.unique(owner[groups], return_index=True)
        for cid, members in zip(ids.tolist(), np.split(groups, starts[1:])):
            self.open[cid].extend(cols[members], rows[members], xyz[members])

        self._remember(cols, rho_xy, owner)
        result = np.empty(cols.size, dtype=np.int64)
        result[order] = owner
        return result.tolist()

    def _ccl_targets(self, all_cols, all_rho, first):
        """Index of the matched earlier point for every point from `first` on, or NO_MATCH"""
        params = self.params
        index = np.arange(first, all_cols.size)
        cols = all_cols[first:]
        rho = all_rho[first:]
        reach = np.where(rho < params.near_far_range, params.search_cols_near, params.search_cols_far)
        lowest = np.searchsorted(all_cols, cols - reach, side='left')
        width = int((index - lowest).max())
        if width == 0:
            return np.full(index.size, NO_MATCH, dtype=np.int64)

        steps = np.arange(1, width + 1)
        candidate = index[:, None] - steps[None, :]
        in_region = candidate >= lowest[:, None]
        candidate = np.where(in_region, candidate, 0)
        close = in_region & (np.abs(all_rho[candidate] - rho[:, None]) < params.t_ccl)
        # own column: most recent first; earlier columns: nearest column first, lowest point within it
        gap = cols[:, None] - all_cols[candidate]
        stride = all_cols.size + 1
        rank = np.where(gap == 0, steps[None, :], gap * stride + candidate)
        rank = np.where(close, rank, np.iinfo(np.int64).max)
        best = np.argmin(rank, axis=1)
        picked = np.arange(index.size)
        return np.where(close[picked, best], candidate[picked, best], NO_MATCH)

    def _open_root(self, cluster_id):
        root = self._ids.find(cluster_id)
        return root if root in self.open else NO_MATCH

    def _remember(self, cols, rho_xy, owner):
        last = int(cols[-1])
        self.last_column_seen = max(self.last_column_seen, last)
        keep = self._recent_cols >= last - self.params.search_cols_far
        fresh = cols >= last - self.params.search_cols_far
        self._recent_cols = np.concatenate([self._recent_cols[keep], cols[fresh]])
        self._recent_rho = np.concatenate([self._recent_rho[keep], rho_xy[fresh]])
        self._recent_ids = np.concatenate([self._recent_ids[keep], owner[fresh]])

    # refinement

    def _merge(self, c1: InitialCluster, c2: InitialCluster) -> InitialCluster:
        if (c2.span, -c2.id) > (c1.span, -c1.id):
            c1, c2 = c2, c1
        c1.absorb(c2)
        del self.open[c2.id]
        self._ids.union(c1.id, c2.id)
        self.merges += 1
        return c1

    def _candidate_pairs(self, pairs, shift=0):
        params = self.params
        found = []
        for c1, c2 in pairs:
            if linkage(c1, c2, params, shift) is Linkage.NONE:
                continue
            if bbox_gap(c1, c2) >= params.t_merge:
                continue
            distance = cluster_distance(c1, c2, params.mutual_n, params, shift)
            if distance < params.t_merge:
                found.append((distance, min(c1.id, c2.id), max(c1.id, c2.id)))
        found.sort()
        return found

    def _apply(self, candidates):
        merged = 0
        for _, i, j in candidates:
            root_i, root_j = self._ids.find(i), self._ids.find(j)
            if root_i == root_j:
                continue
            self._merge(self.open[root_i], self.open[root_j])
            merged += 1
        return merged

    def _linked_pairs(self):
        # sorted by first column, so the inner sweep can stop at the first cluster out of reach
        clusters = sorted(self.open.values(), key=lambda c: (c.col_start, c.id))
        reach = self.params.t_neighbour
        for i, c1 in enumerate(clusters):
            for c2 in clusters[i + 1:]:
                if c2.col_start > c1.col_end + reach:
                    break
                yield c1, c2

    def refine(self) -> int:
        """Merge linked close clusters until nothing changes; returns the merge count"""
        if not self.params.refine_clusters:
            return 0
        total = 0
        while True:
            merged = self._apply(self._candidate_pairs(self._linked_pairs()))
            if not merged:
                return total
            total += merged

    def _merge_seam(self, total_columns) -> int:
        """Merge clusters touching the start of the scan with those touching its end"""
        widen = self.params.t_neighbour
        clusters = [self.open[k] for k in sorted(self.open)]
        start_side = [c for c in clusters if c.col_start < widen]
        end_side = [c for c in clusters if c.col_end >= total_columns - widen]
        pairs = [(e, s) for e in end_side for s in start_side if e is not s]
        return self._apply(self._candidate_pairs(pairs, shift=total_columns))

    # emission

    def _close(self, cluster):
        cluster.state = ClusterState.CLOSED
        del self.open[cluster.id]
        if cluster.size < self.params.min_cluster_points:
            self.noise.append(cluster)
            return False
        self.emitted.append(cluster)
        return True

    def close_and_emit(self, current_column: int) -> List[InitialCluster]:
        """
        Close every cluster nothing beyond current_column can reach.

        Clusters starting within t_neighbour columns of the scan start stay open
        for the seam check at the end of the scan.
        """
        horizon = self.params.closure_horizon
        closed = []
        for cid in sorted(self.open):
            cluster = self.open[cid]
            if current_column - cluster.col_end > horizon and cluster.col_start >= self.params.t_neighbour:
                if self._close(cluster):
                    closed.append(cluster)
        return closed

    def finish_scan(self, total_columns: Optional[int] = None) -> List[InitialCluster]:
        """Final refinement, seam merge and emission of everything still open"""
        if total_columns is None:
            total_columns = self.last_column_seen + 1
        self.refine()
        if self.open:
            seam = self._merge_seam(total_columns)
            if seam:
                logger.debug("Scan %d: %d clusters merged across the seam", self.scan_id, seam)
        closed = []
        for cid in sorted(self.open):
            cluster = self.open[cid]
            if self._close(cluster):
                closed.append(cluster)
        return closed

    def reset(self, scan_id: int):
        self.__init__(self.params, scan_id)
