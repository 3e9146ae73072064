"""
Segmentation accuracy against synthetic ground truth.

Matching is by point overlap on range-image cells (col, row). For a truth
object T and a prediction P, coverage = |P & T| / |T| and purity = |P & T| / |P|.
Each truth object is, in this order of precedence:

    under-segmented  some P covers >= theta of T and >= theta of another truth
    true positive    exactly one P covers >= theta of T, and its purity is >= theta
    over-segmented   two or more P have purity >= theta with T
    false negative   otherwise

A prediction that reaches theta (coverage or purity) with no truth object is a
false positive.
"""

import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .config import SegParams
from .exceptions import IndexMismatch
from .pipeline import run_stream
from .synth import LabeledScan, SceneSpec, raycast_scan

logger = logging.getLogger(__name__)


DEFAULT_OVERLAP = 0.5
DEFAULT_RANGE_GATE = 30.0
MIN_TRUTH_POINTS = 3
METRICS = ('precision', 'recall', 'tpr', 'fnr', 'osr', 'usr')
CEILING_METRICS = ('fnr',)


@dataclass(frozen=True)
class MatchOutcome:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    over_segmented: int = 0
    under_segmented: int = 0
    all_objects: int = 0
    predictions: int = 0

    def __add__(self, other):
        return MatchOutcome(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))


@dataclass(frozen=True)
class SegMetrics:
    """Ratios in [0, 1]; None when there is no truth object to judge by"""

    precision: Optional[float]
    recall: Optional[float]
    tpr: Optional[float]
    fnr: Optional[float]
    osr: Optional[float]
    usr: Optional[float]

    @classmethod
    def from_outcome(cls, outcome: MatchOutcome):
        if outcome.all_objects == 0:
            return cls(None, None, None, None, None, None)
        n = outcome.all_objects
        tp = outcome.tp
        return cls(
            precision=_ratio(outcome.predictions - outcome.fp, outcome.predictions),
            recall=(n - outcome.fn) / n,
            tpr=tp / n,
            fnr=outcome.fn / n,
            osr=_ratio(tp, tp + outcome.over_segmented),
            usr=_ratio(tp, tp + outcome.under_segmented),
        )

    def as_dict(self):
        return asdict(self)

    def formatted(self):
        return {k: ('n/a' if v is None else f"{v:.3f}") for k, v in self.as_dict().items()}


def _ratio(numerator, denominator):
    # no evidence of failure counts as a perfect rate
    return numerator / denominator if denominator else 1.0


def match(predicted: Mapping[Hashable, Iterable], truth: Mapping[Hashable, Iterable],
          overlap_threshold: float = DEFAULT_OVERLAP, universe: Optional[Iterable] = None,
          ignored: Optional[Mapping[Hashable, Iterable]] = None) -> MatchOutcome:
    """
    Classify truth objects and predictions by point overlap.

    predicted and truth map ids to collections of point keys. Predictions
    mostly made of `ignored` objects (e.g. too small to count) are left out.

    Raises:
        IndexMismatch: a key lies outside `universe`
    """
    theta = overlap_threshold
    predicted = {pid: set(keys) for pid, keys in predicted.items()}
    truth = {tid: set(keys) for tid, keys in truth.items() if keys}
    ignored = {tid: set(keys) for tid, keys in (ignored or {}).items()}

    if universe is not None:
        universe = set(universe)
        for label, groups in (('prediction', predicted), ('truth object', truth)):
            for gid, keys in groups.items():
                stray = keys - universe
                if stray:
                    raise IndexMismatch(f"{label} {gid} has {len(stray)} points outside the scan")

    owner = {}
    for tid, keys in truth.items():
        for key in keys:
            owner[key] = tid
    ignored_owner = {key: tid for tid, keys in ignored.items() for key in keys}

    overlaps: Dict[Hashable, Dict[Hashable, int]] = {}
    kept = {}
    for pid, keys in predicted.items():
        if not keys:
            continue
        counts: Dict[Hashable, int] = {}
        for key in keys:
            if key in owner:
                counts[owner[key]] = counts.get(owner[key], 0) + 1
        ignored_counts: Dict[Hashable, int] = {}
        for key in keys:
            if key in ignored_owner:
                ignored_counts[ignored_owner[key]] = ignored_counts.get(ignored_owner[key], 0) + 1
        if ignored_counts and max(ignored_counts.values()) / len(keys) >= theta:
            continue
        overlaps[pid] = counts
        kept[pid] = keys

    def coverage(pid, tid):
        return overlaps[pid].get(tid, 0) / len(truth[tid])

    def purity(pid, tid):
        return overlaps[pid].get(tid, 0) / len(kept[pid])

    tp = fn = over = under = 0
    for tid in truth:
        covering = [pid for pid in kept if coverage(pid, tid) >= theta]
        straddling = any(
            coverage(pid, other) >= theta
            for pid in covering for other in overlaps[pid] if other != tid
        )
        if straddling:
            under += 1
        elif len(covering) == 1 and purity(covering[0], tid) >= theta:
            tp += 1
        elif sum(1 for pid in kept if purity(pid, tid) >= theta) >= 2:
            over += 1
        else:
            fn += 1

    fp = 0
    for pid, counts in overlaps.items():
        if not any(coverage(pid, tid) >= theta or purity(pid, tid) >= theta for tid in counts):
            fp += 1

    return MatchOutcome(tp=tp, fp=fp, fn=fn, over_segmented=over, under_segmented=under,
                        all_objects=len(truth), predictions=len(kept))


def oracle_cluster(points, epsilon: float, chunk: int = 256) -> np.ndarray:
    """
    Single-linkage components under Euclidean distance <= epsilon, by brute
    force over all pairs. Components are numbered by their first point.

    Each chunk of rows is reduced to its own components before the next one,
    so memory stays at chunk x n distances however many pairs are linked.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    limit = epsilon * epsilon
    everyone = np.arange(n)
    heads, tails = [], []
    for start in range(0, n, chunk):
        block = points[start:start + chunk]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        rows, cols = np.nonzero(d2 <= limit)
        linked = coo_matrix((np.ones(len(rows), dtype=np.int8), (rows + start, cols)), shape=(n, n))
        count, labels = connected_components(linked, directed=False)
        # a star per component keeps its connectivity in n edges
        first = np.full(count, n)
        np.minimum.at(first, labels, everyone)
        heads.append(everyone)
        tails.append(first[labels])

    heads, tails = np.concatenate(heads), np.concatenate(tails)
    forest = coo_matrix((np.ones(len(heads), dtype=np.int8), (heads, tails)), shape=(n, n))
    _, labels = connected_components(forest, directed=False)
    _, first_seen, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first_seen), dtype=np.int64)
    rank[np.argsort(first_seen)] = np.arange(len(first_seen))
    return rank[inverse]


def oracle_partition(keys: Sequence, points, epsilon: float):
    """Oracle components as a set of frozensets of point keys"""
    labels = oracle_cluster(points, epsilon)
    groups: Dict[int, list] = {}
    for key, label in zip(keys, labels):
        groups.setdefault(int(label), []).append(key)
    return {frozenset(g) for g in groups.values()}


@dataclass
class ScanEvaluation:
    scene: str
    outcome: MatchOutcome
    metrics: SegMetrics
    clusters: int
    ground_points: int

    def row(self):
        row = {'scene': self.scene}
        row.update(asdict(self.outcome))
        row.update(self.metrics.as_dict())
        row['clusters'] = self.clusters
        row['ground_points'] = self.ground_points
        return row


def _truth_sets(scan: LabeledScan, range_gate):
    x, y, _, _ = scan.cartesian()
    kept, ignored = {}, {}
    for oid, keys in scan.object_keys().items():
        cols = np.array([k[0] for k in keys])
        rows = np.array([k[1] for k in keys])
        distance = np.hypot(x[rows, cols].mean(), y[rows, cols].mean())
        if len(keys) < MIN_TRUTH_POINTS or (range_gate is not None and distance > range_gate):
            ignored[oid] = keys
        else:
            kept[oid] = keys
    return kept, ignored


def evaluate_scan(scene, params: Optional[SegParams] = None, overlap_threshold: float = DEFAULT_OVERLAP,
                  range_gate: Optional[float] = DEFAULT_RANGE_GATE) -> ScanEvaluation:
    """Raycast (if given a SceneSpec), segment and match one scan"""
    params = params or SegParams()
    scan = raycast_scan(scene) if isinstance(scene, SceneSpec) else scene
    results = run_stream(scan.to_buffers(params.buffer_packets), params)
    clusters = results[0].clusters if results else []

    predicted = {}
    for record in clusters:
        cx, cy, _ = record.centroid
        if range_gate is None or np.hypot(cx, cy) <= range_gate:
            predicted[record.cluster_id] = record.keys

    truth, ignored = _truth_sets(scan, range_gate)
    rows, cols = np.nonzero(scan.rho > 0)
    universe = set(zip(cols.tolist(), rows.tolist()))
    outcome = match(predicted, truth, overlap_threshold, universe=universe, ignored=ignored)
    return ScanEvaluation(
        scene=scan.name,
        outcome=outcome,
        metrics=SegMetrics.from_outcome(outcome),
        clusters=len(clusters),
        ground_points=results[0].ground_points if results else 0,
    )


@dataclass
class CorpusReport:
    scans: List[ScanEvaluation]
    overlap_threshold: float = DEFAULT_OVERLAP
    range_gate: Optional[float] = DEFAULT_RANGE_GATE

    @property
    def is_empty(self):
        return not self.scans

    @property
    def outcome(self) -> MatchOutcome:
        total = MatchOutcome()
        for s in self.scans:
            total = total + s.outcome
        return total

    @property
    def metrics(self) -> SegMetrics:
        return SegMetrics.from_outcome(self.outcome)

    def table(self) -> pd.DataFrame:
        columns = ['scene', *asdict(MatchOutcome()).keys(), *METRICS, 'clusters', 'ground_points']
        rows = [s.row() for s in self.scans]
        if rows:
            total = {'scene': 'ALL'}
            total.update(asdict(self.outcome))
            total.update(self.metrics.as_dict())
            total['clusters'] = sum(s.clusters for s in self.scans)
            total['ground_points'] = sum(s.ground_points for s in self.scans)
            rows.append(total)
        return pd.DataFrame(rows, columns=columns)

    def to_csv(self, path):
        self.table().to_csv(path, index=False, na_rep='n/a', float_format='%.4f')

    def check_gates(self, gates: Mapping[str, Optional[float]]) -> List[str]:
        """Messages for every metric past its limit; n/a metrics never fail"""
        failures = []
        metrics = self.metrics.as_dict()
        for name, limit in gates.items():
            if limit is None:
                continue
            value = metrics[name]
            if value is None:
                continue
            if name in CEILING_METRICS:
                if value > limit:
                    failures.append(f"{name} {value:.3f} is above the allowed {limit:.3f}")
            elif value < limit:
                failures.append(f"{name} {value:.3f} is below the required {limit:.3f}")
        return failures

    def summary(self, gates: Optional[Mapping[str, Optional[float]]] = None):
        gates = {k: v for k, v in (gates or {}).items() if v is not None}
        failures = self.check_gates(gates)
        return {
            'scenes': len(self.scans),
            'overlap_threshold': self.overlap_threshold,
            'range_gate': self.range_gate,
            'outcome': asdict(self.outcome),
            'metrics': self.metrics.as_dict(),
            'gates': gates,
            'failures': failures,
            'passed': not failures,
        }

    def to_json(self, gates=None):
        return json.dumps(self.summary(gates), indent=2, sort_keys=True)

    def to_text(self):
        if self.is_empty:
            return "Empty corpus, nothing evaluated.\n"
        table = self.table()
        for name in METRICS:
            table[name] = table[name].map(lambda v: 'n/a' if v is None or pd.isna(v) else f"{v:.3f}")
        return table.to_string(index=False) + '\n'


def evaluate_corpus(scenes: Iterable, params: Optional[SegParams] = None,
                    overlap_threshold: float = DEFAULT_OVERLAP,
                    range_gate: Optional[float] = DEFAULT_RANGE_GATE) -> CorpusReport:
    evaluations = []
    for scene in scenes:
        evaluation = evaluate_scan(scene, params, overlap_threshold, range_gate)
        logger.info("Evaluated %s: %s", evaluation.scene, evaluation.metrics.formatted())
        evaluations.append(evaluation)
    return CorpusReport(evaluations, overlap_threshold, range_gate)
