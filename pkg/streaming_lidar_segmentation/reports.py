"""
Output writers: cluster records, point clouds, latency and metric reports.

Figures are plain plotly objects so the views can serve them as JSON and the
commands can write them as standalone HTML.
"""

import json
import logging
import os
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np
import pandas as pd
import plotly.graph_objs as go
from plotly.colors import hex_to_rgb, qualitative
from plotly.subplots import make_subplots
from plotly.utils import PlotlyJSONEncoder

from .evaluation import METRICS, CorpusReport
from .pipeline import LatencyReport, ScanResult

logger = logging.getLogger(__name__)


GROUND_COLOUR = (128, 128, 128)
CLUSTER_PALETTE = [hex_to_rgb(c) for c in qualitative.Plotly + qualitative.D3]
NDJSON_FILE = 'clusters.ndjson'
CLUSTER_CSV_FILE = 'clusters.csv'
SCAN_CSV_FILE = 'scans.csv'


def cluster_colour(cluster_id: int):
    return CLUSTER_PALETTE[cluster_id % len(CLUSTER_PALETTE)]


def write_ndjson(results: Iterable[ScanResult], path, include_points=True) -> str:
    with open(path, 'w') as f:
        for result in results:
            f.write(result.to_ndjson(include_points))
    return path


def ply_points(result: ScanResult) -> np.ndarray:
    """x, y, z, r, g, b rows: ground first, then every cluster in its colour"""
    parts = []
    if len(result.ground_xyz):
        grey = np.tile(GROUND_COLOUR, (len(result.ground_xyz), 1))
        parts.append(np.hstack([result.ground_xyz, grey]))
    for record in result.clusters:
        colour = np.tile(cluster_colour(record.cluster_id), (record.point_count, 1))
        parts.append(np.hstack([record.xyz, colour]))
    if not parts:
        return np.empty((0, 6))
    return np.vstack(parts)


def write_ply(result: ScanResult, path) -> str:
    points = ply_points(result)
    header = '\n'.join([
        'ply',
        'format ascii 1.0',
        f'comment scan {result.scan_id}',
        f'element vertex {len(points)}',
        'property float x',
        'property float y',
        'property float z',
        'property uchar red',
        'property uchar green',
        'property uchar blue',
        'end_header',
    ])
    np.savetxt(path, points, fmt='%.4f %.4f %.4f %d %d %d', header=header, comments='')
    return path


def cluster_table(results: Iterable[ScanResult]) -> pd.DataFrame:
    rows = []
    for result in results:
        for record in result.clusters:
            low, high = record.bbox
            cx, cy, cz = record.centroid
            rows.append({
                'scan_id': record.scan_id,
                'cluster_id': record.cluster_id,
                'point_count': record.point_count,
                'col_start': record.col_start,
                'col_end': record.col_end,
                'centroid_x': cx, 'centroid_y': cy, 'centroid_z': cz,
                'min_x': low[0], 'min_y': low[1], 'min_z': low[2],
                'max_x': high[0], 'max_y': high[1], 'max_z': high[2],
            })
    columns = ['scan_id', 'cluster_id', 'point_count', 'col_start', 'col_end',
               'centroid_x', 'centroid_y', 'centroid_z', 'min_x', 'min_y', 'min_z', 'max_x', 'max_y', 'max_z']
    return pd.DataFrame(rows, columns=columns)


def scan_table(results: Iterable[ScanResult]) -> pd.DataFrame:
    rows = [r.summary() for r in results]
    return pd.DataFrame(rows, columns=['scan_id', 'columns', 'clusters', 'ground_points', 'obstacle_points',
                                       'noise_points', 'invalid_points'])


def write_scan_outputs(results: List[ScanResult], output_dir, formats) -> List[str]:
    """Write the requested formats for a run; returns the files written"""
    os.makedirs(output_dir, exist_ok=True)
    written = []
    if 'ndjson' in formats:
        written.append(write_ndjson(results, os.path.join(output_dir, NDJSON_FILE)))
    if 'ply' in formats:
        for result in results:
            written.append(write_ply(result, os.path.join(output_dir, f'scan_{result.scan_id:05d}.ply')))
    if 'csv' in formats:
        path = os.path.join(output_dir, CLUSTER_CSV_FILE)
        cluster_table(results).to_csv(path, index=False, float_format='%.6f')
        written.append(path)
        path = os.path.join(output_dir, SCAN_CSV_FILE)
        scan_table(results).to_csv(path, index=False)
        written.append(path)
    logger.info("Wrote %d output files to %s", len(written), output_dir)
    return written


# latency

def latency_summary_figure(summary: pd.DataFrame, reference: Optional[pd.DataFrame] = None) -> go.Figure:
    """Per-stage mean/p99 bars, with the published per-scan means when given"""
    cols = 2 if reference is not None else 1
    titles = ['Measured (us)'] + (['Per scan vs reference (us)'] if reference is not None else [])
    fig = make_subplots(rows=1, cols=cols, subplot_titles=titles)
    for stat in ('mean', 'p99'):
        fig.add_trace(go.Bar(x=summary['quantity'], y=summary[stat], name=stat), row=1, col=1)
    if reference is not None:
        fig.add_trace(go.Bar(x=reference['stage'], y=reference['reference_us'], name='reference'), row=1, col=2)
        fig.add_trace(go.Bar(x=reference['stage'], y=reference['measured_us'], name='measured'), row=1, col=2)
    fig.update_layout(title='Processing latency', barmode='group', height=450, template='plotly_white')
    return fig


def latency_figure(report: LatencyReport) -> go.Figure:
    fig = make_subplots(rows=2, cols=1, subplot_titles=['Per buffer CPU time (us)', 'Per scan CPU time (us)'])
    for stage in ('ground_cpu_us', 'cluster_cpu_us', 'total_cpu_us'):
        fig.add_trace(go.Histogram(x=report.buffers[stage], name=f'buffer {stage[:-7]}', opacity=0.6), row=1, col=1)
        fig.add_trace(go.Histogram(x=report.scans[stage], name=f'scan {stage[:-7]}', opacity=0.6), row=2, col=1)
    fig.update_layout(title=f'Latency over {report.repetitions} repetitions', barmode='overlay', height=700,
                      template='plotly_white')
    return fig


def write_latency_report(report: LatencyReport, output_dir) -> List[str]:
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        'buffers': os.path.join(output_dir, 'latency_buffers.csv'),
        'scans': os.path.join(output_dir, 'latency_scans.csv'),
        'summary': os.path.join(output_dir, 'latency_summary.csv'),
        'text': os.path.join(output_dir, 'latency_summary.txt'),
        'html': os.path.join(output_dir, 'latency.html'),
    }
    report.buffers.to_csv(paths['buffers'], index=False, float_format='%.3f')
    report.scans.to_csv(paths['scans'], index=False, float_format='%.3f')
    report.summary().to_csv(paths['summary'], index=False, float_format='%.3f')
    with open(paths['text'], 'w') as f:
        f.write(report.to_text())
    if report.is_empty:
        del paths['html']
    else:
        latency_figure(report).write_html(paths['html'], include_plotlyjs='cdn')
    return list(paths.values())


# metrics

def metrics_figure(rows: List[Dict]) -> go.Figure:
    """Grouped bars of the six ratios per scene; n/a values are left out"""
    fig = go.Figure()
    scenes = [r['scene'] for r in rows]
    for name in METRICS:
        values = [r.get(name) for r in rows]
        fig.add_trace(go.Bar(x=scenes, y=[np.nan if v is None else v for v in values], name=name.upper()))
    fig.update_layout(title='Segmentation metrics', barmode='group', yaxis=dict(range=[0, 1.05]),
                      height=450, template='plotly_white')
    return fig


def metric_rows(report: CorpusReport) -> List[Dict]:
    table = report.table().astype(object)
    return table.where(pd.notna(table), None).to_dict('records')


def write_metrics_report(report: CorpusReport, output_dir, gates: Optional[Mapping[str, float]] = None) -> List[str]:
    os.makedirs(output_dir, exist_ok=True)
    csv_path = os.path.join(output_dir, 'metrics.csv')
    json_path = os.path.join(output_dir, 'metrics.json')
    text_path = os.path.join(output_dir, 'metrics.txt')
    report.to_csv(csv_path)
    with open(json_path, 'w') as f:
        f.write(report.to_json(gates))
    with open(text_path, 'w') as f:
        f.write(report.to_text())
    written = [csv_path, json_path, text_path]
    if not report.is_empty:
        html_path = os.path.join(output_dir, 'metrics.html')
        metrics_figure(metric_rows(report)).write_html(html_path, include_plotlyjs='cdn')
        written.append(html_path)
    return written


def figure_json(fig: go.Figure) -> Dict:
    return json.loads(json.dumps(fig, cls=PlotlyJSONEncoder))
