"""
Configuration records for the segmentation engine.

SegParams carries every threshold of the ground segmentation and clustering
stages. Its defaults are the published parameter settings; Django settings and
command-line overrides are layered on top. RunConfig describes one operator
run and round-trips through a JSON text file.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Mapping, Optional, Tuple

from .exceptions import ConfigError
from .packet import BLOCKS_PER_PACKET


DEFAULT_MOUNT_HEIGHT = 1.8


@dataclass(frozen=True)
class SegParams:
    """Every threshold used by ground segmentation and clustering"""

    # coarse ground segmentation
    t_alpha: float = 0.5
    t_delta_rho: float = 2.0
    virtual_point_z: float = -DEFAULT_MOUNT_HEIGHT
    vertical_epsilon: float = 1e-6

    # fine ground segmentation
    block_size: int = 20
    t_p2line: float = 0.2
    line_slope_range: Tuple[float, float] = (-0.2, 0.2)
    line_intercept_range: Optional[Tuple[float, float]] = None
    line_min_span: float = 0.5

    # initial clustering
    t_ccl: float = 1.0
    search_cols_near: int = 5
    search_cols_far: int = 10
    near_far_range: float = 20.0

    # refinement
    t_neighbour: int = 5
    mutual_n: int = 3
    t_merge: float = 0.8
    refine_clusters: bool = True
    min_cluster_points: int = 3

    # streaming
    buffer_packets: int = 5

    def __post_init__(self):
        object.__setattr__(self, 'line_slope_range', _as_range(self.line_slope_range))
        if self.line_intercept_range is None:
            intercepts = (self.virtual_point_z - 0.5, self.virtual_point_z + 0.5)
        else:
            intercepts = _as_range(self.line_intercept_range)
        object.__setattr__(self, 'line_intercept_range', intercepts)
        self.validate()

    def validate(self):
        positive = ['t_alpha', 't_delta_rho', 't_p2line', 't_ccl', 't_merge',
                    'near_far_range', 'line_min_span', 'vertical_epsilon']
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive, got {getattr(self, name)}")

        counts = ['block_size', 'search_cols_near', 'search_cols_far', 't_neighbour',
                  'mutual_n', 'min_cluster_points', 'buffer_packets']
        for name in counts:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")

        if self.search_cols_far < self.search_cols_near:
            raise ConfigError(
                f"search_cols_far ({self.search_cols_far}) must not be smaller than "
                f"search_cols_near ({self.search_cols_near})"
            )
        for name in ('line_slope_range', 'line_intercept_range'):
            low, high = getattr(self, name)
            if not low < high:
                raise ConfigError(f"{name} must be an increasing interval, got {(low, high)}")
        columns = self.buffer_packets * BLOCKS_PER_PACKET
        if columns % self.block_size:
            raise ConfigError(
                f"A buffer of {self.buffer_packets} packets holds {columns} columns, "
                f"not a whole number of {self.block_size}-column blocks"
            )

    @property
    def closure_horizon(self):
        """Columns a cluster must trail the sweep before nothing can join it"""
        return max(self.search_cols_far, self.t_neighbour)

    def search_columns(self, rho_xy):
        """Width of the CCL search region for a point at horizontal range rho_xy"""
        if rho_xy < self.near_far_range:
            return self.search_cols_near
        return self.search_cols_far

    def to_dict(self):
        data = asdict(self)
        data['line_slope_range'] = list(self.line_slope_range)
        data['line_intercept_range'] = list(self.line_intercept_range)
        return data

    @classmethod
    def from_dict(cls, data: Mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown segmentation parameters: {', '.join(sorted(unknown))}")
        return cls(**dict(data))

    @classmethod
    def from_settings(cls):
        """Defaults overlaid with the SEGMENTATION dict of the Django settings"""
        from django.conf import settings

        return cls.from_dict(getattr(settings, 'SEGMENTATION', {}))

    def with_overrides(self, overrides: Mapping[str, object]):
        """Return a copy with `key=value` overrides applied, coercing strings"""
        if not overrides:
            return self
        types = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in overrides.items():
            if key not in types:
                raise ConfigError(f"Unknown segmentation parameter: {key}")
            changes[key] = _coerce(key, raw, getattr(self, key))
        # the intercept window follows the virtual point unless given explicitly
        if 'virtual_point_z' in changes and 'line_intercept_range' not in changes:
            changes['line_intercept_range'] = None
        try:
            return replace(self, **changes)
        except TypeError as e:
            raise ConfigError(str(e))


def _as_range(value):
    try:
        low, high = value
        return (float(low), float(high))
    except (TypeError, ValueError):
        raise ConfigError(f"Expected a (low, high) pair, got {value!r}")


def _coerce(key, raw, current):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(current, bool):
            if text.lower() in ('1', 'true', 'yes', 'on'):
                return True
            if text.lower() in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            low, high = text.split(',')
            return (float(low), float(high))
    except ValueError:
        raise ConfigError(f"Invalid value for {key}: {raw!r}")
    return text


def parse_overrides(items):
    """Turn ['t_merge=0.5', ...] into a dict"""
    overrides = {}
    for item in items or []:
        if '=' not in item:
            raise ConfigError(f"Parameter override must look like key=value, got {item!r}")
        key, value = item.split('=', 1)
        overrides[key.strip()] = value
    return overrides


INPUT_KINDS = ('pcap', 'udp', 'raw', 'scene')
MODES = ('stream', 'batch', 'bench', 'eval', 'synth')
OUTPUT_FORMATS = ('ndjson', 'ply', 'csv')


@dataclass(frozen=True)
class RunConfig:
    """One operator run: where packets come from, how to process, where to write"""

    input_kind: str
    input_location: str
    params: SegParams = field(default_factory=SegParams)
    output_dir: str = 'out'
    formats: Tuple[str, ...] = ('ndjson',)
    mode: str = 'stream'
    port: int = 2368
    calibration: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'formats', tuple(self.formats))
        if self.input_kind not in INPUT_KINDS:
            raise ConfigError(f"Input must be one of {', '.join(INPUT_KINDS)}, got {self.input_kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"Mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        bad = [f for f in self.formats if f not in OUTPUT_FORMATS]
        if bad:
            raise ConfigError(f"Unknown output formats: {', '.join(bad)}")
        if not 0 < int(self.port) < 65536:
            raise ConfigError(f"UDP port out of range: {self.port}")

    @property
    def is_offline(self):
        return self.input_kind != 'udp'

    def ensure_output_dir(self):
        """Create the output directory and check it is writable"""
        try:
            os.makedirs(self.output_dir, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"Cannot create output directory {self.output_dir}: {e}")
        if not os.access(self.output_dir, os.W_OK):
            raise ConfigError(f"Output directory {self.output_dir} is not writable")
        return self.output_dir

    def to_dict(self) -> Dict:
        return {
            'input': {'kind': self.input_kind, 'location': self.input_location, 'port': self.port},
            'calibration': self.calibration,
            'params': self.params.to_dict(),
            'output': {'directory': self.output_dir, 'formats': list(self.formats)},
            'mode': self.mode,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping):
        try:
            source = data['input']
            output = data.get('output', {})
            return cls(
                input_kind=source['kind'],
                input_location=str(source['location']),
                port=int(source.get('port', 2368)),
                calibration=data.get('calibration'),
                params=SegParams.from_dict(data.get('params', {})),
                output_dir=output.get('directory', 'out'),
                formats=tuple(output.get('formats', ('ndjson',))),
                mode=data.get('mode', 'stream'),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Malformed run configuration: {e}")

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Run configuration is not valid JSON: {e}")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_json(f.read())
        except OSError as e:
            raise ConfigError(f"Cannot read configuration file {path}: {e}")
