"""
Analytic scene simulator.

A scene is piecewise planar ground plus boxes, vertical cylinders and vertical
panels. Every beam of every firing column is cast against the primitives in
closed form; the nearest hit gives the range and the truth label (-1 no return,
0 ground, >= 1 object id). Dropout (e.g. transparent windows) and Gaussian
range noise are applied after labelling.

World frame: ground-level origin under the sensor, x forward, y left, z up.
The sensor sits at (0, 0, mount_height).
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .exceptions import SceneError
from .geometry import wrap_degrees
from .packet import (
    BLOCKS_PER_PACKET, DEFAULT_AZIMUTH_STEP, RANGE_TICK, BeamCalibration, DataPacket, PacketBuffer,
    encode_packet, load_calibration,
)

logger = logging.getLogger(__name__)


NO_RETURN = -1
GROUND = 0
OBJECT_KINDS = ('box', 'cylinder', 'panel')
MAX_GRADE = 0.2
GROUND_REFLECTIVITY = 40
OBJECT_REFLECTIVITY = 120
SCENE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'scenes')


@dataclass(frozen=True)
class GroundPlane:
    """z = z0 + grade_x * x + grade_y * y for x in [x_min, x_max)"""

    z0: float = 0.0
    grade_x: float = 0.0
    grade_y: float = 0.0
    x_min: float = -np.inf
    x_max: float = np.inf

    def height(self, x, y):
        return self.z0 + self.grade_x * x + self.grade_y * y


@dataclass(frozen=True)
class SceneObject:
    id: int
    kind: str
    center: Tuple[float, float]
    size: Tuple[float, ...]
    base_z: float = 0.0
    yaw: float = 0.0
    dropout: float = 0.0
    dropout_band: Optional[Tuple[float, float]] = None

    @property
    def height(self):
        return self.size[-1]

    def validate(self, mount_height):
        if self.id < 1:
            raise SceneError(f"Object ids start at 1, got {self.id}")
        if self.kind not in OBJECT_KINDS:
            raise SceneError(f"Object {self.id}: unknown kind {self.kind!r}")
        expected = {'box': 3, 'cylinder': 2, 'panel': 2}[self.kind]
        if len(self.size) != expected:
            raise SceneError(f"Object {self.id}: a {self.kind} needs {expected} sizes, got {len(self.size)}")
        if any(s <= 0 for s in self.size):
            raise SceneError(f"Object {self.id}: sizes must be positive")
        if not 0.0 <= self.dropout <= 1.0:
            raise SceneError(f"Object {self.id}: dropout must be a probability")
        if self.base_z <= mount_height <= self.base_z + self.height and self._covers_origin():
            raise SceneError(f"Object {self.id} encloses the sensor")

    def _covers_origin(self):
        cx, cy = self.center
        if self.kind == 'cylinder':
            return np.hypot(cx, cy) <= self.size[0]
        if self.kind == 'box':
            c, s = np.cos(np.radians(self.yaw)), np.sin(np.radians(self.yaw))
            lx = c * -cx + s * -cy
            ly = -s * -cx + c * -cy
            return abs(lx) <= self.size[0] / 2 and abs(ly) <= self.size[1] / 2
        return False


@dataclass(frozen=True)
class SensorSpec:
    mount_height: float = 1.8
    rpm: float = 600.0
    calibration: str = 'vlp32c'

    @property
    def columns(self):
        return int(round(1800 * 600.0 / self.rpm))

    def beam_calibration(self):
        if self.calibration == 'vlp32c':
            return BeamCalibration.vlp32c()
        if self.calibration == 'uniform':
            return BeamCalibration.uniform()
        return load_calibration(self.calibration)


@dataclass(frozen=True)
class SceneSpec:
    name: str = 'scene'
    ground: Tuple[GroundPlane, ...] = (GroundPlane(),)
    objects: Tuple[SceneObject, ...] = ()
    sensor: SensorSpec = field(default_factory=SensorSpec)
    noise_sigma: float = 0.02
    seed: Optional[int] = None
    max_range: float = 200.0

    def __post_init__(self):
        object.__setattr__(self, 'ground', tuple(self.ground))
        object.__setattr__(self, 'objects', tuple(self.objects))
        self.validate()

    def validate(self):
        if self.noise_sigma < 0:
            raise SceneError("noise_sigma must not be negative")
        if self.max_range <= 0:
            raise SceneError("max_range must be positive")
        if self.sensor.mount_height <= 0 or self.sensor.rpm <= 0:
            raise SceneError("Sensor mount height and rpm must be positive")
        for plane in self.ground:
            if max(abs(plane.grade_x), abs(plane.grade_y)) > MAX_GRADE:
                raise SceneError(f"Ground grade above {MAX_GRADE} is not supported")
            if plane.height(0.0, 0.0) >= self.sensor.mount_height and plane.x_min <= 0 < plane.x_max:
                raise SceneError("Ground passes above the sensor")
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise SceneError("Object ids must be unique")
        for obj in self.objects:
            obj.validate(self.sensor.mount_height)

    def with_seed(self, seed):
        return SceneSpec(self.name, self.ground, self.objects, self.sensor, self.noise_sigma, seed, self.max_range)

    def with_objects(self, objects):
        return SceneSpec(self.name, self.ground, tuple(objects), self.sensor, self.noise_sigma, self.seed,
                         self.max_range)

    def to_dict(self):
        def plane(p):
            data = asdict(p)
            for key in ('x_min', 'x_max'):
                if not np.isfinite(data[key]):
                    del data[key]
            return data

        def obj(o):
            data = asdict(o)
            data['center'] = list(o.center)
            data['size'] = list(o.size)
            if o.dropout_band is None:
                del data['dropout_band']
            else:
                data['dropout_band'] = list(o.dropout_band)
            return data

        return {
            'name': self.name,
            'ground': [plane(p) for p in self.ground],
            'objects': [obj(o) for o in self.objects],
            'sensor': asdict(self.sensor),
            'noise_sigma': self.noise_sigma,
            'seed': self.seed,
            'max_range': self.max_range,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        try:
            ground = tuple(GroundPlane(**p) for p in data.get('ground', [{}]))
            objects = []
            for o in data.get('objects', []):
                o = dict(o)
                o['center'] = tuple(o['center'])
                o['size'] = tuple(o['size'])
                if o.get('dropout_band') is not None:
                    o['dropout_band'] = tuple(o['dropout_band'])
                objects.append(SceneObject(**o))
            return cls(
                name=data.get('name', 'scene'),
                ground=ground,
                objects=tuple(objects),
                sensor=SensorSpec(**data.get('sensor', {})),
                noise_sigma=float(data.get('noise_sigma', 0.02)),
                seed=data.get('seed'),
                max_range=float(data.get('max_range', 200.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SceneError(f"Malformed scene description: {e}")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise SceneError(f"Cannot read scene {path}: {e}")
        except json.JSONDecodeError as e:
            raise SceneError(f"Scene {path} is not valid JSON: {e}")
        data.setdefault('name', os.path.splitext(os.path.basename(path))[0])
        return cls.from_dict(data)


@dataclass(frozen=True)
class TruthObject:
    id: int
    point_count: int
    bbox_min: Tuple[float, float, float]
    bbox_max: Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class LabeledScan:
    """Full N x M range image of one revolution with per-cell truth labels"""

    name: str
    rho: np.ndarray
    truth: np.ndarray
    azimuths: np.ndarray
    calibration: BeamCalibration
    azimuth_step: float = DEFAULT_AZIMUTH_STEP

    @property
    def n_cols(self):
        return self.rho.shape[1]

    def to_buffer(self, scan_id=0, quantize=True) -> PacketBuffer:
        """The whole scan as one buffer; ranges snap to packet ticks unless told otherwise"""
        rho = quantize_range(self.rho) if quantize else self.rho
        return PacketBuffer(
            scan_id=scan_id, buffer_seq=0, col_offset=0, azimuths=self.azimuths, rho=rho,
            reflectivity=reflectivity_for(self.truth), calibration=self.calibration, closes_scan=True,
            azimuth_step=self.azimuth_step,
        )

    def to_buffers(self, buffer_packets=5, scan_id=0) -> List[PacketBuffer]:
        """Split like the packet assembler would: buffer_packets * 12 columns each"""
        width = buffer_packets * BLOCKS_PER_PACKET
        whole = self.to_buffer(scan_id)
        buffers = []
        for seq, start in enumerate(range(0, self.n_cols, width)):
            stop = min(start + width, self.n_cols)
            buffers.append(PacketBuffer(
                scan_id=scan_id, buffer_seq=seq, col_offset=start,
                azimuths=whole.azimuths[start:stop], rho=whole.rho[:, start:stop],
                reflectivity=whole.reflectivity[:, start:stop], calibration=self.calibration,
                closes_scan=stop == self.n_cols, azimuth_step=self.azimuth_step,
            ))
        return buffers

    def point_grid(self):
        return self.to_buffer().point_grid()

    def cartesian(self):
        return self.to_buffer().cartesian

    def object_keys(self) -> Dict[int, List[Tuple[int, int]]]:
        """(col, row) cells of every truth object"""
        rows, cols = np.nonzero(self.truth > GROUND)
        keys: Dict[int, List[Tuple[int, int]]] = {}
        for r, c in zip(rows, cols):
            keys.setdefault(int(self.truth[r, c]), []).append((int(c), int(r)))
        return keys

    @property
    def truth_objects(self) -> List[TruthObject]:
        x, y, z, _ = self.cartesian()
        objects = []
        for oid in np.unique(self.truth[self.truth > GROUND]):
            mask = self.truth == oid
            xyz = np.stack([x[mask], y[mask], z[mask]], axis=1)
            objects.append(TruthObject(int(oid), int(mask.sum()), tuple(xyz.min(axis=0)), tuple(xyz.max(axis=0))))
        return objects

    @property
    def ground_count(self):
        return int(np.count_nonzero(self.truth == GROUND))


def quantize_range(rho):
    return np.round(np.asarray(rho) / RANGE_TICK) * RANGE_TICK


def reflectivity_for(truth):
    values = np.zeros(truth.shape, dtype=np.uint8)
    values[truth == GROUND] = GROUND_REFLECTIVITY
    values[truth > GROUND] = OBJECT_REFLECTIVITY
    return values


def column_azimuths(columns):
    """Block azimuths (degrees) of a revolution, quantised to centidegrees"""
    return np.round(np.arange(columns) * 36000.0 / columns) / 100.0


def _ray_directions(calibration, azimuths, step):
    phi = np.radians(calibration.phi)[:, None]
    residuals = calibration.column_layout(step).residuals
    theta = np.radians(wrap_degrees(azimuths[None, :] + residuals[:, None]))
    cos_phi = np.cos(phi)
    return cos_phi * np.cos(theta), cos_phi * np.sin(theta), np.broadcast_to(np.sin(phi), theta.shape)


def _hit_ground(plane, dx, dy, dz, mount_height):
    denom = dz - plane.grade_x * dx - plane.grade_y * dy
    with np.errstate(divide='ignore', invalid='ignore'):
        t = (plane.z0 - mount_height) / denom
        x = t * dx
    ok = (t > 0) & np.isfinite(t) & (x >= plane.x_min) & (x < plane.x_max)
    return np.where(ok, t, np.inf)


def _slab(origin, direction, low, high):
    with np.errstate(divide='ignore', invalid='ignore'):
        t1 = (low - origin) / direction
        t2 = (high - origin) / direction
    parallel = np.abs(direction) < 1e-12
    inside = (origin >= low) & (origin <= high)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return near, far


def _hit_box(obj, dx, dy, dz, mount_height):
    c, s = np.cos(np.radians(obj.yaw)), np.sin(np.radians(obj.yaw))
    cx, cy = obj.center
    # sensor origin and rays in the box frame
    ox, oy = c * -cx + s * -cy, -s * -cx + c * -cy
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    length, width, height = obj.size
    z_low = obj.base_z - mount_height
    near_x, far_x = _slab(ox, lx, -length / 2, length / 2)
    near_y, far_y = _slab(oy, ly, -width / 2, width / 2)
    near_z, far_z = _slab(0.0, dz, z_low, z_low + height)
    near = np.maximum(np.maximum(near_x, near_y), near_z)
    far = np.minimum(np.minimum(far_x, far_y), far_z)
    ok = (near <= far) & (near > 0)
    return np.where(ok, near, np.inf)


def _hit_cylinder(obj, dx, dy, dz, mount_height):
    cx, cy = obj.center
    radius, height = obj.size
    z_low = obj.base_z - mount_height
    z_high = z_low + height

    a = dx * dx + dy * dy
    b = -2.0 * (dx * cx + dy * cy)
    c = cx * cx + cy * cy - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(divide='ignore', invalid='ignore'):
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
        z_side = t_side * dz
        side_ok = (disc >= 0) & (a > 1e-12) & (t_side > 0) & (z_side >= z_low) & (z_side <= z_high)

        t_cap = z_high / dz
        cap_x, cap_y = t_cap * dx - cx, t_cap * dy - cy
        cap_ok = (dz < 0) & (t_cap > 0) & (cap_x * cap_x + cap_y * cap_y <= radius * radius)
    return np.minimum(np.where(side_ok, t_side, np.inf), np.where(cap_ok, t_cap, np.inf))


def _hit_panel(obj, dx, dy, dz, mount_height):
    nx, ny = np.cos(np.radians(obj.yaw)), np.sin(np.radians(obj.yaw))
    cx, cy = obj.center
    width, height = obj.size
    z_low = obj.base_z - mount_height
    denom = nx * dx + ny * dy
    with np.errstate(divide='ignore', invalid='ignore'):
        t = (nx * cx + ny * cy) / denom
        # rays parallel to the panel give t = inf and inf * 0 here
        along = -ny * (t * dx - cx) + nx * (t * dy - cy)
        z = t * dz
        ok = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(along) <= width / 2) & (z >= z_low) & (z <= z_low + height)
    return np.where(ok, t, np.inf)


HIT_FUNCTIONS = {'box': _hit_box, 'cylinder': _hit_cylinder, 'panel': _hit_panel}


def raycast_scan(spec: SceneSpec, calibration: Optional[BeamCalibration] = None) -> LabeledScan:
    """Cast every beam of one revolution against the scene"""
    calibration = calibration or spec.sensor.beam_calibration()
    columns = spec.sensor.columns
    step = 360.0 / columns
    azimuths = column_azimuths(columns)
    dx, dy, dz = _ray_directions(calibration, azimuths, step)
    h = spec.sensor.mount_height

    best = np.full(dx.shape, np.inf)
    truth = np.full(dx.shape, NO_RETURN, dtype=np.int32)
    for plane in spec.ground:
        t = _hit_ground(plane, dx, dy, dz, h)
        closer = t < best
        best[closer] = t[closer]
        truth[closer] = GROUND
    for obj in spec.objects:
        t = HIT_FUNCTIONS[obj.kind](obj, dx, dy, dz, h)
        closer = t < best
        best[closer] = t[closer]
        truth[closer] = obj.id

    out_of_range = ~np.isfinite(best) | (best > spec.max_range)
    truth[out_of_range] = NO_RETURN
    rho = np.where(out_of_range, 0.0, best)

    rng = np.random.default_rng(spec.seed)
    for obj in spec.objects:
        if obj.dropout <= 0:
            continue
        hit = truth == obj.id
        if obj.dropout_band is not None:
            z_world = rho * np.sin(np.radians(calibration.phi))[:, None] + h
            hit &= (z_world >= obj.dropout_band[0]) & (z_world <= obj.dropout_band[1])
        dropped = hit & (rng.random(hit.shape) < obj.dropout)
        truth[dropped] = NO_RETURN
        rho[dropped] = 0.0

    if spec.noise_sigma > 0:
        valid = truth != NO_RETURN
        noise = rng.normal(0.0, spec.noise_sigma, size=rho.shape)
        rho = np.where(valid, np.maximum(rho + noise, RANGE_TICK), 0.0)

    return LabeledScan(name=spec.name, rho=rho, truth=truth, azimuths=azimuths, calibration=calibration,
                       azimuth_step=step)


def _rows_to_blocks(cells, shifts):
    blocks = np.empty_like(cells)
    for row, shift in enumerate(shifts):
        blocks[row] = np.roll(cells[row], -shift)
    return blocks


def scene_to_packets(scan: LabeledScan, revolutions: int = 1, start_timestamp_us: int = 0,
                     scan_period_us: float = 100000.0) -> List[bytes]:
    """
    Encode a scan as data packets, `revolutions` times over.

    Block b carries row i of column b + shift_i (modulo the revolution), the
    inverse of the assembler's binning. Column counts that are not a multiple
    of 12 are padded with empty blocks repeating the last azimuth.
    """
    columns = scan.n_cols
    pad = (-columns) % BLOCKS_PER_PACKET
    shifts = scan.calibration.column_layout(scan.azimuth_step).shifts
    ticks = _rows_to_blocks(np.round(scan.rho / RANGE_TICK).astype(np.uint16), shifts)
    reflectivity = _rows_to_blocks(reflectivity_for(scan.truth), shifts)
    centidegrees = np.round(scan.azimuths * 100).astype(np.uint16)
    if pad:
        ticks = np.pad(ticks, ((0, 0), (0, pad)))
        reflectivity = np.pad(reflectivity, ((0, 0), (0, pad)))
        centidegrees = np.concatenate([centidegrees, np.full(pad, centidegrees[-1], dtype=np.uint16)])

    # (columns, channels)
    ticks = scan.calibration.to_channels(ticks.T)
    reflectivity = scan.calibration.to_channels(reflectivity.T)
    n_packets = len(centidegrees) // BLOCKS_PER_PACKET
    interval = scan_period_us / n_packets

    payloads = []
    for revolution in range(revolutions):
        for k in range(n_packets):
            blocks = slice(k * BLOCKS_PER_PACKET, (k + 1) * BLOCKS_PER_PACKET)
            stamp = int(start_timestamp_us + (revolution * n_packets + k) * interval) % 3600_000_000
            packet = DataPacket.build(centidegrees[blocks], ticks[blocks], reflectivity[blocks], timestamp_us=stamp)
            payloads.append(encode_packet(packet))
    return payloads


def random_scene(seed: int, n_objects: int = 8, min_gap: float = 1.5, max_distance: float = 28.0,
                 noise_sigma: float = 0.02, name: Optional[str] = None) -> SceneSpec:
    """
    Random boxes, cylinders and panels on flat ground.

    Footprints are kept at least min_gap apart so every object is its own
    component at the merge distance.
    """
    rng = np.random.default_rng(seed)
    objects = []
    placed = []
    attempts = 0
    while len(objects) < n_objects and attempts < 200 * n_objects:
        attempts += 1
        kind = OBJECT_KINDS[int(rng.integers(len(OBJECT_KINDS)))]
        distance = rng.uniform(4.0, max_distance)
        bearing = rng.uniform(0.0, 2 * np.pi)
        center = (float(distance * np.cos(bearing)), float(distance * np.sin(bearing)))
        if kind == 'box':
            size = (float(rng.uniform(0.8, 4.5)), float(rng.uniform(0.8, 2.0)), float(rng.uniform(0.8, 2.2)))
        elif kind == 'cylinder':
            size = (float(rng.uniform(0.1, 0.5)), float(rng.uniform(1.0, 3.0)))
        else:
            size = (float(rng.uniform(1.0, 4.0)), float(rng.uniform(0.8, 2.5)))
        reach = float(np.hypot(*size[:2]) / 2) if kind != 'cylinder' else size[0]
        if any(np.hypot(center[0] - c[0], center[1] - c[1]) < reach + r + min_gap for c, r in placed):
            continue
        placed.append((center, reach))
        objects.append(SceneObject(id=len(objects) + 1, kind=kind, center=center, size=size,
                                   yaw=float(rng.uniform(0.0, 180.0))))
    return SceneSpec(name=name or f'random-{seed}', objects=tuple(objects), noise_sigma=noise_sigma, seed=seed)


BUNDLED_SCENES = ('flat', 'sloped', 'car_window', 'pole_occlusion', 'two_pedestrians', 'seam_box', 'urban_block')


def bundled_scene(name) -> SceneSpec:
    if name not in BUNDLED_SCENES:
        raise SceneError(f"No bundled scene named {name!r}")
    return SceneSpec.load(os.path.join(SCENE_DIR, f'{name}.json'))


def load_corpus(paths: Iterable[str]) -> List[SceneSpec]:
    """Scene files, or every scene *.json (not *.truth.json) in the given directories"""
    scenes = []
    for path in paths:
        if os.path.isdir(path):
            for entry in sorted(os.listdir(path)):
                if entry.endswith('.json') and not entry.endswith('.truth.json'):
                    scenes.append(SceneSpec.load(os.path.join(path, entry)))
        else:
            scenes.append(SceneSpec.load(path))
    return scenes
