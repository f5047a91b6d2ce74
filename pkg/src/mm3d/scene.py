"""Colored point-cloud scenes: ASCII PLY I/O, normalization, synthetic scenes.

A scene is positions (meters), colors in [0,1], and stable integer ids.
Ids survive subsetting, so downstream masking can always refer back to the
original points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, PlyParseError

__all__ = [
    "PointScene", "SynthObject", "SynthSpec", "load_ply", "save_ply",
    "normalize_scene", "synth_scene", "load_synth_spec",
]


@dataclass
class PointScene:
    positions: np.ndarray  # (N,3) float32
    colors: np.ndarray     # (N,3) float32 in [0,1]
    ids: np.ndarray        # (N,) int64, unique

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        n = self.positions.shape[0]
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or n < 1:
            raise ContractError(f"positions must be (N>=1, 3), got {self.positions.shape}")
        if self.colors.shape != (n, 3):
            raise ContractError(f"colors must match positions, got {self.colors.shape}")
        if self.ids.shape != (n,):
            raise ContractError(f"ids must be (N,), got {self.ids.shape}")
        if not np.isfinite(self.positions).all():
            raise ContractError("positions contain non-finite values")
        if self.colors.min() < 0.0 or self.colors.max() > 1.0:
            raise ContractError("colors must lie in [0,1]")
        if self.ids.min() < 0 or np.unique(self.ids).size != n:
            raise ContractError("ids must be unique non-negative integers")

    @property
    def n_points(self):
        return self.positions.shape[0]

    def row_of_id(self):
        """Map point id -> row index."""
        return {int(v): i for i, v in enumerate(self.ids)}

    def subset_by_ids(self, keep_ids):
        """New scene holding exactly the requested ids, in the given order."""
        lookup = self.row_of_id()
        try:
            rows = np.array([lookup[int(v)] for v in keep_ids], dtype=np.int64)
        except KeyError as exc:
            raise ContractError(f"id {exc.args[0]} not present in scene") from None
        return PointScene(self.positions[rows], self.colors[rows], self.ids[rows])


# ---------------------------------------------------------------------------
# ASCII PLY

_XYZ_TYPES = ("float", "float32")
_RGB_TYPES = ("uchar", "uint8")
_PROPERTIES = (
    ("x", _XYZ_TYPES), ("y", _XYZ_TYPES), ("z", _XYZ_TYPES),
    ("red", _RGB_TYPES), ("green", _RGB_TYPES), ("blue", _RGB_TYPES),
)


def load_ply(path):
    """Parse an ASCII PLY file with float x,y,z and uchar red,green,blue."""
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    def fail(msg, line_no):
        raise PlyParseError(msg, line_no)

    if not lines or lines[0].strip() != "ply":
        fail("expected 'ply' magic", 1)
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        fail("expected 'format ascii 1.0'", 2)

    n_vertices = None
    prop_idx = 0
    i = 2
    while i < len(lines):
        line_no = i + 1
        tokens = lines[i].split()
        i += 1
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "element":
            if len(tokens) != 3 or tokens[1] != "vertex":
                fail(f"unsupported element '{lines[i-1].strip()}'", line_no)
            if n_vertices is not None:
                fail("duplicate vertex element", line_no)
            try:
                n_vertices = int(tokens[2])
            except ValueError:
                fail(f"bad vertex count '{tokens[2]}'", line_no)
            if n_vertices < 1:
                fail(f"vertex count must be >= 1, got {n_vertices}", line_no)
            continue
        if tokens[0] == "property":
            if n_vertices is None:
                fail("property before vertex element", line_no)
            if prop_idx >= len(_PROPERTIES):
                fail(f"unexpected extra property '{lines[i-1].strip()}'", line_no)
            name, types = _PROPERTIES[prop_idx]
            if len(tokens) != 3 or tokens[1] not in types or tokens[2] != name:
                fail(f"expected 'property {types[0]} {name}', got '{lines[i-1].strip()}'",
                     line_no)
            prop_idx += 1
            continue
        fail(f"unrecognized header line '{lines[i-1].strip()}'", line_no)
    else:
        fail("missing end_header", len(lines) + 1)

    if n_vertices is None:
        fail("missing vertex element", i)
    if prop_idx != len(_PROPERTIES):
        fail(f"missing property '{_PROPERTIES[prop_idx][0]}'", i)

    positions = np.zeros((n_vertices, 3), dtype=np.float32)
    colors = np.zeros((n_vertices, 3), dtype=np.float32)
    for v in range(n_vertices):
        if i >= len(lines):
            fail(f"unexpected end of file: expected {n_vertices} vertex records, "
                 f"got {v}", len(lines) + 1)
        line_no = i + 1
        tokens = lines[i].split()
        i += 1
        if len(tokens) != 6:
            fail(f"expected 6 fields, got {len(tokens)}", line_no)
        for axis in range(3):
            try:
                value = float(tokens[axis])
            except ValueError:
                fail(f"bad coordinate '{tokens[axis]}'", line_no)
            if not math.isfinite(value):
                fail(f"non-finite coordinate '{tokens[axis]}'", line_no)
            positions[v, axis] = value
        for chan in range(3):
            tok = tokens[3 + chan]
            try:
                value = int(tok)
            except ValueError:
                fail(f"bad color value '{tok}'", line_no)
            if not 0 <= value <= 255:
                fail(f"color value {value} outside 0..255", line_no)
            colors[v, chan] = value / 255.0
    while i < len(lines):
        if lines[i].strip():
            fail(f"unexpected trailing content '{lines[i].strip()}'", i + 1)
        i += 1

    return PointScene(positions, colors, np.arange(n_vertices, dtype=np.int64))


def _fmt_f32(value):
    # shortest decimal string that round-trips the float32 exactly
    return np.format_float_positional(np.float32(value), unique=True, trim="-")


def save_ply(scene, path):
    """Write a scene as ASCII PLY, vertices in ascending id order."""
    order = np.argsort(scene.ids, kind="stable")
    quant = np.clip(np.floor(scene.colors.astype(np.float64) * 255.0 + 0.5), 0, 255)
    quant = quant.astype(np.int64)
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {scene.n_points}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for row in order:
        p = scene.positions[row]
        c = quant[row]
        out.append(f"{_fmt_f32(p[0])} {_fmt_f32(p[1])} {_fmt_f32(p[2])} "
                   f"{c[0]} {c[1]} {c[2]}")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# Normalization

def normalize_scene(scene):
    """Center at the centroid and scale the farthest point onto the unit sphere.

    Colors and ids pass through. Coincident point sets are only centered.
    """
    pos = scene.positions.astype(np.float64)
    pos -= pos.mean(axis=0)
    radius = float(np.sqrt((pos ** 2).sum(axis=1)).max())
    if radius > 0.0:
        pos /= radius
    return PointScene(pos.astype(np.float32), scene.colors.copy(), scene.ids.copy())


# ---------------------------------------------------------------------------
# Synthetic scenes

@dataclass
class SynthObject:
    shape: str                 # "box" or "cylinder"
    size: tuple                # box: (sx, sy, sz); cylinder: (radius, height)
    position: tuple            # base-center (x, y, z)
    color: tuple               # RGB in [0,1]

    def __post_init__(self):
        if self.shape not in ("box", "cylinder"):
            raise ConfigError(f"unknown object shape '{self.shape}'")
        want = 3 if self.shape == "box" else 2
        self.size = tuple(float(v) for v in self.size)
        self.position = tuple(float(v) for v in self.position)
        self.color = tuple(float(v) for v in self.color)
        if len(self.size) != want or any(v <= 0 for v in self.size):
            raise ConfigError(f"{self.shape} size must be {want} positive reals, "
                              f"got {self.size}")
        if len(self.position) != 3:
            raise ConfigError(f"position must be (x,y,z), got {self.position}")
        if len(self.color) != 3 or any(not 0.0 <= v <= 1.0 for v in self.color):
            raise ConfigError(f"color must be RGB in [0,1], got {self.color}")


@dataclass
class SynthSpec:
    floor_extent: float                    # floor is a square of this side length at z=0
    density: float                         # points per unit area
    seed: int
    objects: list = field(default_factory=list)
    floor_color: tuple = (0.5, 0.5, 0.5)
    sensor: tuple = None                   # optional scan origin; casts occlusion shadows

    def __post_init__(self):
        if self.floor_extent <= 0:
            raise ConfigError(f"floor_extent must be > 0, got {self.floor_extent}")
        if self.density <= 0:
            raise ConfigError(f"density must be > 0, got {self.density}")
        self.floor_color = tuple(float(v) for v in self.floor_color)
        if len(self.floor_color) != 3 or any(not 0.0 <= v <= 1.0 for v in self.floor_color):
            raise ConfigError(f"floor_color must be RGB in [0,1], got {self.floor_color}")
        if self.sensor is not None:
            self.sensor = tuple(float(v) for v in self.sensor)
            if len(self.sensor) != 3 or any(not math.isfinite(v) for v in self.sensor):
                raise ConfigError(f"sensor must be a finite (x,y,z), got {self.sensor}")


def load_synth_spec(path):
    """Read a SynthSpec from JSON {floor_extent, objects[], density, seed}."""
    try:
        with open(path, "r") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("scene spec must be a JSON object")
    missing = [k for k in ("floor_extent", "density", "seed") if k not in doc]
    if missing:
        raise ConfigError(f"scene spec missing keys: {', '.join(missing)}")
    objects = []
    for entry in doc.get("objects", []):
        missing = [k for k in ("shape", "size", "position", "color") if k not in entry]
        if missing:
            raise ConfigError(f"object entry missing keys: {', '.join(missing)}")
        objects.append(SynthObject(entry["shape"], entry["size"],
                                   entry["position"], entry["color"]))
    sensor = doc.get("sensor")
    return SynthSpec(
        floor_extent=float(doc["floor_extent"]),
        density=float(doc["density"]),
        seed=int(doc["seed"]),
        objects=objects,
        floor_color=tuple(doc.get("floor_color", (0.5, 0.5, 0.5))),
        sensor=None if sensor is None else tuple(sensor),
    )


# Fixed directional light for the per-face Lambert term. Object faces get a
# face-dependent brightness so adjacent faces meet in a color discontinuity;
# the floor keeps its exact base color.
_LIGHT_DIR = np.array([0.3, 0.5, 0.8]) / math.sqrt(0.3**2 + 0.5**2 + 0.8**2)
_AMBIENT = 0.3


def _shade(normal):
    lambert = max(0.0, float(np.dot(np.asarray(normal, dtype=np.float64), _LIGHT_DIR)))
    return _AMBIENT + (1.0 - _AMBIENT) * lambert


def _face_count(area, density):
    return int(math.floor(area * density + 0.5))


def _sample_rect(rng, origin, u_vec, v_vec, n):
    # origin + a*u_vec + b*v_vec with a,b ~ U(0,1)
    a = rng.uniform(0.0, 1.0, size=(n, 1))
    b = rng.uniform(0.0, 1.0, size=(n, 1))
    return (np.asarray(origin, dtype=np.float64)
            + a * np.asarray(u_vec, dtype=np.float64)
            + b * np.asarray(v_vec, dtype=np.float64))


def _sample_disk(rng, center, radius, n):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3), dtype=np.float64)
    pts[:, 0] = center[0] + r * np.cos(theta)
    pts[:, 1] = center[1] + r * np.sin(theta)
    pts[:, 2] = center[2]
    return pts


def _object_bounds(obj):
    """Axis-aligned bounding box of an object as (lo, hi) float64 triples."""
    cx, cy, cz = obj.position
    if obj.shape == "box":
        sx, sy, sz = obj.size
        lo = (cx - sx / 2.0, cy - sy / 2.0, cz)
        hi = (cx + sx / 2.0, cy + sy / 2.0, cz + sz)
    else:
        radius, height = obj.size
        lo = (cx - radius, cy - radius, cz)
        hi = (cx + radius, cy + radius, cz + height)
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


def _occluded_by_box(points, sensor, lo, hi, eps=1e-6):
    """Points whose open sightline to the sensor crosses the box (lo, hi).

    Slab test on the segment point -> sensor parametrized by t in [0, 1].
    Entry at t <= eps never counts, so points on or inside the box are not
    shadowed by it.
    """
    p = np.asarray(points, dtype=np.float64)
    d = np.asarray(sensor, dtype=np.float64) - p
    moving = d != 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - p) / d
        b = (hi - p) / d
    inside_slab = (p >= lo) & (p <= hi)
    t_lo = np.where(moving, np.minimum(a, b),
                    np.where(inside_slab, -np.inf, np.inf))
    t_hi = np.where(moving, np.maximum(a, b),
                    np.where(inside_slab, np.inf, -np.inf))
    t_near = t_lo.max(axis=1)
    t_far = t_hi.min(axis=1)
    return (t_far > t_near) & (t_near > eps) & (t_near < 1.0)


def _box_faces(obj):
    sx, sy, sz = obj.size
    cx, cy, cz = obj.position
    x0, x1 = cx - sx / 2.0, cx + sx / 2.0
    y0, y1 = cy - sy / 2.0, cy + sy / 2.0
    z0, z1 = cz, cz + sz
    # (origin, u_vec, v_vec, outward normal, area)
    return [
        ((x0, y0, z0), (0, sy, 0), (0, 0, sz), (-1, 0, 0), sy * sz),
        ((x1, y0, z0), (0, sy, 0), (0, 0, sz), (1, 0, 0), sy * sz),
        ((x0, y0, z0), (sx, 0, 0), (0, 0, sz), (0, -1, 0), sx * sz),
        ((x0, y1, z0), (sx, 0, 0), (0, 0, sz), (0, 1, 0), sx * sz),
        ((x0, y0, z1), (sx, 0, 0), (0, sy, 0), (0, 0, 1), sx * sy),
        ((x0, y0, z0), (sx, 0, 0), (0, sy, 0), (0, 0, -1), sx * sy),
    ]


def synth_scene(spec):
    """Sample a colored point cloud: square floor plus boxes and cylinders.

    Per-face point counts are round(area * density). Object faces flush with
    the floor plane are skipped (they would duplicate floor geometry). With a
    sensor position set, points whose sightline to the sensor crosses an
    object's bounding box are dropped, leaving scan-like occlusion shadows;
    points on or inside that box are kept. Fully deterministic for a given
    seed.
    """
    rng = np.random.default_rng(spec.seed)
    chunks_pos = []
    chunks_col = []

    def emit(points, rgb):
        if len(points) == 0:
            return
        chunks_pos.append(np.asarray(points, dtype=np.float64))
        col = np.asarray(rgb, dtype=np.float64)
        if col.ndim == 1:
            col = np.tile(col, (len(points), 1))
        chunks_col.append(np.clip(col, 0.0, 1.0))

    ext = spec.floor_extent
    n_floor = _face_count(ext * ext, spec.density)
    floor_pts = _sample_rect(rng, (-ext / 2.0, -ext / 2.0, 0.0),
                             (ext, 0, 0), (0, ext, 0), n_floor)
    emit(floor_pts, spec.floor_color)

    for obj in spec.objects:
        base = np.asarray(obj.color, dtype=np.float64)
        on_floor = abs(obj.position[2]) < 1e-9
        if obj.shape == "box":
            for origin, u_vec, v_vec, normal, area in _box_faces(obj):
                if normal == (0, 0, -1) and on_floor:
                    continue
                n = _face_count(area, spec.density)
                if n == 0:
                    continue
                emit(_sample_rect(rng, origin, u_vec, v_vec, n), base * _shade(normal))
        else:
            radius, height = obj.size
            cx, cy, cz = obj.position
            n = _face_count(2.0 * math.pi * radius * height, spec.density)
            if n > 0:
                theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
                z = rng.uniform(cz, cz + height, size=n)
                pts = np.stack([cx + radius * np.cos(theta),
                                cy + radius * np.sin(theta), z], axis=1)
                lambert = np.maximum(0.0, np.cos(theta) * _LIGHT_DIR[0]
                                     + np.sin(theta) * _LIGHT_DIR[1])
                shade = _AMBIENT + (1.0 - _AMBIENT) * lambert
                emit(pts, shade[:, None] * base[None, :])
            cap_area = math.pi * radius * radius
            n = _face_count(cap_area, spec.density)
            if n > 0:
                emit(_sample_disk(rng, (cx, cy, cz + height), radius, n),
                     base * _shade((0, 0, 1)))
            if not on_floor and n > 0:
                emit(_sample_disk(rng, (cx, cy, cz), radius, n),
                     base * _shade((0, 0, -1)))

    if not chunks_pos:
        raise ContractError("spec produced an empty scene; raise density or extents")
    positions = np.vstack(chunks_pos)
    colors = np.vstack(chunks_col)

    if spec.sensor is not None:
        # scan realism: drop points shadowed by an object's bounding box, the
        # way a single-viewpoint scan leaves gaps behind foreground geometry
        keep = np.ones(positions.shape[0], dtype=bool)
        for obj in spec.objects:
            lo, hi = _object_bounds(obj)
            keep &= ~_occluded_by_box(positions, spec.sensor, lo, hi)
        positions = positions[keep]
        colors = colors[keep]
        if positions.shape[0] == 0:
            raise ContractError("sensor occlusion removed every point")

    positions = positions.astype(np.float32)
    colors = colors.astype(np.float32)
    return PointScene(positions, colors, np.arange(positions.shape[0], dtype=np.int64))
