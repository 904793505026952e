"""Coarse scene layout: map-conditioned voxel occupancy and surface extraction.

The layout pipeline is map -> chunked voxel occupancy -> proxy mesh. The
default occupancy generator is a deterministic extruder (ground plane,
clipped building columns, road corridors kept clear, optional seeded clutter)
standing in for a learned occupancy sampler; `generate_chunked` accepts any
generator with the same call shape, and stitches chunks along x with the
previous chunk's overlap slab imposed as a hard constraint, which makes seams
exact by construction for any generator.

Voxel arrays are indexed [x, y, z] with z up; world position of a voxel
center is origin + (index + 0.5) * voxel_size per axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box

from .scene import TriangleMesh

DEFAULT_VOXEL_SIZE = 0.5
DEFAULT_OVERLAP = 8
DEFAULT_CHUNK_EXTENT = 100.0


# ---------------------------------------------------------------------------
# map layout


@dataclass
class Road:
    points: np.ndarray  # n x 2 polyline, meters
    width: float        # full corridor width, centered on the line

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 2:
            raise ValueError("road polyline needs at least 2 points")
        if self.width <= 0.0:
            raise ValueError("road width must be positive")


@dataclass
class Building:
    polygon: np.ndarray  # n x 2 footprint, counter-clockwise or clockwise
    height: float

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)
        if len(self.polygon) < 3:
            raise ValueError("footprint needs at least 3 points")
        if self.height <= 0.0:
            raise ValueError("building height must be positive")
        if not Polygon(self.polygon).is_valid:
            raise ValueError("footprint polygon must be simple")


@dataclass
class MapLayout:
    extent: np.ndarray  # xmin, ymin, xmax, ymax
    roads: list = field(default_factory=list)
    buildings: list = field(default_factory=list)

    def __post_init__(self):
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(4)
        if self.extent[2] <= self.extent[0] or self.extent[3] <= self.extent[1]:
            raise ValueError("extent must satisfy xmin < xmax and ymin < ymax")

    def to_dict(self) -> dict:
        return {
            "roads": [{"points": r.points.tolist(), "width": r.width}
                      for r in self.roads],
            "buildings": [{"polygon": b.polygon.tolist(), "height": b.height}
                          for b in self.buildings],
            "extent": self.extent.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MapLayout":
        try:
            extent = data["extent"]
        except KeyError as exc:
            raise ValueError("map layout missing 'extent'") from exc
        roads = [Road(np.asarray(r["points"]), float(r["width"]))
                 for r in data.get("roads", [])]
        buildings = [Building(np.asarray(b["polygon"]), float(b["height"]))
                     for b in data.get("buildings", [])]
        return cls(extent, roads, buildings)


def load_map(path) -> MapLayout:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    return MapLayout.from_dict(data)


def save_map(layout: MapLayout, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(layout.to_dict(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# voxel grid


@dataclass
class GridSpec:
    origin: np.ndarray    # world position of the grid's min corner
    voxel_size: float
    dims: tuple           # nx, ny, nz

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.voxel_size <= 0.0:
            raise ValueError("voxel size must be positive")
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("dims must be three positive integers")

    def cell_centers_xy(self):
        """World (x, y) coordinates of every column center, two nx x ny maps."""
        nx, ny, _ = self.dims
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.voxel_size
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.voxel_size
        return np.meshgrid(xs, ys, indexing="ij")


class VoxelGrid:
    def __init__(self, origin, voxel_size: float, occupancy: np.ndarray):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        if voxel_size <= 0.0:
            raise ValueError("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.occupancy = np.ascontiguousarray(occupancy, dtype=bool)
        if self.occupancy.ndim != 3:
            raise ValueError("occupancy must be a 3-d array")

    @property
    def dims(self):
        return self.occupancy.shape

    @classmethod
    def empty(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec.origin, spec.voxel_size, np.zeros(spec.dims, dtype=bool))

    def spec(self) -> GridSpec:
        return GridSpec(self.origin, self.voxel_size, self.dims)

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def world_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) \
            * self.voxel_size


# ---------------------------------------------------------------------------
# deterministic extruder


def _column_mask(geom, spec: GridSpec) -> np.ndarray:
    xs, ys = spec.cell_centers_xy()
    return shapely.contains_xy(geom, xs.ravel(), ys.ravel()) \
        .reshape(spec.dims[0], spec.dims[1])


def extrude_layout(layout: MapLayout, spec: GridSpec, seed: int = 0,
                   jitter_rate: float = 0.0):
    """Extrude a map into occupancy; returns (grid, clipped footprint count).

    The spec may window any part of the map (chunked generation relies on
    this). Ground layer z=0 spans the grid. Footprints become columns of
    ceil(height/voxel) layers above ground, clipped to the map extent (each
    clip counted). Road corridors (full width, centered) are kept clear above
    ground. Jitter sprinkles seeded 1-3 voxel clutter columns outside
    corridors at the given per-cell rate; with jitter off the result is a
    pure function of the map and spec.
    """
    nx, ny, nz = spec.dims
    occ = np.zeros((nx, ny, nz), dtype=bool)
    occ[:, :, 0] = True

    warnings = 0
    extent_box = box(*layout.extent)
    for b in layout.buildings:
        poly = Polygon(b.polygon)
        clipped = poly.intersection(extent_box)
        if clipped.is_empty:
            warnings += 1
            continue
        if clipped.area < poly.area - 1e-9:
            warnings += 1
        layers = min(math.ceil(b.height / spec.voxel_size), nz - 1)
        if layers < 1:
            continue
        mask = _column_mask(clipped, spec)
        occ[:, :, 1:1 + layers] |= mask[:, :, None]

    corridor = np.zeros((nx, ny), dtype=bool)
    for r in layout.roads:
        geom = LineString(r.points).buffer(r.width / 2.0)
        corridor |= _column_mask(geom, spec)

    if jitter_rate > 0.0:
        rng = np.random.default_rng(seed)
        spots = rng.random((nx, ny)) < jitter_rate
        heights = rng.integers(1, 4, size=(nx, ny))
        spots &= ~corridor
        for h in (1, 2, 3):
            sel = spots & (heights == h)
            occ[:, :, 1:1 + h] |= sel[:, :, None]

    occ[:, :, 1:] &= ~corridor[:, :, None]
    return VoxelGrid(spec.origin, spec.voxel_size, occ), warnings


# ---------------------------------------------------------------------------
# chunked generation


def _as_grid(result) -> VoxelGrid:
    if isinstance(result, tuple):
        result = result[0]
    if not isinstance(result, VoxelGrid):
        raise TypeError("chunk generator must return a VoxelGrid")
    return result


def _axis_starts(n: int, chunk: int, overlap: int):
    """Chunk start indices along one axis, stepping chunk - overlap.

    The final start is clamped to n - chunk so every chunk is full size;
    the last pair then overlaps by more than `overlap`, never less.
    """
    if chunk >= n:
        return [0]
    starts = [0]
    while starts[-1] + chunk < n:
        nxt = starts[-1] + (chunk - overlap)
        if nxt > n - chunk:
            nxt = n - chunk
        starts.append(nxt)
    return starts


def chunk_windows(layout: MapLayout, *, chunk_extent: float,
                  overlap: int, voxel_size: float):
    """The (x0, y0, w, h) voxel windows generate_chunked will visit, in order."""
    e = layout.extent
    nx = max(1, math.ceil((e[2] - e[0]) / voxel_size))
    ny = max(1, math.ceil((e[3] - e[1]) / voxel_size))
    c = max(1, round(chunk_extent / voxel_size))
    wins = []
    for y0 in _axis_starts(ny, c, overlap):
        for x0 in _axis_starts(nx, c, overlap):
            wins.append((x0, y0, min(c, nx - x0), min(c, ny - y0)))
    return wins


def generate_chunked(generator, layout: MapLayout, *,
                     chunk_extent: float = DEFAULT_CHUNK_EXTENT,
                     overlap: int = DEFAULT_OVERLAP,
                     voxel_size: float = DEFAULT_VOXEL_SIZE,
                     num_z_layers: int = 24,
                     seed: int = 0) -> VoxelGrid:
    """Generate occupancy chunk by chunk over a 2D tiling and stitch exactly.

    Chunks tile the horizontal extent and run in row-major scan order
    (x fastest). Every voxel column a chunk shares with already-generated
    chunks is overwritten with the existing values before stitching, so the
    new chunk is conditioned on its predecessors' overlap slabs as a hard
    constraint and overlaps are bit-identical whatever the generator does.
    A chunk extent at or beyond the whole map degrades to a single full-map
    generator call with the seed passed through untouched.
    """
    if overlap <= 0:
        raise ValueError("overlap must be a positive voxel count")
    if chunk_extent <= 0.0:
        raise ValueError("chunk extent must be positive")
    e = layout.extent
    nx = max(1, math.ceil((e[2] - e[0]) / voxel_size))
    ny = max(1, math.ceil((e[3] - e[1]) / voxel_size))
    origin = np.array([e[0], e[1], 0.0])
    c = max(1, round(chunk_extent / voxel_size))

    if c >= nx and c >= ny:
        spec = GridSpec(origin, voxel_size, (nx, ny, num_z_layers))
        return _as_grid(generator(layout, spec, seed))
    if overlap >= c:
        raise ValueError(f"overlap {overlap} must be smaller than "
                         f"chunk dim {c}")

    wins = chunk_windows(layout, chunk_extent=chunk_extent, overlap=overlap,
                         voxel_size=voxel_size)
    occ = np.zeros((nx, ny, num_z_layers), dtype=bool)
    written = np.zeros((nx, ny), dtype=bool)
    seeds = np.random.SeedSequence(seed).spawn(len(wins))
    for (x0, y0, w, h), sseq in zip(wins, seeds):
        spec = GridSpec(origin + np.array([x0 * voxel_size,
                                           y0 * voxel_size, 0.0]),
                        voxel_size, (w, h, num_z_layers))
        chunk = _as_grid(generator(layout, spec,
                                   int(sseq.generate_state(1)[0])))
        if chunk.dims != (w, h, num_z_layers):
            raise ValueError(f"generator returned dims {chunk.dims}, "
                             f"expected {(w, h, num_z_layers)}")
        data = chunk.occupancy.copy()
        fixed = written[x0:x0 + w, y0:y0 + h]
        data[fixed] = occ[x0:x0 + w, y0:y0 + h][fixed]
        occ[x0:x0 + w, y0:y0 + h] = data
        written[x0:x0 + w, y0:y0 + h] = True
    return VoxelGrid(origin, voxel_size, occ)


# ---------------------------------------------------------------------------
# surface extraction


def extract_surface(grid: VoxelGrid, iso: float = 0.5) -> TriangleMesh:
    """Marching-cubes proxy mesh of the occupancy, outward-oriented.

    The binary field gets one 3x3x3 box-filter pass (after zero padding, so
    solids touching the boundary close up), then contouring at `iso`.
    Degenerate triangles are dropped. All-empty and all-full grids have no
    surface and yield the empty mesh.
    """
    if not 0.0 < iso < 1.0:
        raise ValueError("iso level must lie in (0, 1)")
    occ = grid.occupancy
    if not occ.any() or occ.all():
        return TriangleMesh.empty()

    from scipy.ndimage import uniform_filter
    from skimage.measure import marching_cubes

    pad = 2  # one voxel for closure plus one for filter support
    field = np.zeros(tuple(d + 2 * pad for d in occ.shape), dtype=np.float64)
    field[pad:-pad, pad:-pad, pad:-pad] = occ
    field = uniform_filter(field, size=3, mode="constant", cval=0.0)
    if field.max() <= iso or field.min() >= iso:
        return TriangleMesh.empty()
    verts, faces, _, _ = marching_cubes(field, level=iso)

    # sample i sits at the center of voxel i - pad
    verts = grid.origin[None, :] + (verts - pad + 0.5) * grid.voxel_size
    faces = faces[:, ::-1]  # contouring winds inward; flip to outward

    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)
    faces = faces[areas > 1e-12]
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# mesh checks (used by tests and validation tooling)


def mesh_edge_counts(mesh: TriangleMesh):
    """Histogram of undirected edge multiplicities, {count: edges}."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    hist = {}
    for c in counts:
        hist[int(c)] = hist.get(int(c), 0) + 1
    return hist


def euler_characteristic(mesh: TriangleMesh) -> int:
    f = mesh.faces
    used = np.unique(f)
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return int(len(used) - len(edges) + len(f))
