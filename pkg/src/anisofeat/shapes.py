"""Synthetic voxel shapes, slice-dropping anisotropy and Feret diameters.

Voxel centres sit at ``index * spacing``; that is the coordinate system used
for the Feret oracle and for the positions handed to encoders.

Sample file layout (``sample_XXXXX.bin``, little-endian)::

    offset  size          field
    0       4             magic b"AFVS"
    4       4   u32       format version (1)
    8       12  3 x u32   grid dims (C order)
    20      24  3 x f64   spacing per axis
    44      ceil(n/8)     occupancy bits, C order, np.packbits(bitorder="little")
    ...     16  2 x f64   min_fd, max_fd of the undegraded shape
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from .sampling import RngStream

MAX_EXTENT = 64
MIN_VOXELS = 8
DEFAULT_DIRECTIONS = 2000
REFINE_STARTS = 16
REFINE_VERTICES = 10
SAMPLE_MAGIC = b"AFVS"
SAMPLE_VERSION = 1
_HEADER = struct.Struct("<4sI3I3d")
_TARGETS = struct.Struct("<2d")


class ShapeError(ValueError):
    pass


@dataclass
class VoxelShape:
    occupancy: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3:
            raise ShapeError("occupancy must be a 3-D grid")
        if max(self.occupancy.shape) > MAX_EXTENT:
            raise ShapeError(f"grid {self.occupancy.shape} exceeds {MAX_EXTENT} voxels per axis")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"invalid spacing {self.spacing}")
        if not self.occupancy.any():
            raise ShapeError("shape is empty")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def indices(self) -> np.ndarray:
        """Integer indices of occupied voxels, ``(N, 3)`` in C order."""
        return np.argwhere(self.occupancy)

    def coords(self) -> np.ndarray:
        """Physical coordinates of occupied voxel centres."""
        return self.indices() * np.asarray(self.spacing)

    def surface_coords(self) -> np.ndarray:
        """Occupied voxels with at least one empty 6-neighbour (hull candidates)."""
        interior = ndimage.binary_erosion(self.occupancy, border_value=0)
        return np.argwhere(self.occupancy & ~interior) * np.asarray(self.spacing)


@dataclass(frozen=True)
class FeretPair:
    min_fd: float
    max_fd: float

    def __post_init__(self) -> None:
        if not (0 <= self.min_fd <= self.max_fd):
            raise ShapeError(f"invalid Feret pair ({self.min_fd}, {self.max_fd})")

    def as_array(self) -> np.ndarray:
        return np.array([self.min_fd, self.max_fd])


@dataclass
class ShapeSample:
    shape: VoxelShape
    target: FeretPair
    kind: str = "ellipsoid"
    index: int = 0
    coords: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.coords = self.shape.coords()


# -- generators ---------------------------------------------------------------


def _grid_points(grid) -> np.ndarray:
    return np.indices(tuple(grid), dtype=np.float64).reshape(3, -1).T


def rotation_matrix(angles) -> np.ndarray:
    """Intrinsic z-y-x Euler angles (radians) to a 3x3 rotation matrix."""
    return Rotation.from_euler("ZYX", np.asarray(angles, dtype=np.float64)).as_matrix()


def ellipsoid_half_extents(semi_axes, angles) -> np.ndarray:
    R = rotation_matrix(angles)
    return np.sqrt((R**2) @ (np.asarray(semi_axes, dtype=np.float64) ** 2))


def generate_ellipsoid(stream: RngStream | None, semi_axes, rotation, grid, center=None) -> VoxelShape:
    """Voxelise a rotated ellipsoid.

    A voxel is occupied iff its centre lies inside the ellipsoid.  Without an
    explicit ``center`` one is drawn from ``stream`` among the positions that
    keep the rotated ellipsoid inside the grid.
    """
    a = np.asarray(semi_axes, dtype=np.float64)
    grid = tuple(int(g) for g in grid)
    if a.shape != (3,) or np.any(a <= 0):
        raise ShapeError(f"semi-axes must be three positive numbers, got {semi_axes}")
    ext = ellipsoid_half_extents(a, rotation)
    hi = np.asarray(grid, dtype=np.float64) - 1 - ext
    if np.any(hi < ext):
        raise ShapeError(f"ellipsoid with semi-axes {a.tolist()} does not fit in grid {grid}")
    if center is None:
        if stream is None:
            c = 0.5 * (np.asarray(grid, dtype=np.float64) - 1)
        else:
            c = ext + stream.uniforms(3) * (hi - ext)
    else:
        c = np.asarray(center, dtype=np.float64)
    R = rotation_matrix(rotation)
    local = (_grid_points(grid) - c) @ R
    inside = np.sum((local / a) ** 2, axis=1) <= 1.0
    occ = inside.reshape(grid)
    if occ.sum() < MIN_VOXELS:
        raise ShapeError(f"ellipsoid has fewer than {MIN_VOXELS} voxels")
    return VoxelShape(occ)


def largest_component(occ: np.ndarray) -> np.ndarray:
    """Largest 6-connected component (ties go to the lowest label)."""
    labels, n = ndimage.label(occ)
    if n == 0:
        return np.zeros_like(occ, dtype=bool)
    counts = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(counts)) + 1)


def generate_blob(
    stream: RngStream,
    grid,
    smoothness: float = 1.0,
    n_waves: int = 8,
    max_tries: int = 10,
) -> VoxelShape:
    """Threshold a sum of random low-frequency cosines and keep the largest component.

    Frequencies are N(0, 1.5/smoothness) cycles per grid length.  The threshold
    is the field quantile that leaves a random fraction in [0.04, 0.3] occupied,
    so the component occupies at most that fraction.
    """
    if not smoothness > 0:
        raise ShapeError("smoothness must be positive")
    grid = tuple(int(g) for g in grid)
    x = _grid_points(grid) / np.asarray(grid, dtype=np.float64)
    for _ in range(max_tries):
        freqs = stream.normals(3 * n_waves, 0.0, 1.5 / smoothness).reshape(n_waves, 3)
        u = stream.uniforms(2 * n_waves + 1)
        amps = 0.5 + 0.5 * u[:n_waves]
        phases = 2.0 * math.pi * u[n_waves : 2 * n_waves]
        fraction = 0.04 + 0.26 * u[-1]
        values = np.cos(2.0 * math.pi * (x @ freqs.T) + phases) @ amps
        thresh = np.quantile(values, 1.0 - fraction)
        occ = largest_component((values > thresh).reshape(grid))
        if occ.sum() >= max(MIN_VOXELS, 0.01 * occ.size):
            return VoxelShape(occ)
    raise ShapeError(f"blob generation failed after {max_tries} attempts")


def simulate_anisotropy(shape: VoxelShape, factor: int, axis: int = 0) -> VoxelShape:
    """Keep every ``factor``-th slice along ``axis`` and stretch its spacing."""
    factor = int(factor)
    if factor < 1:
        raise ShapeError("anisotropy factor must be >= 1")
    if axis not in (0, 1, 2):
        raise ShapeError(f"axis must be 0, 1 or 2, got {axis}")
    if factor == 1:
        return VoxelShape(shape.occupancy.copy(), shape.spacing)
    extent = shape.occupancy.shape[axis]
    if factor >= extent:
        raise ShapeError(f"factor {factor} >= grid extent {extent} along axis {axis}")
    occ = np.take(shape.occupancy, np.arange(0, extent, factor), axis=axis)
    spacing = list(shape.spacing)
    spacing[axis] *= factor
    return VoxelShape(occ, tuple(spacing))


# -- Feret oracle -------------------------------------------------------------


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors with z in [0, 1], pole included.

    Widths are symmetric under u -> -u, so a hemisphere covers all directions.
    """
    if n < 1:
        raise ValueError("need at least one direction")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - i / max(n - 1, 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _hull(points: np.ndarray):
    """Hull vertices and unique facet normals; falls back to all points for
    degenerate (collinear or coplanar) input."""
    if len(points) < 4:
        return points, np.empty((0, 3))
    try:
        hull = ConvexHull(points)
    except QhullError:
        return points, np.empty((0, 3))
    normals = np.unique(np.round(hull.equations[:, :3], 12), axis=0)
    return points[hull.vertices], normals


def _width(verts: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    proj = verts @ dirs.T
    return proj.max(axis=0) - proj.min(axis=0)


def _refine_width(verts: np.ndarray, u: np.ndarray, k: int = REFINE_VERTICES, rounds: int = 2) -> float:
    """Exact local minimum width near direction ``u``.

    Minima attained between two hull edges have normal ``e1 x e2`` and are
    missed by any fixed direction set.  Such edges join vertices that are
    near-extreme along ``u``, so only edges among the ``k`` highest and ``k``
    lowest projections are paired.
    """
    best = float(_width(verts, u[None])[0])
    k = min(k, len(verts))
    iu, ju = np.triu_indices(k, 1)
    for _ in range(rounds):
        order = np.argsort(verts @ u, kind="stable")
        top, bottom = verts[order[-k:]], verts[order[:k]]
        e_top, e_bot = top[iu] - top[ju], bottom[iu] - bottom[ju]
        normals = np.cross(e_top[:, None, :], e_bot[None, :, :]).reshape(-1, 3)
        norm = np.linalg.norm(normals, axis=1)
        normals = normals[norm > 1e-12] / norm[norm > 1e-12, None]
        if len(normals) == 0:
            break
        w = _width(verts, normals)
        i = int(np.argmin(w))
        if w[i] >= best:
            break
        best, u = float(w[i]), normals[i]
    return best


def feret_oracle(coords, n_directions: int = DEFAULT_DIRECTIONS) -> FeretPair:
    """Maximum and (approximate) minimum caliper diameters of a 3-D point set.

    The maximum is the exact largest pairwise distance, taken over convex hull
    vertices.  The minimum is the smallest projection extent over a Fibonacci
    hemisphere of ``n_directions`` unit vectors plus every hull facet normal,
    then refined around the best few directions.  The facet normals make it
    exact when the minimum is attained at a face; the refinement covers
    edge-edge minima.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"coords must have shape (N, 3), got {pts.shape}")
    pts = np.unique(pts, axis=0)
    if len(pts) < 2:
        raise ShapeError("Feret diameters need at least two distinct points")
    if n_directions < 1:
        raise ShapeError("n_directions must be positive")
    verts, normals = _hull(pts)
    max_fd = float(np.sqrt(pdist(verts, "sqeuclidean").max()))
    dirs = np.concatenate([fibonacci_hemisphere(n_directions), normals])
    proj = verts @ dirs.T
    widths = proj.max(axis=0) - proj.min(axis=0)
    best = dirs[np.argsort(widths, kind="stable")[:REFINE_STARTS]]
    min_fd = float(min(widths.min(), min(_refine_width(verts, u) for u in best), max_fd))
    return FeretPair(max(min_fd, 0.0), max_fd)


def shape_feret(shape: VoxelShape, n_directions: int = DEFAULT_DIRECTIONS) -> FeretPair:
    return feret_oracle(shape.surface_coords(), n_directions)


# -- datasets -----------------------------------------------------------------


@dataclass
class Dataset:
    train: list[ShapeSample]
    val: list[ShapeSample]
    test: list[ShapeSample]
    meta: dict

    def splits(self) -> dict[str, list[ShapeSample]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    @property
    def samples(self) -> list[ShapeSample]:
        return sorted(self.train + self.val + self.test, key=lambda s: s.index)


def _random_ellipsoid(stream: RngStream, grid) -> VoxelShape:
    g = min(grid)
    for _ in range(20):
        axes = 2.5 + stream.uniforms(3) * (0.42 * g - 2.5)
        angles = stream.uniforms(3) * np.array([2 * math.pi, math.pi, 2 * math.pi]) - np.array([math.pi, math.pi / 2, math.pi])
        try:
            return generate_ellipsoid(stream, axes, angles, grid)
        except ShapeError:
            continue
    raise ShapeError("could not place a random ellipsoid")


def _min_extent(shape: VoxelShape) -> int:
    idx = shape.indices()
    return int((idx.max(axis=0) - idx.min(axis=0) + 1).min())


def make_base_shape(root: RngStream, index: int, grid, min_extent: int = 8) -> tuple[str, VoxelShape]:
    """Deterministic isotropic shape number ``index`` drawn from ``root.split(index)``.

    Even indices are ellipsoids, odd ones blobs.  Shapes narrower than
    ``min_extent`` voxels along any axis are redrawn, so slice dropping with a
    factor up to ``min_extent`` never empties them.
    """
    stream = root.split(index)
    kind = "ellipsoid" if index % 2 == 0 else "blob"
    for _ in range(50):
        if kind == "ellipsoid":
            shape = _random_ellipsoid(stream, grid)
        else:
            shape = generate_blob(stream, grid, smoothness=0.5 + 1.5 * stream.uniforms(1)[0])
        if _min_extent(shape) >= min_extent:
            return kind, shape
    raise ShapeError(f"could not draw shape {index} with extent >= {min_extent}")


def _make_sample(args) -> ShapeSample:
    seed, stream_id, index, grid, factor, axis, n_directions = args
    kind, base = make_base_shape(RngStream(seed, 0, stream_id), index, grid)
    target = shape_feret(base, n_directions)
    return ShapeSample(simulate_anisotropy(base, factor, axis), target, kind, index)


def split_sizes(n: int, fractions) -> tuple[int, int, int]:
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or not math.isclose(f.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train = int(round(n * f[0]))
    n_val = int(round(n * f[1]))
    return n_train, n_val, n - n_train - n_val


def build_dataset(
    stream: RngStream,
    n: int,
    anisotropy: int = 1,
    axis: int = 0,
    split=(0.7, 0.15, 0.15),
    grid=(32, 32, 32),
    n_directions: int = DEFAULT_DIRECTIONS,
    jobs: int = 1,
) -> Dataset:
    """Synthetic Feret-regression dataset.

    Targets come from the undegraded shapes; the stored shapes are degraded by
    ``anisotropy`` along ``axis``.  Shapes and the split depend only on the
    stream seed, so targets are identical across anisotropy factors.
    """
    if n < 10:
        raise ValueError("dataset needs at least 10 shapes")
    grid = tuple(int(g) for g in grid)
    sizes = split_sizes(n, split)
    work = [(stream.seed, stream.stream, i, grid, int(anisotropy), axis, n_directions) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            samples = list(pool.map(_make_sample, work, chunksize=16))
    else:
        samples = [_make_sample(w) for w in work]
    order = np.argsort(stream.uniforms(n), kind="stable")
    parts = np.split(order, [sizes[0], sizes[0] + sizes[1]])
    train, val, test = ([samples[i] for i in part] for part in parts)
    spacing = list(samples[0].shape.spacing)
    meta = {
        "format_version": SAMPLE_VERSION,
        "seed": stream.seed,
        "stream": stream.stream,
        "n": n,
        "counts": {"train": len(train), "val": len(val), "test": len(test)},
        "anisotropy": int(anisotropy),
        "axis": axis,
        "grid": list(grid),
        "field_of_view": float(max(grid)),
        "spacing": spacing,
        "n_directions": n_directions,
        "splits": {k: [int(i) for i in p] for k, p in zip(("train", "val", "test"), parts)},
        "kinds": [s.kind for s in samples],
    }
    return Dataset(train, val, test, meta)


def encode_sample(sample: ShapeSample) -> bytes:
    occ = sample.shape.occupancy
    header = _HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, *occ.shape, *sample.shape.spacing)
    bits = np.packbits(occ.ravel(order="C"), bitorder="little").tobytes()
    return header + bits + _TARGETS.pack(sample.target.min_fd, sample.target.max_fd)


def decode_sample(data: bytes, kind: str = "ellipsoid", index: int = 0) -> ShapeSample:
    magic, version, *rest = _HEADER.unpack_from(data, 0)
    if magic != SAMPLE_MAGIC or version != SAMPLE_VERSION:
        raise ShapeError(f"not a version-{SAMPLE_VERSION} sample file")
    dims, spacing = tuple(rest[:3]), tuple(rest[3:])
    n = int(np.prod(dims))
    nbytes = (n + 7) // 8
    expected = _HEADER.size + nbytes + _TARGETS.size
    if len(data) != expected:
        raise ShapeError(f"sample file has {len(data)} bytes, expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=_HEADER.size)
    occ = np.unpackbits(raw, count=n, bitorder="little").astype(bool).reshape(dims)
    min_fd, max_fd = _TARGETS.unpack_from(data, _HEADER.size + nbytes)
    return ShapeSample(VoxelShape(occ, spacing), FeretPair(min_fd, max_fd), kind, index)


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        (directory / f"sample_{s.index:05d}.bin").write_bytes(encode_sample(s))
    (directory / "meta.json").write_text(json.dumps(dataset.meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    kinds = meta["kinds"]
    parts = {}
    for name, idx in meta["splits"].items():
        parts[name] = [
            decode_sample((directory / f"sample_{i:05d}.bin").read_bytes(), kinds[i], i) for i in idx
        ]
    return Dataset(parts["train"], parts["val"], parts["test"], meta)
