"""Voxel-grid storage: dense grids, VM-factorized grids, and packed 3D bitmaps.

Lattice nodes live at integer grid coordinates; node (i, j, k) with
0 <= i < Nx maps affinely onto the bounding box so that node 0 sits on
bbox_min and node N-1 on bbox_max.  The canonical flat node index is
``((z * Ny) + y) * Nx + x`` (x fastest), which is also the byte order of
tensor and bitmap files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryMismatchError, InvalidInputError

# The three factor mode pairs of a VM grid: (plane axes, line axis) using
# axis ids 0=x, 1=y, 2=z.  Plane arrays are indexed [rank, second, first].
VM_MODE_PAIRS = (((0, 1), 2), ((0, 2), 1), ((1, 2), 0))


@dataclass(frozen=True)
class GridGeometry:
    """Axis-aligned lattice over a world-space bounding box."""

    resolution: tuple[int, int, int]
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]

    def __post_init__(self):
        res = tuple(int(n) for n in self.resolution)
        lo = tuple(float(v) for v in self.bbox_min)
        hi = tuple(float(v) for v in self.bbox_max)
        if len(res) != 3 or any(n < 2 for n in res):
            raise InvalidInputError(f"resolution must be >= 2 per axis, got {res}")
        if any(h <= l for l, h in zip(lo, hi)):
            raise InvalidInputError(f"bbox_max must exceed bbox_min, got {lo} .. {hi}")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)

    @property
    def node_count(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def voxel_size(self) -> np.ndarray:
        """Per-axis node spacing (world units)."""
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        hi = np.asarray(self.bbox_max, dtype=np.float64)
        n = np.asarray(self.resolution, dtype=np.float64)
        return (hi - lo) / (n - 1.0)

    @property
    def min_voxel_edge(self) -> float:
        return float(self.voxel_size.min())

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        """World coordinates -> continuous grid coordinates (node units)."""
        pts = np.asarray(points, dtype=np.float64)
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        return (pts - lo) / self.voxel_size

    def grid_to_world(self, coords: np.ndarray) -> np.ndarray:
        g = np.asarray(coords, dtype=np.float64)
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        return lo + g * self.voxel_size

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean per point: inside the closed bounding box."""
        pts = np.asarray(points, dtype=np.float64)
        lo = np.asarray(self.bbox_min, dtype=np.float64)
        hi = np.asarray(self.bbox_max, dtype=np.float64)
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def node_positions(self) -> np.ndarray:
        """World positions of all nodes, flat-index order, shape (N, 3)."""
        nx, ny, nz = self.resolution
        zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        coords = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
        return self.grid_to_world(coords)

    def encode_index(self, x, y, z):
        nx, ny, _ = self.resolution
        return ((np.asarray(z) * ny) + np.asarray(y)) * nx + np.asarray(x)

    def decode_index(self, idx):
        nx, ny, _ = self.resolution
        idx = np.asarray(idx)
        x = idx % nx
        y = (idx // nx) % ny
        z = idx // (nx * ny)
        return x, y, z


def _require_same_geometry(a, b):
    if a.geometry != b.geometry:
        raise GeometryMismatchError(
            f"geometry mismatch: {a.geometry.resolution} vs {b.geometry.resolution}"
        )


class DenseGrid:
    """C channels per lattice node, stored as a (Nz, Ny, Nx, C) array whose
    C-contiguous layout equals the canonical flat node order."""

    def __init__(self, geometry: GridGeometry, values: np.ndarray):
        nx, ny, nz = geometry.resolution
        values = np.ascontiguousarray(values)
        if values.ndim != 4 or values.shape[:3] != (nz, ny, nx):
            raise InvalidInputError(
                f"values shape {values.shape} does not match resolution {geometry.resolution}"
            )
        if not np.isfinite(values).all():
            raise InvalidInputError("grid values must be finite")
        self.geometry = geometry
        self.values = values

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @classmethod
    def zeros(cls, geometry, channels, dtype=np.float32):
        nx, ny, nz = geometry.resolution
        return cls(geometry, np.zeros((nz, ny, nx, channels), dtype=dtype))

    @classmethod
    def full(cls, geometry, channels, value, dtype=np.float32):
        nx, ny, nz = geometry.resolution
        return cls(geometry, np.full((nz, ny, nx, channels), value, dtype=dtype))

    def flat_values(self) -> np.ndarray:
        """(node_count, C) view in canonical flat node order."""
        return self.values.reshape(self.geometry.node_count, self.channels)

    def copy(self) -> "DenseGrid":
        return DenseGrid(self.geometry, self.values.copy())


class VMGrid:
    """Vector-matrix factorized grid.

    Per mode pair m (see VM_MODE_PAIRS) there are rank[m] components, each a
    plane factor over the two plane axes and a line factor over the third
    axis.  Channel values mix all components linearly:

        value[z, y, x, c] = sum_m sum_r mix[c, off_m + r]
                            * plane_m[r, second, first] * line_m[r, axis]
    """

    def __init__(self, geometry, planes, lines, mix):
        self.geometry = geometry
        nx, ny, nz = geometry.resolution
        dims = (nx, ny, nz)
        self.planes = [np.ascontiguousarray(p, dtype=np.float64) for p in planes]
        self.lines = [np.ascontiguousarray(l, dtype=np.float64) for l in lines]
        self.mix = np.ascontiguousarray(mix, dtype=np.float64)
        if len(self.planes) != 3 or len(self.lines) != 3:
            raise InvalidInputError("VMGrid needs one plane and one line factor set per mode pair")
        ranks = []
        for m, ((a0, a1), lax) in enumerate(VM_MODE_PAIRS):
            p, l = self.planes[m], self.lines[m]
            if p.ndim != 3 or p.shape[1:] != (dims[a1], dims[a0]):
                raise InvalidInputError(f"plane {m} shape {p.shape} invalid for {geometry.resolution}")
            if l.ndim != 2 or l.shape[1] != dims[lax] or l.shape[0] != p.shape[0]:
                raise InvalidInputError(f"line {m} shape {l.shape} invalid")
            ranks.append(p.shape[0])
        self.ranks = tuple(ranks)
        if self.mix.ndim != 2 or self.mix.shape[1] != sum(ranks):
            raise InvalidInputError(f"mix shape {self.mix.shape} does not match total rank {sum(ranks)}")

    @property
    def channels(self) -> int:
        return self.mix.shape[0]

    @classmethod
    def random(cls, geometry, channels, ranks=(16, 16, 16), scale=0.1, rng=None):
        rng = np.random.default_rng(rng)
        nx, ny, nz = geometry.resolution
        dims = (nx, ny, nz)
        planes, lines = [], []
        for m, ((a0, a1), lax) in enumerate(VM_MODE_PAIRS):
            planes.append(scale * rng.standard_normal((ranks[m], dims[a1], dims[a0])))
            lines.append(scale * rng.standard_normal((ranks[m], dims[lax])))
        mix = scale * rng.standard_normal((channels, sum(ranks)))
        return cls(geometry, planes, lines, mix)


class Bitmap3D:
    """One bit per lattice node; file form is packed little-endian bit order
    over the canonical flat node index, padded to a byte boundary."""

    def __init__(self, geometry: GridGeometry, bits: np.ndarray | None = None):
        nx, ny, nz = geometry.resolution
        if bits is None:
            bits = np.zeros((nz, ny, nx), dtype=bool)
        bits = np.ascontiguousarray(bits, dtype=bool)
        if bits.shape != (nz, ny, nx):
            raise InvalidInputError(f"bits shape {bits.shape} does not match {geometry.resolution}")
        self.geometry = geometry
        self.bits = bits

    def popcount(self) -> int:
        return int(self.bits.sum())

    def copy(self) -> "Bitmap3D":
        return Bitmap3D(self.geometry, self.bits.copy())

    def complement(self) -> "Bitmap3D":
        return Bitmap3D(self.geometry, ~self.bits)

    def pack(self) -> bytes:
        return np.packbits(self.bits.reshape(-1), bitorder="little").tobytes()

    @classmethod
    def unpack(cls, geometry: GridGeometry, raw: bytes) -> "Bitmap3D":
        n = geometry.node_count
        expect = (n + 7) // 8
        if len(raw) != expect:
            raise InvalidInputError(f"bitmap payload is {len(raw)} bytes, expected {expect}")
        flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little")
        nx, ny, nz = geometry.resolution
        return cls(geometry, flat.astype(bool).reshape(nz, ny, nx))

    def __eq__(self, other):
        return (
            isinstance(other, Bitmap3D)
            and self.geometry == other.geometry
            and np.array_equal(self.bits, other.bits)
        )


def bitmap_union(a: Bitmap3D, b: Bitmap3D) -> Bitmap3D:
    _require_same_geometry(a, b)
    return Bitmap3D(a.geometry, a.bits | b.bits)


def bitmap_intersect(a: Bitmap3D, b: Bitmap3D) -> Bitmap3D:
    _require_same_geometry(a, b)
    return Bitmap3D(a.geometry, a.bits & b.bits)


def bitmap_subtract(a: Bitmap3D, b: Bitmap3D) -> Bitmap3D:
    """a minus b, i.e. ``a AND (a AND b)'``."""
    _require_same_geometry(a, b)
    return Bitmap3D(a.geometry, a.bits & ~(a.bits & b.bits))


def _check_points(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise InvalidInputError(f"points must have a trailing dimension of 3, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise InvalidInputError("points must be finite")
    return pts


_LATTICE_SNAP = 1e-9


def cell_and_frac(geometry: GridGeometry, points: np.ndarray):
    """Lower cell corner (int, clipped to valid cells) and in-cell fraction.

    Points on the upper boundary land in the last cell with fraction 1.
    Fractions within 1e-9 of a lattice plane snap onto it, so integer-voxel
    resampling (translation edits) reads node values exactly.
    """
    g = geometry.world_to_grid(_check_points(points))
    n = np.asarray(geometry.resolution, dtype=np.int64)
    g = np.where(np.abs(g - np.rint(g)) < _LATTICE_SNAP, np.rint(g), g)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, n - 2)
    frac = np.clip(g - i0, 0.0, 1.0)
    return i0, frac


def corner_indices_weights(geometry: GridGeometry, points: np.ndarray):
    """Flat node indices (N, 8) and trilinear weights (N, 8) of the 8 cell
    corners around each point.  Corner k uses offsets (k&1, k>>1&1, k>>2&1)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    i0, f = cell_and_frac(geometry, pts)
    npts = pts.shape[0]
    idx = np.empty((npts, 8), dtype=np.int64)
    w = np.empty((npts, 8), dtype=np.float64)
    wx = (1.0 - f[:, 0], f[:, 0])
    wy = (1.0 - f[:, 1], f[:, 1])
    wz = (1.0 - f[:, 2], f[:, 2])
    for k in range(8):
        dx, dy, dz = k & 1, (k >> 1) & 1, (k >> 2) & 1
        idx[:, k] = geometry.encode_index(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz)
        w[:, k] = (wx[dx] * wy[dy]) * wz[dz]
    return idx, w


def gather_corners(flat_values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted 8-corner gather: sum_k w[:, k] * flat_values[idx[:, k]].

    Accumulates corner 0 first then adds corners 1..7 in order, matching the
    scalar reference interpolator bit for bit."""
    out = w[:, 0, None] * flat_values[idx[:, 0]]
    tmp = np.empty_like(out)
    for k in range(1, 8):
        np.multiply(w[:, k, None], flat_values[idx[:, k]], out=tmp)
        out += tmp
    return out


def scatter_corners(node_count: int, idx: np.ndarray, w: np.ndarray,
                    upstream: np.ndarray) -> np.ndarray:
    """Deterministic transpose of gather_corners: accumulate w-weighted
    upstream rows into their 8 corner nodes.  Returns (node_count, C)."""
    channels = upstream.shape[1]
    flat_idx = idx.reshape(-1)
    out = np.empty((node_count, channels))
    tmp = np.empty(idx.shape, dtype=np.float64)
    for c in range(channels):
        np.multiply(w, upstream[:, c, None], out=tmp)
        out[:, c] = np.bincount(flat_idx, weights=tmp.reshape(-1), minlength=node_count)
    return out


def nearest_node_index(geometry: GridGeometry, points: np.ndarray) -> np.ndarray:
    """Flat index of the nearest lattice node (for bitmap lookups)."""
    g = geometry.world_to_grid(_check_points(points))
    n = np.asarray(geometry.resolution, dtype=np.int64)
    i = np.clip(np.rint(g).astype(np.int64), 0, n - 1)
    return geometry.encode_index(i[..., 0], i[..., 1], i[..., 2])


def _vm_plane_line_values(vm: VMGrid, pts: np.ndarray):
    """Per-component plane*line products at each point, shape (N, total_rank)."""
    i0, f = cell_and_frac(vm.geometry, pts)
    cols = []
    for m, ((a0, a1), lax) in enumerate(VM_MODE_PAIRS):
        p, l = vm.planes[m], vm.lines[m]
        c0, c1 = i0[:, a0], i0[:, a1]
        f0, f1 = f[:, a0], f[:, a1]
        # bilinear on the plane factor, same corner order as trilerp
        pv = (
            (p[:, c1, c0] * ((1 - f0) * (1 - f1))
             + p[:, c1, c0 + 1] * (f0 * (1 - f1)))
            + (p[:, c1 + 1, c0] * ((1 - f0) * f1)
               + p[:, c1 + 1, c0 + 1] * (f0 * f1))
        )
        cl, fl = i0[:, lax], f[:, lax]
        lv = l[:, cl] * (1 - fl) + l[:, cl + 1] * fl
        cols.append((pv * lv).T)
    return np.concatenate(cols, axis=1)


def trilerp(grid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of grid channels at world-space points.

    Accepts a single (3,) point or an (N, 3) batch; callers must keep points
    inside the bounding box (boundary inclusive).  VM grids are evaluated
    from their factors without densifying.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts2 = np.atleast_2d(pts)
    if isinstance(grid, DenseGrid):
        idx, w = corner_indices_weights(grid.geometry, pts2)
        flat = grid.flat_values().astype(np.float64, copy=False)
        out = gather_corners(flat, idx, w)
    elif isinstance(grid, VMGrid):
        comps = _vm_plane_line_values(grid, pts2)
        out = comps @ grid.mix.T
    else:
        raise InvalidInputError(f"unsupported grid type {type(grid).__name__}")
    return out[0] if single else out


def densify(vm: VMGrid) -> DenseGrid:
    """Explicit reconstruction of a VM grid as a dense grid."""
    nx, ny, nz = vm.geometry.resolution
    out = np.zeros((nz, ny, nx, vm.channels), dtype=np.float64)
    off = 0
    for m, ((a0, a1), lax) in enumerate(VM_MODE_PAIRS):
        r = vm.ranks[m]
        mix = vm.mix[:, off : off + r]
        # outer product plane x line, broadcast to (r, z, y, x)
        p, l = vm.planes[m], vm.lines[m]
        if m == 0:  # plane (y, x), line z
            comp = l[:, :, None, None] * p[:, None, :, :]
        elif m == 1:  # plane (z, x), line y
            comp = p[:, :, None, :] * l[:, None, :, None]
        else:  # plane (z, y), line x
            comp = p[:, :, :, None] * l[:, None, None, :]
        out += np.einsum("rzyx,cr->zyxc", comp, mix)
        off += r
    return DenseGrid(vm.geometry, out)


class DenseGradient:
    """Sparse gradient of trilerp w.r.t. dense node values: 8 corner nodes
    with a C-vector each."""

    def __init__(self, indices, values):
        self.indices = indices  # (8,) flat node ids
        self.values = values  # (8, C)


class VMGradient:
    """Gradient of trilerp w.r.t. VM factors, as dense arrays matching the
    factor shapes (zeros away from the touched entries)."""

    def __init__(self, planes, lines, mix):
        self.planes = planes
        self.lines = lines
        self.mix = mix


def trilerp_grad(grid, point: np.ndarray, upstream: np.ndarray):
    """Gradient of ``upstream . trilerp(grid, point)`` w.r.t. grid parameters."""
    pts = np.atleast_2d(_check_points(point))
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if up.shape[0] != grid.channels:
        raise InvalidInputError(f"upstream has {up.shape[0]} channels, grid has {grid.channels}")
    if isinstance(grid, DenseGrid):
        idx, w = corner_indices_weights(grid.geometry, pts)
        return DenseGradient(idx[0], w[0][:, None] * up[None, :])
    if isinstance(grid, VMGrid):
        return _vm_trilerp_grad(grid, pts, up)
    raise InvalidInputError(f"unsupported grid type {type(grid).__name__}")


def _vm_trilerp_grad(vm: VMGrid, pts: np.ndarray, up: np.ndarray) -> VMGradient:
    i0, f = cell_and_frac(vm.geometry, pts)
    comps = _vm_plane_line_values(vm, pts)[0]
    g_mix = np.outer(up, comps)
    # d out / d comp_j = (mix.T @ up)_j
    g_comp = vm.mix.T @ up
    g_planes = [np.zeros_like(p) for p in vm.planes]
    g_lines = [np.zeros_like(l) for l in vm.lines]
    off = 0
    for m, ((a0, a1), lax) in enumerate(VM_MODE_PAIRS):
        r = vm.ranks[m]
        p, l = vm.planes[m], vm.lines[m]
        c0, c1 = int(i0[0, a0]), int(i0[0, a1])
        f0, f1 = float(f[0, a0]), float(f[0, a1])
        cl, fl = int(i0[0, lax]), float(f[0, lax])
        pv = (
            p[:, c1, c0] * ((1 - f0) * (1 - f1))
            + p[:, c1, c0 + 1] * (f0 * (1 - f1))
            + p[:, c1 + 1, c0] * ((1 - f0) * f1)
            + p[:, c1 + 1, c0 + 1] * (f0 * f1)
        )
        lv = l[:, cl] * (1 - fl) + l[:, cl + 1] * fl
        gc = g_comp[off : off + r]
        g_planes[m][:, c1, c0] += gc * lv * ((1 - f0) * (1 - f1))
        g_planes[m][:, c1, c0 + 1] += gc * lv * (f0 * (1 - f1))
        g_planes[m][:, c1 + 1, c0] += gc * lv * ((1 - f0) * f1)
        g_planes[m][:, c1 + 1, c0 + 1] += gc * lv * (f0 * f1)
        g_lines[m][:, cl] += gc * pv * (1 - fl)
        g_lines[m][:, cl + 1] += gc * pv * fl
        off += r
    return VMGradient(g_planes, g_lines, g_mix)
