"""Occupancy grids and the meshes extracted from them.

Coordinates are in voxel units: voxel ``(x, y, z)`` covers the unit cube
``[x, x+1) x [y, y+1) x [z, z+1)`` and ``y`` is the height axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.measure import marching_cubes as _sk_marching_cubes

log = logging.getLogger(__name__)

GROUND_THICKNESS = 5


class WatertightError(ValueError):
    pass


@dataclass
class OccupancyGrid:
    """Dense boolean voxel volume indexed ``data[x, y, z]``."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ValueError(f"occupancy must be a non-empty 3D array, got shape {self.data.shape}")

    @classmethod
    def empty(cls, dims) -> "OccupancyGrid":
        return cls(np.zeros(tuple(int(d) for d in dims), dtype=bool))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.data, other.data))


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_counts(self) -> np.ndarray:
        """Number of triangles incident on each undirected edge."""
        if self.is_empty:
            return np.zeros(0, dtype=np.int64)
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        counts = self.edge_counts()
        return counts.size > 0 and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edge_counts()) + len(self.triangles)


# --------------------------------------------------------------------------
# voxelization


def _parity_along_last_axis(v2, tris, centers_u, centers_v, centers_w):
    """Ray-parity occupancy for rays cast along the third coordinate.

    ``v2`` holds vertices already permuted so the ray axis is last. Returns a
    boolean array of shape (len(centers_u), len(centers_v), len(centers_w)).
    """
    nu, nv, nw = len(centers_u), len(centers_v), len(centers_w)
    crossings = np.zeros((nu, nv, nw + 1), dtype=np.int32)
    if len(tris) == 0:
        return np.zeros((nu, nv, nw), dtype=bool)
    du = centers_u[1] - centers_u[0] if nu > 1 else 1.0
    dv = centers_v[1] - centers_v[0] if nv > 1 else 1.0
    dw = centers_w[1] - centers_w[0] if nw > 1 else 1.0

    p = v2[tris]  # (T, 3 verts, 3 coords)
    # orient every projected triangle counter-clockwise
    cross_z = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    keep = cross_z != 0
    p = p[keep]
    flip = cross_z[keep] < 0
    p[flip] = p[flip][:, [0, 2, 1]]
    if len(p) == 0:
        return np.zeros((nu, nv, nw), dtype=bool)

    lo_u = np.clip(np.ceil((p[:, :, 0].min(1) - centers_u[0]) / du), 0, nu).astype(np.int64)
    hi_u = np.clip(np.floor((p[:, :, 0].max(1) - centers_u[0]) / du) + 1, 0, nu).astype(np.int64)
    lo_v = np.clip(np.ceil((p[:, :, 1].min(1) - centers_v[0]) / dv), 0, nv).astype(np.int64)
    hi_v = np.clip(np.floor((p[:, :, 1].max(1) - centers_v[0]) / dv) + 1, 0, nv).astype(np.int64)
    cu = np.maximum(hi_u - lo_u, 0)
    cv = np.maximum(hi_v - lo_v, 0)
    npix = cu * cv
    # process triangles in batches so the (triangle, pixel) pair list stays bounded
    order = np.arange(len(p))
    limit = 4_000_000
    start = 0
    cum = np.cumsum(npix)
    while start < len(order):
        base = cum[start - 1] if start > 0 else 0
        stop = int(np.searchsorted(cum, base + limit, side="right"))
        stop = max(stop, start + 1)
        sel = order[start:stop]
        start = stop
        counts = npix[sel]
        if counts.sum() == 0:
            continue
        tri_idx = np.repeat(sel, counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        iu = lo_u[tri_idx] + local // np.maximum(cv[tri_idx], 1)
        iv = lo_v[tri_idx] + local % np.maximum(cv[tri_idx], 1)
        qx = centers_u[iu]
        qy = centers_v[iv]
        tp = p[tri_idx]
        inside = np.ones(len(tri_idx), dtype=bool)
        w = np.empty((3, len(tri_idx)))
        for k in range(3):
            a = tp[:, (k + 1) % 3]
            b = tp[:, (k + 2) % 3]
            ex = b[:, 0] - a[:, 0]
            ey = b[:, 1] - a[:, 1]
            wk = ex * (qy - a[:, 1]) - ey * (qx - a[:, 0])
            # top-left fill rule so a point on a shared edge belongs to exactly one triangle
            top_left = (ey < 0) | ((ey == 0) & (ex < 0))
            inside &= (wk > 0) | ((wk == 0) & top_left)
            w[k] = wk
        if not inside.any():
            continue
        w = w[:, inside]
        tp = tp[inside]
        iu, iv = iu[inside], iv[inside]
        total = w.sum(0)
        depth = (w[0] * tp[:, 0, 2] + w[1] * tp[:, 1, 2] + w[2] * tp[:, 2, 2]) / total
        iw = np.clip(np.ceil((depth - centers_w[0]) / dw), 0, nw).astype(np.int64)
        np.add.at(crossings, (iu, iv, iw), 1)
    return (np.cumsum(crossings, axis=2)[:, :, :nw] % 2).astype(bool)


def voxelize_mesh(mesh: Mesh, resolution: int, *, origin=None, pitch=None, dims=None,
                  check_watertight: bool = True) -> OccupancyGrid:
    """Voxelize a closed mesh: a voxel is occupied iff its center is inside by ray parity.

    By default the grid spans the mesh bounding box with ``resolution`` voxels
    along the longest axis. ``origin``/``pitch``/``dims`` pin an explicit lattice.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if mesh.is_empty:
        return OccupancyGrid.empty(dims if dims is not None else (resolution,) * 3)
    if check_watertight and not mesh.is_watertight():
        raise WatertightError("mesh is not watertight: some edge is not shared by exactly two triangles")
    v = mesh.vertices
    lo, hi = v.min(0), v.max(0)
    if pitch is None:
        pitch = float((hi - lo).max()) / resolution
        if pitch <= 0:
            return OccupancyGrid.empty((resolution,) * 3)
    if origin is None:
        origin = lo
    origin = np.asarray(origin, dtype=np.float64)
    if dims is None:
        dims = np.maximum(np.ceil((hi - origin) / pitch - 1e-9).astype(int), 1)
    dims = tuple(int(d) for d in dims)
    centers = [origin[a] + (np.arange(dims[a]) + 0.5) * pitch for a in range(3)]

    votes = []
    for ray_axis in (2, 0, 1):
        axes = [a for a in range(3) if a != ray_axis] + [ray_axis]
        occ = _parity_along_last_axis(v[:, axes], mesh.triangles, *(centers[a] for a in axes))
        votes.append(np.moveaxis(occ, [0, 1, 2], axes))
    total = votes[0].astype(np.int8) + votes[1] + votes[2]
    disagree = int(((total != 0) & (total != 3)).sum())
    if disagree > max(1, 0.01 * int((total >= 2).sum())):
        raise WatertightError(f"ray parity disagrees between directions at {disagree} voxels")
    return OccupancyGrid(total >= 2)


# --------------------------------------------------------------------------
# solid processing


def flood_fill_solid(grid: OccupancyGrid) -> OccupancyGrid:
    """Fill every empty region that has no 6-connected path to the grid boundary."""
    return OccupancyGrid(ndimage.binary_fill_holes(grid.data))


def detect_ground_level(grid: OccupancyGrid) -> int:
    """Lowest y at which at least half of the (x, z) columns have reached their top."""
    heights = column_heights(grid.data)
    covered = np.array([(heights <= y).mean() for y in range(grid.dims[1] + 1)])
    return int(np.argmax(covered >= 0.5))


def fix_ground(grid: OccupancyGrid, ground_level: int | None = None,
               thickness: int = GROUND_THICKNESS) -> OccupancyGrid:
    """Occupy the ``thickness`` layers directly below ``ground_level`` in every column."""
    if ground_level is None:
        ground_level = detect_ground_level(grid)
    if ground_level < thickness:
        raise ValueError(f"ground_level {ground_level} leaves no room for {thickness} ground layers")
    if ground_level > grid.dims[1]:
        raise ValueError(f"ground_level {ground_level} exceeds grid height {grid.dims[1]}")
    data = grid.data.copy()
    data[:, ground_level - thickness:ground_level, :] = True
    return OccupancyGrid(data)


def column_heights(data: np.ndarray) -> np.ndarray:
    """Index one past the highest occupied voxel per (x, z) column; 0 for empty columns."""
    ny = data.shape[1]
    occupied = data.any(axis=1)
    top = ny - np.argmax(data[:, ::-1, :], axis=1)
    return np.where(occupied, top, 0)


# --------------------------------------------------------------------------
# surface extraction


def marching_cubes(field: np.ndarray, level: float = 0.5, pad: bool = True) -> Mesh:
    """Extract the ``level`` isosurface of a scalar volume sampled at voxel centers.

    The volume is padded with one layer of ``-inf``-like background so closed
    surfaces come out even where the solid touches the volume border.
    Triangles are wound so normals point towards lower field values.
    """
    field = np.asarray(field, dtype=np.float32)
    if not np.all(np.isfinite(field)):
        raise ValueError("field must be finite")
    if pad:
        background = min(float(field.min()), level) - 1.0
        field = np.pad(field, 1, constant_values=background)
    if field.size == 0 or not (field.max() > level and field.min() < level):
        return Mesh()
    verts, faces, _, _ = _sk_marching_cubes(field, level=level, method="lorensen")
    verts = verts.astype(np.float64) + (0.5 - 1.0 if pad else 0.5)
    faces = faces[:, [0, 2, 1]]
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    return Mesh(verts, faces)


def sample_surface_points(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform sampling of ``n`` points on the mesh surface."""
    if n == 0:
        return np.zeros((0, 3))
    if mesh.is_empty:
        raise ValueError("cannot sample points from an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random((n, 2))
    flip = u.sum(1) > 1
    u[flip] = 1 - u[flip]
    tri = mesh.vertices[mesh.triangles[idx]]
    return tri[:, 0] + u[:, :1] * (tri[:, 1] - tri[:, 0]) + u[:, 1:] * (tri[:, 2] - tri[:, 0])
