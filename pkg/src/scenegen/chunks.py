"""Quad-chunk sampling from scene occupancy grids.

A quad-chunk is a ``(2s, h, 2s)`` window of the scene split into four
``(s, h, s)`` chunks, where ``s`` is the chunk side (50 at paper scale, 32 by
default here). Slot order is z0 = (low x, low z), z1 = (low x, high z),
z2 = (high x, low z), z3 = (high x, high z), i.e. rows run along x and
columns along z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import OccupancyGrid, column_heights

DEFAULT_CHUNK = 32
PAPER_CHUNK = 50

# slot -> (row offset along x, column offset along z)
SLOT_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass
class SampleMaps:
    alpha: np.ndarray
    heightmap: np.ndarray
    window_sum: np.ndarray
    depth_dev: np.ndarray
    valid: np.ndarray
    kernel: int


@dataclass
class ChunkSample:
    origin: tuple[int, int]
    occ: np.ndarray  # (s, h_vox, s) bool
    h_vox: int

    @property
    def size(self) -> int:
        return self.occ.shape[0]


@dataclass
class QuadChunk:
    origin: tuple[int, int]
    chunks: list[ChunkSample]
    h_vox: int
    scene: int = 0

    @property
    def occ(self) -> np.ndarray:
        """The full ``(2s, h_vox, 2s)`` window reassembled from the four slots."""
        s = self.chunks[0].size
        out = np.zeros((2 * s, self.h_vox, 2 * s), dtype=bool)
        for (a, b), ch in zip(SLOT_OFFSETS, self.chunks):
            out[a * s:(a + 1) * s, :ch.h_vox, b * s:(b + 1) * s] = ch.occ
        return out


@dataclass
class QueryBatch:
    coords_vox: np.ndarray
    coords_norm: np.ndarray
    occ_labels: np.ndarray
    d: tuple[float, float, float]


def _box_sum(a: np.ndarray, k: int) -> np.ndarray:
    """Sum of every ``k x k`` window, indexed by the window's low corner."""
    c = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=np.float64 if a.dtype.kind == "f" else np.int64)
    c[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def compute_sample_maps(grid: OccupancyGrid, kernel: int = 2 * DEFAULT_CHUNK,
                        depth_threshold: float = 2.5) -> SampleMaps:
    """Alpha, height, and depth-deviation maps plus the resulting valid quad locations.

    Map index ``(x, z)`` refers to the window ``[x, x+kernel) x [z, z+kernel)``.
    """
    nx, _, nz = grid.dims
    if nx < kernel or nz < kernel:
        raise ValueError(f"grid footprint {nx}x{nz} is smaller than the {kernel}x{kernel} kernel")
    alpha = grid.data.any(axis=1)
    heights = column_heights(grid.data)
    sums = _box_sum(alpha.astype(np.int64), kernel)
    hsum = _box_sum(heights.astype(np.float64), kernel)
    m, n = sums.shape
    window_sum = np.zeros((nx, nz), dtype=np.int64)
    window_sum[:m, :n] = sums
    depth_dev = np.zeros((nx, nz))
    depth_dev[:m, :n] = np.abs(hsum / (kernel * kernel) - heights[:m, :n])
    valid = np.zeros((nx, nz), dtype=bool)
    valid[:m, :n] = (sums == kernel * kernel) & (depth_dev[:m, :n] >= depth_threshold)
    return SampleMaps(alpha, heights, window_sum, depth_dev, valid, kernel)


def valid_quad_centers(maps: SampleMaps) -> np.ndarray:
    """Quad centers ``(i, k)`` for every valid map location."""
    xs, zs = np.nonzero(maps.valid)
    half = maps.kernel // 2
    return np.stack([xs + half, zs + half], axis=1)


def farthest_point_sampling(candidates: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    pts = np.asarray(candidates, dtype=np.float64)
    m = len(pts)
    if k > m:
        raise ValueError(f"cannot select {k} points from {m} candidates")
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if not 0 <= start < m:
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    dist = np.linalg.norm(pts - pts[start], axis=1)
    dist[start] = -np.inf  # never re-pick, even among duplicate positions
    for j in range(1, k):
        nxt = int(np.argmax(dist))
        selected[j] = nxt
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
        dist[nxt] = -np.inf
    return selected


def chunk_height(occ: np.ndarray) -> int:
    """Height of the tallest occupied voxel (one past its index)."""
    rows = np.nonzero(occ.any(axis=(0, 2)))[0]
    return int(rows[-1]) + 1 if len(rows) else 0


def extract_quad_chunk(grid: OccupancyGrid, i: int, k: int, chunk: int = DEFAULT_CHUNK,
                       scene: int = 0) -> QuadChunk:
    nx, _, nz = grid.dims
    if i - chunk < 0 or k - chunk < 0 or i + chunk > nx or k + chunk > nz:
        raise ValueError(f"quad window at ({i}, {k}) with half-size {chunk} leaves the {nx}x{nz} grid")
    window = grid.data[i - chunk:i + chunk, :, k - chunk:k + chunk]
    chunks = []
    for a, b in SLOT_OFFSETS:
        sub = window[a * chunk:(a + 1) * chunk, :, b * chunk:(b + 1) * chunk]
        h = chunk_height(sub)
        center = (i - chunk + a * chunk + chunk // 2, k - chunk + b * chunk + chunk // 2)
        chunks.append(ChunkSample(center, np.ascontiguousarray(sub[:, :h, :]), h))
    return QuadChunk((i, k), chunks, max(c.h_vox for c in chunks), scene)


def normalize_coords(r_vox: np.ndarray, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError(f"normalization scale must be positive, got {d}")
    return 2.0 * (np.asarray(r_vox, dtype=np.float64) / d) - 1.0


def denormalize_coords(r: np.ndarray, d) -> np.ndarray:
    return np.asarray(d, dtype=np.float64) * (np.asarray(r, dtype=np.float64) + 1.0) / 2.0


def chunk_height_target(h_vox: float, chunk: int = PAPER_CHUNK) -> float:
    if h_vox < 0:
        raise ValueError("height must be non-negative")
    return 2.0 * (h_vox / chunk) - 1.0


def height_from_target(h: float, chunk: int, max_height: int | None = None) -> int:
    """Voxel height for a normalized height prediction, clamped to ``[1, max_height]``."""
    v = int(round(chunk * (float(h) + 1.0) / 2.0))
    hi = max_height if max_height is not None else max(v, 1)
    return int(min(max(v, 1), hi))


def lookup_occupancy(occ: np.ndarray, coords_vox: np.ndarray) -> np.ndarray:
    """Occupancy of the voxel containing each point; points outside the volume are empty."""
    idx = np.floor(coords_vox).astype(np.int64)
    shape = np.array(occ.shape)
    inside = np.all((idx >= 0) & (idx < shape), axis=1)
    out = np.zeros(len(coords_vox), dtype=bool)
    ii = idx[inside]
    out[inside] = occ[ii[:, 0], ii[:, 1], ii[:, 2]]
    return out


def surface_voxels(occ: np.ndarray) -> np.ndarray:
    """Indices of occupied voxels with an empty 6-neighbour inside the chunk or above it."""
    padded = np.pad(occ, 1, mode="edge")
    # above the chunk is always empty
    padded[:, -1, :] = False
    core = padded[1:-1, 1:-1, 1:-1]
    exposed = np.zeros_like(core)
    for axis in range(3):
        for step in (-1, 1):
            exposed |= ~np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(core & exposed)


def _near_surface(occ: np.ndarray, n: int, rng: np.random.Generator, sigma: float = 1.0,
                  surf: np.ndarray | None = None) -> np.ndarray:
    surf = surface_voxels(occ) if surf is None else surf
    if len(surf) == 0:
        return None
    pick = surf[rng.integers(0, len(surf), size=n)]
    return pick + 0.5 + rng.normal(0.0, sigma, size=(n, 3))


def _clip_to_chunk(pts: np.ndarray, size: int, height: float) -> np.ndarray:
    eps = 1e-6
    pts[:, 0] = np.clip(pts[:, 0], 0.0, size - eps)
    pts[:, 2] = np.clip(pts[:, 2], 0.0, size - eps)
    pts[:, 1] = np.clip(pts[:, 1], 0.0, height - eps)
    return pts


def sample_query_points(chunk: ChunkSample, n: int = 4096, rng: np.random.Generator | None = None,
                        sigma: float = 1.0, surface: np.ndarray | None = None) -> QueryBatch:
    """Half uniform over the chunk volume, half jittered around surface voxels.

    ``surface`` may carry precomputed :func:`surface_voxels` for the chunk.
    """
    if n <= 0:
        raise ValueError("query count must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    s, h = chunk.size, max(chunk.h_vox, 1)
    n_surf = n // 2
    near = _near_surface(chunk.occ, n_surf, rng, sigma, surface)
    if near is None:
        n_surf = 0
        near = np.zeros((0, 3))
    uniform = rng.random((n - n_surf, 3)) * np.array([s, h, s])
    pts = _clip_to_chunk(np.concatenate([uniform, near]), s, h)
    return _batch(chunk, pts)


def _batch(chunk: ChunkSample, pts: np.ndarray) -> QueryBatch:
    d = (float(chunk.size),) * 3
    return QueryBatch(pts, normalize_coords(pts, d), lookup_occupancy(chunk.occ, pts), d)


def eval_query_split(chunk: ChunkSample, rng: np.random.Generator, n: int = 2000,
                     sigma: float = 1.0) -> QueryBatch:
    """Evaluation queries: n/4 in occupied voxels, n/4 in empty voxels, n/2 near the surface.

    Empty voxels are drawn from the chunk volume extended one voxel above
    ``h_vox`` so flat solid chunks still have an empty region.
    """
    s, h = chunk.size, chunk.h_vox
    n_occ = n // 4
    n_emp = n // 4
    n_near = n - n_occ - n_emp
    vol = np.zeros((s, h + 1, s), dtype=bool)
    vol[:, :h, :] = chunk.occ
    occ_idx = np.argwhere(vol)
    emp_idx = np.argwhere(~vol)
    parts = []
    if len(occ_idx):
        parts.append(occ_idx[rng.integers(0, len(occ_idx), n_occ)] + rng.random((n_occ, 3)))
    else:
        n_emp += n_occ
    parts.append(emp_idx[rng.integers(0, len(emp_idx), n_emp)] + rng.random((n_emp, 3)))
    near = _near_surface(chunk.occ, n_near, rng, sigma)
    if near is None:
        near = emp_idx[rng.integers(0, len(emp_idx), n_near)] + rng.random((n_near, 3))
    parts.append(_clip_to_chunk(near, s, h + 1))
    return _batch(chunk, np.concatenate(parts))


def sample_quads(grid: OccupancyGrid, count: int, chunk: int = DEFAULT_CHUNK, scene: int = 0,
                 depth_threshold: float = 2.5, start: int = 0) -> list[QuadChunk]:
    """Select ``count`` quads by farthest point sampling over valid locations."""
    maps = compute_sample_maps(grid, 2 * chunk, depth_threshold)
    centers = valid_quad_centers(maps)
    if len(centers) == 0:
        raise ValueError("scene has no valid quad-chunk locations")
    count = min(count, len(centers))
    picks = farthest_point_sampling(centers, count, start=min(start, len(centers) - 1))
    return [extract_quad_chunk(grid, int(centers[p][0]), int(centers[p][1]), chunk, scene) for p in picks]
