"""Procedural toy scenes: a flat ground slab plus box-shaped structures.

Styles:
    blocks  low and mid-height boxes, some stacked
    towers  thin pillars with a heavy-tailed height distribution, always
            including skyscrapers at least six chunks tall
    arches  bridges (two legs and a deck) over open space
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .chunks import DEFAULT_CHUNK, QuadChunk, compute_sample_maps, sample_quads
from .formats import write_dataset
from .voxel import GROUND_THICKNESS, OccupancyGrid, flood_fill_solid

STYLES = ("blocks", "towers", "arches")

DEFAULT_DIMS = {
    "blocks": (256, 64, 256),
    "towers": (256, 224, 256),
    "arches": (256, 64, 256),
}

TALL_FACTOR = 6
MAX_REGENERATE = 16


@dataclass
class SceneSpec:
    seed: int
    style: str
    dims: tuple[int, int, int]
    chunk: int = DEFAULT_CHUNK

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["dims"] = tuple(d["dims"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(Path(path).read_text())


def _box(data, x0, x1, y0, y1, z0, z1):
    nx, ny, nz = data.shape
    data[max(x0, 0):min(x1, nx), max(y0, 0):min(y1, ny), max(z0, 0):min(z1, nz)] = True


def _blocks(data, rng, ground):
    nx, ny, nz = data.shape
    top = ny - 4
    n = int(nx * nz / 700)
    for _ in range(n):
        w, d = rng.integers(6, 25, size=2)
        x, z = rng.integers(0, nx - w), rng.integers(0, nz - d)
        h = int(rng.integers(4, min(40, top - ground)))
        _box(data, x, x + w, ground, ground + h, z, z + d)
        if rng.random() < 0.3 and w > 8 and d > 8 and ground + h + 4 < top:
            sw, sd = rng.integers(4, w - 2), rng.integers(4, d - 2)
            sx, sz = x + rng.integers(0, w - sw), z + rng.integers(0, d - sd)
            sh = int(rng.integers(3, max(4, min(16, top - ground - h))))
            _box(data, sx, sx + sw, ground + h, ground + h + sh, sz, sz + sd)


def _towers(data, rng, ground, chunk):
    nx, ny, nz = data.shape
    top = ny - 4
    tall = TALL_FACTOR * chunk + 4
    if ground + tall > top:
        raise ValueError(f"scene height {ny} cannot hold a {tall}-voxel tower for chunk size {chunk}")
    n = int(nx * nz / 900)
    for t in range(n):
        w, d = rng.integers(6, 15, size=2)
        x, z = rng.integers(chunk // 2, nx - w - chunk // 2), rng.integers(chunk // 2, nz - d - chunk // 2)
        if t < 4:
            h = int(rng.integers(tall, top - ground + 1))
        else:
            h = int(min(top - ground, 10 + rng.exponential(35)))
        _box(data, x, x + w, ground, ground + h, z, z + d)


def _arches(data, rng, ground):
    nx, ny, nz = data.shape
    top = ny - 4
    n = int(nx * nz / 1500)
    for _ in range(n):
        span = int(rng.integers(14, 40))
        leg = int(rng.integers(4, 8))
        width = int(rng.integers(5, 12))
        h = int(rng.integers(10, min(40, top - ground - 4)))
        deck = int(rng.integers(3, 6))
        along_x = rng.random() < 0.5
        L = span + 2 * leg
        if along_x:
            x, z = rng.integers(0, nx - L), rng.integers(0, nz - width)
            _box(data, x, x + leg, ground, ground + h, z, z + width)
            _box(data, x + L - leg, x + L, ground, ground + h, z, z + width)
            _box(data, x, x + L, ground + h, ground + h + deck, z, z + width)
        else:
            x, z = rng.integers(0, nx - width), rng.integers(0, nz - L)
            _box(data, x, x + width, ground, ground + h, z, z + leg)
            _box(data, x, x + width, ground, ground + h, z + L - leg, z + L)
            _box(data, x, x + width, ground + h, ground + h + deck, z, z + L)


def synth_scene(seed: int, style: str = "blocks", dims=None, chunk: int = DEFAULT_CHUNK) -> OccupancyGrid:
    """Deterministic toy scene with a ground slab occupying ``y < 5``.

    Scenes whose sample map is empty after the flatness filter are retried
    with derived seeds.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    dims = tuple(int(d) for d in (dims or DEFAULT_DIMS[style]))
    nx, ny, nz = dims
    if nx < 2 * chunk or nz < 2 * chunk or ny < GROUND_THICKNESS + 12:
        raise ValueError(f"dims {dims} too small for a ground slab and one structure at chunk size {chunk}")
    for attempt in range(MAX_REGENERATE):
        rng = np.random.default_rng([seed, attempt])
        data = np.zeros(dims, dtype=bool)
        data[:, :GROUND_THICKNESS, :] = True
        if style == "blocks":
            _blocks(data, rng, GROUND_THICKNESS)
        elif style == "towers":
            _towers(data, rng, GROUND_THICKNESS, chunk)
        else:
            _arches(data, rng, GROUND_THICKNESS)
        grid = flood_fill_solid(OccupancyGrid(data))
        if compute_sample_maps(grid, 2 * chunk).valid.any():
            return grid
    raise RuntimeError(f"could not produce a sampleable {style} scene from seed {seed}")


def synth_from_spec(spec: SceneSpec) -> OccupancyGrid:
    return synth_scene(spec.seed, spec.style, spec.dims, spec.chunk)


def build_quads(scenes: list[OccupancyGrid], quads_per_scene: int, chunk: int = DEFAULT_CHUNK) -> list[QuadChunk]:
    return [q for n, grid in enumerate(scenes) for q in sample_quads(grid, quads_per_scene, chunk, scene=n)]


def build_dataset(scenes: list[OccupancyGrid], quads_per_scene: int, path, chunk: int = DEFAULT_CHUNK,
                  val_fraction: float = 0.05, meta: dict | None = None) -> list[QuadChunk]:
    """Sample quads from every scene and persist them with a hash-based train/val split."""
    quads = build_quads(scenes, quads_per_scene, chunk)
    write_dataset(path, quads, val_fraction, meta)
    return quads
