"""Raster-scan unbounded scene generation over a grid of chunk latents.

Quads are indexed by their top-left cell ``(i, j)``. Quad ``(i, j)`` covers
cells (i, j), (i, j+1), (i+1, j), (i+1, j+1) in slot order; its condition
pattern depends only on its position (first quad, first row, first column,
interior). Each quad draws all of its randomness from a generator seeded by
a stable hash of ``(base_seed, i, j)``, so any schedule that respects the
data dependencies between quads reproduces the sequential result exactly.
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np
import torch

from .chunks import SLOT_OFFSETS
from .diffusion import (CountingDenoiser, DiffusionSchedule, MaskConfig, ddpm_sample, denormalize_latents,
                        normalize_latents, repaint_calls, repaint_sample)
from .vae import ChunkVAE, decode_probabilities
from .voxel import Mesh, OccupancyGrid, marching_cubes

log = logging.getLogger(__name__)


@dataclass
class SceneLatentGrid:
    cells: np.ndarray  # (I, J, V, c) float32
    written: np.ndarray  # (I, J) bool

    @classmethod
    def empty(cls, rows: int, cols: int, latents: int, channels: int) -> "SceneLatentGrid":
        return cls(np.zeros((rows, cols, latents, channels), dtype=np.float32), np.zeros((rows, cols), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape[:2]


@dataclass
class TraceEntry:
    i: int
    j: int
    config: MaskConfig
    seed: int
    calls: int = 0

    def line(self) -> str:
        return f"{self.i} {self.j} {self.config.value} {self.seed} {self.calls}"

    @classmethod
    def parse(cls, line: str) -> "TraceEntry":
        i, j, cfg, seed, calls = line.split()
        return cls(int(i), int(j), MaskConfig(cfg), int(seed), int(calls))


@dataclass
class GenerationTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def counts(self) -> dict[MaskConfig, int]:
        out = {c: 0 for c in MaskConfig.ordered()}
        for e in self.entries:
            out[e.config] += 1
        return out

    @property
    def calls(self) -> int:
        return sum(e.calls for e in self.entries)

    def dumps(self) -> str:
        return "".join(e.line() + "\n" for e in self.entries)

    @classmethod
    def loads(cls, text: str) -> "GenerationTrace":
        return cls([TraceEntry.parse(l) for l in text.splitlines() if l.strip()])


def quad_config(i: int, j: int) -> MaskConfig:
    if i == 0 and j == 0:
        return MaskConfig.FULL
    if i == 0:
        return MaskConfig.LEFT_RIGHT
    if j == 0:
        return MaskConfig.TOP_DOWN
    return MaskConfig.DIAGONAL


def cell_seed(base_seed: int, i: int, j: int) -> int:
    """Stable 63-bit seed for quad ``(i, j)``."""
    digest = hashlib.blake2b(struct.pack("<qqq", base_seed, i, j), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def _check_dims(rows: int, cols: int):
    if rows < 2 or cols < 2:
        raise ValueError(f"scene grid must be at least 2x2, got {rows}x{cols}")


def plan_configs(rows: int, cols: int, base_seed: int = 0) -> GenerationTrace:
    """Quads in raster order with their condition pattern and seed."""
    _check_dims(rows, cols)
    return GenerationTrace([TraceEntry(i, j, quad_config(i, j), cell_seed(base_seed, i, j))
                            for i in range(rows - 1) for j in range(cols - 1)])


def quad_cells(i: int, j: int) -> list[tuple[int, int]]:
    return [(i + a, j + b) for a, b in SLOT_OFFSETS]


def written_slots(cfg: MaskConfig, preserve_conditioned: bool) -> list[int]:
    if not preserve_conditioned:
        return [0, 1, 2, 3]
    return [s for s, k in enumerate(cfg.known) if not k]


def quad_dependencies(rows: int, cols: int, preserve_conditioned: bool = False) -> dict:
    """Predecessors of every quad derived from its cell reads and writes in raster order.

    With literal overwrite semantics, quad (i, j) also depends on (i-1, j+1),
    which last wrote cell (i, j+1); with preserved conditions only (i-1, j)
    and (i, j-1) remain, giving the plain i + j anti-diagonal wavefront.
    """
    last_writer: dict = {}
    readers: dict = {}
    deps: dict = {}
    for e in plan_configs(rows, cols).entries:
        q = (e.i, e.j)
        cells = quad_cells(e.i, e.j)
        reads = [cells[s] for s, k in enumerate(e.config.known) if k]
        writes = [cells[s] for s in written_slots(e.config, preserve_conditioned)]
        d = set()
        for c in reads:
            if c in last_writer:
                d.add(last_writer[c])
        for c in writes:
            if c in last_writer:
                d.add(last_writer[c])
            d.update(readers.get(c, ()))
        d.discard(q)
        deps[q] = d
        for c in reads:
            readers.setdefault(c, set()).add(q)
        for c in writes:
            last_writer[c] = q
            readers[c] = set()
    return deps


def wavefronts(rows: int, cols: int, preserve_conditioned: bool = False) -> list[list[tuple[int, int]]]:
    """Quads grouped by dependency depth; each group may run concurrently."""
    deps = quad_dependencies(rows, cols, preserve_conditioned)
    level = {}
    for q in sorted(deps):  # raster order is a valid topological order
        level[q] = 1 + max((level[p] for p in deps[q]), default=-1)
    waves = [[] for _ in range(max(level.values()) + 1)]
    for q, l in level.items():
        waves[l].append(q)
    return waves


class QuadSampler:
    """Samples one quad given its condition, in raw (VAE) latent space."""

    def __init__(self, denoiser, schedule: DiffusionSchedule, steps: int = 50, method: str = "explicit",
                 resample_r: int = 5):
        if method not in ("explicit", "repaint"):
            raise ValueError(f"unknown outpainting method {method!r}")
        self.denoiser = denoiser
        self.schedule = schedule
        self.steps = steps
        self.method = method
        self.resample_r = resample_r

    @property
    def calls_per_quad(self) -> int:
        return self.steps if self.method == "explicit" else repaint_calls(self.steps, self.resample_r)

    def __call__(self, cfg: MaskConfig, context: np.ndarray, seed: int):
        gen = torch.Generator().manual_seed(seed)
        counter = CountingDenoiser(self.denoiser)
        ctx = normalize_latents(self.denoiser, torch.as_tensor(context, dtype=torch.float32))
        if self.method == "explicit":
            x = ddpm_sample(counter, self.schedule, cfg, ctx, gen, self.steps)
        else:
            x = repaint_sample(counter, self.schedule, cfg.known, ctx, self.resample_r, gen, self.steps)
        return denormalize_latents(self.denoiser, x).detach().numpy().astype(np.float32), counter.calls


def _latent_shape(sampler) -> tuple[int, int]:
    cfg = getattr(sampler.denoiser, "cfg", None)
    if cfg is not None:
        return cfg.latents, cfg.channels
    return sampler.latent_shape


def _run_quad(grid: SceneLatentGrid, entry: TraceEntry, sampler, preserve_conditioned: bool):
    cells = quad_cells(entry.i, entry.j)
    context = np.stack([grid.cells[c] if k else np.zeros_like(grid.cells[c])
                        for c, k in zip(cells, entry.config.known)])
    out, calls = sampler(entry.config, context, entry.seed)
    for s in written_slots(entry.config, preserve_conditioned):
        grid.cells[cells[s]] = out[s]
        grid.written[cells[s]] = True
    entry.calls = calls


def raster_generate(rows: int, cols: int, sampler, base_seed: int = 0, preserve_conditioned: bool = False):
    """Sequential row-major generation; returns the latent grid and its trace."""
    trace = plan_configs(rows, cols, base_seed)
    grid = SceneLatentGrid.empty(rows, cols, *_latent_shape(sampler))
    for entry in trace.entries:
        _run_quad(grid, entry, sampler, preserve_conditioned)
    return grid, trace


def antidiagonal_generate(rows: int, cols: int, sampler, base_seed: int = 0, workers: int = 4,
                          preserve_conditioned: bool = False, log_events: list | None = None):
    """Dependency-driven parallel generation; identical output to :func:`raster_generate`.

    ``log_events`` (if given) receives ``("start"|"finish", i, j, seq)`` tuples.
    """
    trace = plan_configs(rows, cols, base_seed)
    grid = SceneLatentGrid.empty(rows, cols, *_latent_shape(sampler))
    if workers <= 1:
        for e in trace.entries:
            if log_events is not None:
                log_events.append(("start", e.i, e.j, len(log_events)))
            _run_quad(grid, e, sampler, preserve_conditioned)
            if log_events is not None:
                log_events.append(("finish", e.i, e.j, len(log_events)))
        return grid, trace
    deps = quad_dependencies(rows, cols, preserve_conditioned)
    entries = {(e.i, e.j): e for e in trace.entries}
    remaining = {q: set(d) for q, d in deps.items()}
    children: dict = {q: [] for q in deps}
    for q, d in deps.items():
        for p in d:
            children[p].append(q)
    lock = threading.Lock()
    events = log_events if log_events is not None else []

    def task(q):
        with lock:
            events.append(("start", *q, len(events)))
        _run_quad(grid, entries[q], sampler, preserve_conditioned)
        with lock:
            events.append(("finish", *q, len(events)))
        return q

    with ThreadPoolExecutor(max_workers=workers) as pool:
        ready = sorted(q for q, d in remaining.items() if not d)
        running = {pool.submit(task, q) for q in ready}
        submitted = set(ready)
        while running:
            done, running = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                q = fut.result()
                for child in children[q]:
                    remaining[child].discard(q)
                    if not remaining[child] and child not in submitted:
                        submitted.add(child)
                        running.add(pool.submit(task, child))
    return grid, trace


@dataclass
class DecodedScene:
    grid: OccupancyGrid
    mesh: Mesh
    heights: np.ndarray  # predicted normalized height per cell
    cell_heights: np.ndarray  # lattice height per cell
    resolution: int


def decode_scene(vae: ChunkVAE, grid: SceneLatentGrid, resolution: int | None = None,
                 max_height: int | None = None) -> DecodedScene:
    """Decode every cell into one global occupancy volume and run marching cubes once."""
    res = resolution or vae.cfg.chunk
    rows, cols = grid.shape
    probs, heights = {}, np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            z = torch.as_tensor(grid.cells[i, j], dtype=torch.float32)
            probs[i, j], heights[i, j] = decode_probabilities(vae, z, res, max_height)
    cell_heights = np.array([[probs[i, j].shape[1] for j in range(cols)] for i in range(rows)])
    top = int(cell_heights.max())
    if top == 0:
        log.warning("every cell decoded empty; returning an empty scene")
        return DecodedScene(OccupancyGrid.empty((rows * res, 1, cols * res)), Mesh(), heights, cell_heights, res)
    volume = np.zeros((rows * res, top, cols * res), dtype=np.float32)
    for (i, j), p in probs.items():
        volume[i * res:(i + 1) * res, :p.shape[1], j * res:(j + 1) * res] = p
    mesh = marching_cubes(volume, 0.5)
    mesh.vertices *= vae.cfg.chunk / res
    return DecodedScene(OccupancyGrid(volume > 0.5), mesh, heights, cell_heights, res)
