"""Training loops and batch construction for the chunk VAE and the outpainting model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import layers
from .chunks import (ChunkSample, QuadChunk, chunk_height_target, normalize_coords, sample_query_points,
                     surface_voxels)
from .vae import ChunkVAE, vae_loss
from .voxel import Mesh, marching_cubes

log = logging.getLogger(__name__)


def chunk_mesh(chunk: ChunkSample) -> Mesh:
    return marching_cubes(chunk.occ.astype(np.float32), 0.5)


@dataclass
class PreparedChunk:
    chunk: ChunkSample
    mesh: Mesh
    corners: np.ndarray  # (T, 3, 3) triangle vertices
    area_cdf: np.ndarray
    surface: np.ndarray

    @classmethod
    def build(cls, chunk: ChunkSample) -> "PreparedChunk":
        mesh = chunk_mesh(chunk)
        return cls(chunk, mesh, mesh.vertices[mesh.triangles], np.cumsum(mesh.triangle_areas()),
                   surface_voxels(chunk.occ))

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Same distribution as :func:`sample_surface_points`, using the cached area table."""
        idx = np.searchsorted(self.area_cdf, rng.random(n) * self.area_cdf[-1], side="right")
        idx = np.minimum(idx, len(self.area_cdf) - 1)
        u = rng.random((n, 2))
        flip = u.sum(1) > 1
        u[flip] = 1 - u[flip]
        tri = self.corners[idx]
        return tri[:, 0] + u[:, :1] * (tri[:, 1] - tri[:, 0]) + u[:, 1:] * (tri[:, 2] - tri[:, 0])


class ChunkData:
    """Chunks with cached surface meshes, ready for point/query sampling."""

    def __init__(self, chunks: list[ChunkSample], chunk_size: int):
        self.items = [PreparedChunk.build(c) for c in chunks]
        self.chunk_size = chunk_size

    @classmethod
    def from_quads(cls, quads: list[QuadChunk], chunk_size: int) -> "ChunkData":
        return cls([c for q in quads for c in q.chunks], chunk_size)

    def __len__(self):
        return len(self.items)

    def points(self, i: int, n: int, rng: np.random.Generator) -> np.ndarray:
        pts = self.items[i].sample_points(n, rng)
        return normalize_coords(pts, (self.chunk_size,) * 3)

    def batch(self, idx, rng: np.random.Generator, n_points: int, n_queries: int) -> dict:
        p, q, qs, labels, heights = [], [], [], [], []
        for i in idx:
            item = self.items[i]
            p.append(self.points(i, n_points, rng))
            q.append(self.points(i, n_points, rng))
            qb = sample_query_points(item.chunk, n_queries, rng, surface=item.surface)
            qs.append(qb.coords_norm)
            labels.append(qb.occ_labels)
            heights.append(chunk_height_target(item.chunk.h_vox, self.chunk_size))
        f = lambda a: torch.as_tensor(np.stack(a), dtype=torch.float32)
        return {"points_p": f(p), "points_q": f(q), "queries": f(qs),
                "labels": torch.as_tensor(np.stack(labels)), "height": torch.tensor(heights, dtype=torch.float32)}


def train_vae(model: ChunkVAE, data: ChunkData, steps: int, batch_size: int = 16, lr: float = 1e-3,
              n_queries: int = 4096, seed: int = 0, warmup: int = 100, log_every: int = 100,
              time_limit: float | None = None, callback=None, clip: float | None = None,
              bf16: bool = False) -> list[dict]:
    """Adam with linear warmup and cosine decay; returns per-log-step loss components.

    ``bf16`` runs the forward pass under CPU bfloat16 autocast (parameters and
    optimizer state stay float32), about 1.4x faster per step where the CPU
    has native bf16 matmuls.

    With ``time_limit`` the learning-rate decay follows elapsed time as well,
    so a time-capped run still anneals before it stops.

    The height head's bias starts at the mean training target, so early height
    errors (targets reach ~12 for skyscraper chunks) do not swamp the
    occupancy gradient.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        targets = [chunk_height_target(it.chunk.h_vox, data.chunk_size) for it in data.items]
        model.height_out[-1].bias.fill_(float(np.mean(targets)))
    gen = torch.Generator().manual_seed(seed)
    opt = layers.make_optimizer(model.parameters(), lr=lr)
    history = []
    t0 = time.perf_counter()
    model.train()
    for step in range(steps):
        # cosine decay driven by whichever budget (steps or wall clock) runs out first
        progress = step / steps
        if time_limit is not None:
            progress = max(progress, (time.perf_counter() - t0) / time_limit)
        scale = min(1.0, (step + 1) / warmup) * (0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * min(progress, 1.0))))
        for group in opt.param_groups:
            group["lr"] = lr * scale
        idx = rng.integers(0, len(data), size=batch_size)
        batch = data.batch(idx, rng, model.cfg.n_points, n_queries)
        with torch.autocast("cpu", dtype=torch.bfloat16, enabled=bf16):
            loss, parts = vae_loss(model, batch, gen)
        layers.optimizer_step(opt, loss.float(), clip=clip)
        if step % log_every == 0 or step == steps - 1:
            rec = {"step": step, "loss": float(loss.detach()), **{k: float(v.detach()) for k, v in parts.items()},
                   "elapsed": time.perf_counter() - t0}
            history.append(rec)
            log.info("vae step %d loss %.4f ce %.4f height %.4f", step, rec["loss"], rec["ce"], rec["height"])
            if callback is not None:
                callback(rec)
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            log.warning("vae training stopped at step %d by the time limit", step)
            break
    model.eval()
    return history


@torch.no_grad()
def encode_chunks(model: ChunkVAE, data: ChunkData, seed: int = 0, batch_size: int = 64) -> np.ndarray:
    """Mean latents for every chunk, one fixed point sample per chunk."""
    rng = np.random.default_rng(seed)
    model.eval()
    out = []
    for start in range(0, len(data), batch_size):
        pts = np.stack([data.points(i, model.cfg.n_points, rng)
                        for i in range(start, min(start + batch_size, len(data)))])
        _, mean, _ = model.encode(torch.as_tensor(pts, dtype=torch.float32), sample=False)
        out.append(mean.numpy())
    return np.concatenate(out).astype(np.float32)
