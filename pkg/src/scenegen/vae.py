"""Chunk VAE: point cloud -> vector-set latent -> occupancy field.

The encoder lets ``V`` learned query tokens cross-attend over Fourier
features of a chunk's surface points. The decoder is a stack of
self-attention blocks followed by one of two occupancy heads: the vector-set
head (queries cross-attend over the decoded tokens) or the triplane baseline
(tokens reshaped into three planes, upsampled, and sampled bilinearly).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import layers
from .chunks import DEFAULT_CHUNK
from .voxel import Mesh, OccupancyGrid, marching_cubes

log = logging.getLogger(__name__)

QUERY_TILE = 65536


@dataclass
class TriplaneConfig:
    scale: float = 6.0  # S: extra compression along y
    channels: int = 16  # c_tri
    deconv_layers: int = 2

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("triplane y scale must be positive")


@dataclass
class VaeConfig:
    latents: int = 8  # V
    channels: int = 32  # c
    n_points: int = 1024  # N_p
    depth: int = 6  # L
    heads: int = layers.DEFAULT_HEADS
    n_freq: int = layers.DEFAULT_FREQS
    chunk: int = DEFAULT_CHUNK
    head: str = "vecset"
    head_width: int = 128
    enc_width: int = 128
    init_logvar: float = -6.0
    upsample: int = 1
    upsample_layers: int = 3
    lambda_kl: float = 1e-3
    lambda_emb: float = 0.1
    lambda_ce: float = 1.0
    lambda_height: float = 1.0
    triplane: TriplaneConfig = field(default_factory=TriplaneConfig)

    @classmethod
    def paper(cls, **kw):
        base = dict(latents=16, channels=64, n_points=4096, depth=24, chunk=50)
        base.update(kw)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        tri = d.pop("triplane", None)
        cfg = cls(**d)
        if tri is not None:
            cfg.triplane = TriplaneConfig(**tri)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def triplane_side(latents: int) -> int:
    k = int(round(math.sqrt(latents / 3)))
    if latents <= 0 or 3 * k * k != latents:
        raise ValueError(f"{latents} latents cannot be reshaped into three square planes")
    return k


class VecsetUpsample(nn.Module):
    """Project each token to ``factor`` tokens' worth of channels and unfold them into tokens."""

    def __init__(self, dim: int, factor: int, n_layers: int = 3, heads: int = layers.DEFAULT_HEADS):
        super().__init__()
        self.factor = factor
        self.proj = nn.Linear(dim, dim * factor)
        self.blocks = nn.ModuleList(layers.SelfAttentionBlock(dim, heads) for _ in range(n_layers))

    def forward(self, z):
        x = self.proj(z)
        x = x.reshape(*z.shape[:-2], z.shape[-2] * self.factor, z.shape[-1])
        for blk in self.blocks:
            x = blk(x)
        return x


class VecsetHead(nn.Module):
    """Query embeddings of width ``width`` attend over the ``c``-channel decoder features."""

    def __init__(self, dim: int, n_freq: int, heads: int, width: int | None = None):
        super().__init__()
        width = width or dim
        self.n_freq = n_freq
        self.embed = nn.Linear(layers.pe_width(n_freq), width)
        # no feed-forward here: it would run once per query and dominate training cost
        self.attn = layers.CrossAttentionBlock(width, context_dim=dim, heads=heads, ff_mult=0)
        self.out = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, width), nn.GELU(), nn.Linear(width, 1))

    def forward(self, f_out, queries):
        q = self.embed(layers.fourier_pe(queries, self.n_freq))
        return self.out(self.attn(q, f_out)).squeeze(-1)


def bilinear_sample(planes: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Sample ``(B, C, H, W)`` planes at ``(B, n, 2)`` coords in [-1, 1] (u along W, v along H).

    -1 and +1 land on the first and last texel centers.
    """
    out = F.grid_sample(planes, uv.unsqueeze(1), mode="bilinear", align_corners=True)
    return out.squeeze(2).transpose(1, 2)


# plane -> (u axis, v axis) in query coordinates
TRIPLANE_AXES = ((0, 2), (0, 1), (2, 1))


class TriplaneHead(nn.Module):
    def __init__(self, dim: int, latents: int, cfg: TriplaneConfig):
        super().__init__()
        self.side = triplane_side(latents)
        self.cfg = cfg
        ups = []
        ch = dim
        for _ in range(cfg.deconv_layers):
            ups += [nn.ConvTranspose2d(ch, cfg.channels, 4, stride=2, padding=1), nn.GELU()]
            ch = cfg.channels
        ups.append(nn.Conv2d(ch, cfg.channels, 3, padding=1))
        self.up = nn.Sequential(*ups)
        self.out = nn.Sequential(nn.Linear(3 * cfg.channels, 64), nn.GELU(), nn.Linear(64, 1))
        self.clamp_events = 0

    @property
    def resolution(self) -> int:
        return self.side * 2 ** self.cfg.deconv_layers

    def planes(self, f_out):
        b = f_out.shape[0]
        k = self.side
        x = f_out.reshape(b * 3, k, k, f_out.shape[-1]).permute(0, 3, 1, 2)
        return self.up(x).reshape(b, 3, self.cfg.channels, self.resolution, self.resolution)

    def sample(self, planes, queries):
        feats = [bilinear_sample(planes[:, p], queries[..., list(ax)]) for p, ax in enumerate(TRIPLANE_AXES)]
        return torch.cat(feats, dim=-1)

    def forward(self, f_out, queries):
        # queries arrive normalized with d = (s, s, s); rescale y to d = (s, s*S, s)
        q = queries.clone()
        q[..., 1] = (q[..., 1] + 1.0) / self.cfg.scale - 1.0
        if bool(((q < -1) | (q > 1)).any()):
            self.clamp_events += 1
        q = q.clamp(-1.0, 1.0)
        return self.out(self.sample(self.planes(f_out), q)).squeeze(-1)


class ChunkVAE(nn.Module):
    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        cfg = cfg or VaeConfig()
        self.cfg = cfg
        c = cfg.channels
        ew = cfg.enc_width or c
        # a nonlinear point embedding lets pooled features depend jointly on x, y and z
        self.point_embed = nn.Sequential(nn.Linear(layers.pe_width(cfg.n_freq), ew), nn.GELU(), nn.Linear(ew, ew))
        self.query_tokens = nn.Parameter(torch.randn(cfg.latents, ew))
        self.enc_attn = layers.CrossAttentionBlock(ew, heads=cfg.heads)
        self.enc_norm = nn.LayerNorm(ew)
        self.to_moments = nn.Linear(ew, 2 * c)
        with torch.no_grad():
            # start with a narrow posterior so the decoder sees the encoder's signal
            self.to_moments.bias[c:].fill_(cfg.init_logvar)
        self.height_query = nn.Parameter(torch.randn(1, c) * 0.02)
        self.height_attn = layers.CrossAttentionBlock(c, heads=cfg.heads)
        self.height_out = nn.Sequential(nn.LayerNorm(c), nn.Linear(c, 1))
        self.decoder = nn.ModuleList(layers.SelfAttentionBlock(c, cfg.heads) for _ in range(cfg.depth))
        self.upsample = (VecsetUpsample(c, cfg.upsample, cfg.upsample_layers, cfg.heads)
                         if cfg.upsample > 1 else None)
        if cfg.head == "vecset":
            self.occ_head = VecsetHead(c, cfg.n_freq, cfg.heads, cfg.head_width)
        elif cfg.head == "triplane":
            self.occ_head = TriplaneHead(c, cfg.latents * cfg.upsample, cfg.triplane)
        else:
            raise ValueError(f"unknown occupancy head {cfg.head!r}")

    # -- encoder
    def encode_moments(self, points: torch.Tensor):
        if points.shape[-2] != self.cfg.n_points:
            raise ValueError(f"expected {self.cfg.n_points} points, got {points.shape[-2]}")
        feats = self.point_embed(layers.fourier_pe(points, self.cfg.n_freq))
        q = self.query_tokens.expand(*points.shape[:-2], -1, -1)
        h = self.enc_norm(self.enc_attn(q, feats))
        mean, logvar = self.to_moments(h).chunk(2, dim=-1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, points: torch.Tensor, generator: torch.Generator | None = None, sample: bool = True):
        mean, logvar = self.encode_moments(points)
        z = layers.reparameterize(mean, logvar, generator) if sample else mean
        return z, mean, logvar

    # -- height
    def predict_height(self, z: torch.Tensor) -> torch.Tensor:
        q = self.height_query.expand(*z.shape[:-2], -1, -1)
        return self.height_out(self.height_attn(q, z)).squeeze(-1).squeeze(-1)

    # -- decoder
    def decode_features(self, z: torch.Tensor) -> torch.Tensor:
        x = z
        for blk in self.decoder:
            x = blk(x)
        if self.upsample is not None:
            x = self.upsample(x)
        return x

    def occupancy_logits(self, f_out: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        return self.occ_head(f_out, queries)

    def forward(self, z, queries):
        return self.occupancy_logits(self.decode_features(z), queries)


def vae_loss(model: ChunkVAE, batch: dict, generator: torch.Generator | None = None):
    """Weighted sum of KL, embedding-consistency, occupancy BCE and height losses.

    ``batch`` holds ``points_p``/``points_q`` (B, N_p, 3), ``queries`` (B, n, 3),
    ``labels`` (B, n) and ``height`` (B,) normalized targets.
    """
    cfg = model.cfg
    z_p, mean_p, logvar_p = model.encode(batch["points_p"], generator)
    z_q, _, _ = model.encode(batch["points_q"], generator)
    logits = model(z_p, batch["queries"])
    h_hat = model.predict_height(z_p)
    parts = {
        "kl": layers.kl_loss(mean_p, logvar_p),
        "emb": layers.consistency_loss(z_p, z_q),
        "ce": layers.bce_with_logits(logits, batch["labels"]),
        "height": torch.mean((h_hat - batch["height"]) ** 2),
    }
    total = (cfg.lambda_kl * parts["kl"] + cfg.lambda_emb * parts["emb"]
             + cfg.lambda_ce * parts["ce"] + cfg.lambda_height * parts["height"])
    return total, parts


def lattice_height(h_hat: float, resolution: int) -> int:
    return int(math.ceil(resolution * (float(h_hat) + 1.0) / 2.0 - 1e-9))


def lattice_queries(resolution: int, height: int) -> np.ndarray:
    """Normalized voxel-center queries for a ``(res, height, res)`` lattice."""
    axes = [(np.arange(n) + 0.5) / resolution * 2.0 - 1.0 for n in (resolution, height, resolution)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


@torch.no_grad()
def decode_probabilities(model: ChunkVAE, z: torch.Tensor, resolution: int | None = None,
                         max_height: int | None = None, h_hat: float | None = None):
    """Occupancy probabilities on the height-pruned lattice plus the height used.

    Returns ``(probs, h_hat)`` with ``probs`` shaped ``(res, H, res)``; ``H`` is 0
    when the predicted height is at or below -1.
    """
    resolution = resolution or model.cfg.chunk
    if h_hat is None:
        h_hat = float(model.predict_height(z.unsqueeze(0))[0])
    if h_hat <= -1.0:
        log.warning("predicted height %.3f <= -1, returning an empty chunk", h_hat)
        return np.zeros((resolution, 0, resolution), dtype=np.float32), h_hat
    height = lattice_height(h_hat, resolution)
    if max_height is not None:
        height = min(height, max_height)
    q = torch.as_tensor(lattice_queries(resolution, height), dtype=torch.float32)
    f_out = model.decode_features(z.unsqueeze(0))
    out = []
    for start in range(0, len(q), QUERY_TILE):
        out.append(torch.sigmoid(model.occupancy_logits(f_out, q[start:start + QUERY_TILE].unsqueeze(0)))[0])
    probs = torch.cat(out).reshape(resolution, height, resolution) if out else torch.zeros(resolution, 0, resolution)
    return probs.numpy().astype(np.float32), h_hat


def decode_chunk(model: ChunkVAE, z: torch.Tensor, resolution: int | None = None,
                 max_height: int | None = None):
    """Decode one latent into an occupancy grid and mesh at ``resolution`` voxels per side.

    Mesh vertices are expressed in training-chunk voxel units regardless of
    ``resolution``.
    """
    resolution = resolution or model.cfg.chunk
    probs, h_hat = decode_probabilities(model, z, resolution, max_height)
    if probs.shape[1] == 0:
        return OccupancyGrid.empty((resolution, 1, resolution)), Mesh(), h_hat
    grid = OccupancyGrid(probs > 0.5)
    mesh = marching_cubes(probs, 0.5)
    mesh.vertices *= model.cfg.chunk / resolution
    return grid, mesh, h_hat
