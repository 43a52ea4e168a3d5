"""Latent DDPM over 2x2 quad-chunk latents with explicit outpainting conditions.

A quad latent is a ``(4, V, c)`` tensor in slot order z0, z1, z2, z3
(cells (i, j), (i, j+1), (i+1, j), (i+1, j+1)). Each mask configuration marks
which slots are given as clean context.

Denoisers are called as ``denoiser(x_t, mask, z_cond, t)`` with batched
``(B, 4, V, c)`` latents, ``(B, 4, V, 1)`` masks and ``(B,)`` integer timesteps
in ``[1, T]``; anything with that signature (including test mocks) works.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import layers


class MaskConfig(enum.Enum):
    FULL = "full"
    LEFT_RIGHT = "left_right"
    TOP_DOWN = "top_down"
    DIAGONAL = "diagonal"

    @property
    def known(self) -> tuple[int, int, int, int]:
        return _KNOWN[self]

    @classmethod
    def ordered(cls) -> list["MaskConfig"]:
        return [cls.FULL, cls.LEFT_RIGHT, cls.TOP_DOWN, cls.DIAGONAL]


_KNOWN = {
    MaskConfig.FULL: (0, 0, 0, 0),
    MaskConfig.LEFT_RIGHT: (1, 0, 1, 0),
    MaskConfig.TOP_DOWN: (1, 1, 0, 0),
    MaskConfig.DIAGONAL: (1, 1, 1, 0),
}


@dataclass
class DiffusionSchedule:
    betas: np.ndarray  # index t-1 holds beta_t

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative product at integer timestep(s) ``t`` in [0, T]; alpha_bar(0) = 1."""
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[np.asarray(t)]


def build_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                   beta_end: float = 2e-2) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas)


def inference_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided increasing subsequence of [1, T] of length ``steps`` ending at T."""
    if steps > T:
        raise ValueError(f"cannot sample with {steps} steps from a {T}-step schedule")
    if steps < 1:
        raise ValueError("steps must be positive")
    return np.round(np.linspace(T / steps, T, steps)).astype(np.int64)


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=like.dtype)
    return v.reshape(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per batch row."""
    ab = schedule.alpha_bar(np.asarray(t.cpu() if torch.is_tensor(t) else t))
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), x0) * eps


def condition_template(cfg: MaskConfig, clean: torch.Tensor):
    """Mask ``(..., 4, V, 1)`` and zeroed condition latents ``(..., 4, V, c)`` for ``cfg``."""
    known = torch.tensor(cfg.known, dtype=clean.dtype)
    mask = known.reshape(4, 1, 1).expand(*clean.shape[:-1], 1)
    return mask.contiguous(), clean * mask


def build_condition(cfg: MaskConfig, clean: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
    """Per-token condition ``mask + z_cond + slot PE`` flattened to ``(..., 4V, 1 + c + pe_dim)``."""
    mask, zc = condition_template(cfg, clean)
    return concat_condition(mask, zc, pe)


def concat_condition(mask: torch.Tensor, zc: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
    lead = zc.shape[:-3]
    tokens = zc.shape[-3] * zc.shape[-2]
    pe = pe.reshape(tokens, -1).expand(*lead, tokens, -1)
    return torch.cat([mask.reshape(*lead, tokens, 1), zc.reshape(*lead, tokens, -1), pe], dim=-1)


@dataclass
class DenoiserConfig:
    latents: int = 8
    channels: int = 32
    width: int = 64
    layers: int = 7
    heads: int = 4
    pe_dim: int = 16
    T: int = 1000
    schedule: str = "linear"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


class Denoiser(nn.Module):
    """UNet-style transformer: input blocks, a middle block, and output blocks fed long skips."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        if cfg.layers < 1 or cfg.layers % 2 == 0:
            raise ValueError("denoiser layer count must be odd")
        self.cfg = cfg
        n_tok = 4 * cfg.latents
        self.pos_emb = nn.Parameter(torch.randn(4, cfg.latents, cfg.pe_dim) * 0.02)
        self.proj_in = nn.Linear(cfg.channels + 1 + cfg.channels + cfg.pe_dim, cfg.width)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.width, cfg.width), nn.SiLU(), nn.Linear(cfg.width, cfg.width))
        half = cfg.layers // 2
        self.in_blocks = nn.ModuleList(layers.SelfAttentionBlock(cfg.width, cfg.heads) for _ in range(half))
        self.mid_block = layers.SelfAttentionBlock(cfg.width, cfg.heads)
        self.out_blocks = nn.ModuleList(layers.SelfAttentionBlock(cfg.width, cfg.heads) for _ in range(half))
        self.skip_proj = nn.ModuleList(nn.Linear(2 * cfg.width, cfg.width) for _ in range(half))
        self.norm_out = nn.LayerNorm(cfg.width)
        self.proj_out = nn.Linear(cfg.width, cfg.channels)
        self.register_buffer("latent_shift", torch.zeros(()))
        self.register_buffer("latent_scale", torch.ones(()))
        self.n_tokens = n_tok

    def forward(self, x_t, mask, z_cond, t):
        lead = x_t.shape[:-3]
        c = concat_condition(mask, z_cond, self.pos_emb)
        h = torch.cat([x_t.reshape(*lead, self.n_tokens, -1), c], dim=-1)
        h = self.proj_in(h)
        temb = self.time_mlp(layers.timestep_embedding(torch.as_tensor(t).reshape(-1), self.cfg.width).to(h.dtype))
        h = h + temb.reshape(*lead, 1, -1)
        skips = []
        for blk in self.in_blocks:
            h = blk(h)
            skips.append(h)
        h = self.mid_block(h)
        for blk, proj in zip(self.out_blocks, self.skip_proj):
            h = blk(proj(torch.cat([h, skips.pop()], dim=-1)))
        out = self.proj_out(self.norm_out(h))
        return out.reshape(x_t.shape)

    def normalize(self, z):
        return (z - self.latent_shift) / self.latent_scale

    def denormalize(self, x):
        return x * self.latent_scale + self.latent_shift


def normalize_latents(denoiser, z):
    return denoiser.normalize(z) if hasattr(denoiser, "normalize") else z


def denormalize_latents(denoiser, x):
    return denoiser.denormalize(x) if hasattr(denoiser, "denormalize") else x


def training_step(denoiser, schedule: DiffusionSchedule, x0: torch.Tensor, generator: torch.Generator,
                  unknown_only: bool = False, return_details: bool = False):
    """One epsilon-prediction loss evaluation on a ``(B, 4, V, c)`` batch of clean quads.

    Every sample draws one of the four configurations uniformly, a timestep
    uniformly in [1, T] and Gaussian noise; all four slots are noised.
    """
    b = x0.shape[0]
    cfg_idx = torch.randint(0, 4, (b,), generator=generator)
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    known = torch.tensor([c.known for c in MaskConfig.ordered()], dtype=x0.dtype)[cfg_idx]
    mask = known.reshape(b, 4, 1, 1).expand(*x0.shape[:-1], 1).contiguous()
    x_t = q_sample(x0, t.numpy(), eps, schedule)
    eps_hat = denoiser(x_t, mask, x0 * mask, t)
    err = (eps - eps_hat) ** 2
    if unknown_only:
        w = (1.0 - mask).expand_as(err)
        loss = (err * w).sum() / w.sum().clamp(min=1.0)
    else:
        loss = err.mean()
    if return_details:
        return loss, {"configs": cfg_idx, "t": t, "eps": eps, "eps_hat": eps_hat, "x_t": x_t, "mask": mask}
    return loss


def reverse_step(x_t, eps_hat, t: int, t_prev: int, schedule: DiffusionSchedule, generator=None):
    """Ancestral step from ``t`` to ``t_prev`` along a strided path, variance fixed to beta."""
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    beta = 1.0 - ab_t / ab_prev
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    mean = (math.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0_hat \
        + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * x_t
    if t_prev == 0:
        return mean
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(beta) * noise


def _t_batch(t: int, x: torch.Tensor) -> torch.Tensor:
    return torch.full(x.shape[:-3] or (1,), int(t), dtype=torch.long)


@torch.no_grad()
def ddpm_sample(denoiser, schedule: DiffusionSchedule, cfg: MaskConfig, clean_context: torch.Tensor | None,
                generator: torch.Generator, steps: int = 50, shape=None) -> torch.Tensor:
    """Explicit outpainting: denoise all four slots under a fixed condition.

    ``clean_context`` is ``(..., 4, V, c)`` in the denoiser's latent space; unknown
    slots are ignored. Exactly ``steps`` denoiser evaluations are made.
    """
    ts = inference_timesteps(schedule.T, steps)
    if clean_context is None:
        clean_context = torch.zeros(shape)
    mask, zc = condition_template(cfg, clean_context)
    x = torch.randn(clean_context.shape, generator=generator, dtype=clean_context.dtype)
    for k in range(len(ts) - 1, -1, -1):
        t, t_prev = int(ts[k]), int(ts[k - 1]) if k > 0 else 0
        eps_hat = denoiser(x, mask, zc, _t_batch(t, x))
        x = reverse_step(x, eps_hat, t, t_prev, schedule, generator)
    return x


@torch.no_grad()
def repaint_sample(denoiser, schedule: DiffusionSchedule, known_mask, known_latents: torch.Tensor,
                   r: int, generator: torch.Generator, steps: int = 50) -> torch.Tensor:
    """RePaint baseline with jump length 1 and ``r`` resampling rounds per timestep.

    The denoiser sees the all-zero (Full) condition; known slots are injected
    by forward-noising ``known_latents`` to each intermediate timestep.
    """
    if r < 1:
        raise ValueError("resampling count must be at least 1")
    ts = inference_timesteps(schedule.T, steps)
    km = torch.as_tensor(known_mask, dtype=known_latents.dtype).reshape(4, 1, 1)
    mask, zc = condition_template(MaskConfig.FULL, known_latents)
    x = torch.randn(known_latents.shape, generator=generator, dtype=known_latents.dtype)
    for k in range(len(ts) - 1, -1, -1):
        t, t_prev = int(ts[k]), int(ts[k - 1]) if k > 0 else 0
        for u in range(r):
            eps_hat = denoiser(x, mask, zc, _t_batch(t, x))
            unknown = reverse_step(x, eps_hat, t, t_prev, schedule, generator)
            if t_prev > 0:
                noise = torch.randn(known_latents.shape, generator=generator, dtype=known_latents.dtype)
                known = q_sample(known_latents, t_prev, noise, schedule)
            else:
                known = known_latents
            x_prev = km * known + (1 - km) * unknown
            if u == r - 1 or t_prev == 0:
                break
            ratio = float(schedule.alpha_bar(t) / schedule.alpha_bar(t_prev))
            noise = torch.randn(x_prev.shape, generator=generator, dtype=x_prev.dtype)
            x = math.sqrt(ratio) * x_prev + math.sqrt(1.0 - ratio) * noise
        x = x_prev
    return x


def repaint_calls(steps: int, r: int) -> int:
    return steps + (r - 1) * (steps - 1)


class CountingDenoiser:
    """Wraps a denoiser and counts its evaluations."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x, mask, zc, t):
        self.calls += 1
        return self.fn(x, mask, zc, t)

    def __getattr__(self, name):
        if name == "fn":
            raise AttributeError(name)
        return getattr(self.fn, name)


def train_diffusion(denoiser: Denoiser, latents: torch.Tensor, steps: int, batch_size: int = 64,
                    lr: float = 1e-3, seed: int = 0, unknown_only: bool = False, log_every: int = 200,
                    callback=None) -> list[dict]:
    """Train on raw ``(Q, 4, V, c)`` quad latents; sets the denoiser's latent normalization."""
    schedule = build_schedule(denoiser.cfg.T, denoiser.cfg.schedule)
    with torch.no_grad():
        denoiser.latent_shift.fill_(float(latents.mean()))
        denoiser.latent_scale.fill_(float(latents.std().clamp(min=1e-6)))
    data = denoiser.normalize(latents).detach()
    gen = torch.Generator().manual_seed(seed)
    opt = layers.make_optimizer(denoiser.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 100) * (0.5 * (1 + math.cos(math.pi * min(s, steps) / steps)) * 0.9 + 0.1))
    history = []
    denoiser.train()
    for step in range(steps):
        idx = torch.randint(0, len(data), (batch_size,), generator=gen)
        loss = training_step(denoiser, schedule, data[idx], gen, unknown_only)
        layers.optimizer_step(opt, loss, clip=1.0)
        sched.step()
        if step % log_every == 0 or step == steps - 1:
            rec = {"step": step, "loss": float(loss.detach())}
            history.append(rec)
            if callback is not None:
                callback(rec)
    denoiser.eval()
    return history
