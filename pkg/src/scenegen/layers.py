"""Small differentiable building blocks shared by the VAE and the denoiser."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_HEADS = 4
DEFAULT_FREQS = 8


def fourier_pe(coords: torch.Tensor, n_freq: int = DEFAULT_FREQS) -> torch.Tensor:
    """Raw coordinates followed by sin/cos(2^j * pi * x) for j < n_freq, per component."""
    if n_freq < 1:
        raise ValueError("n_freq must be at least 1")
    freqs = (2.0 ** torch.arange(n_freq, dtype=coords.dtype, device=coords.device)) * math.pi
    ang = coords.unsqueeze(-1) * freqs  # (..., 3, F)
    ang = ang.flatten(-2)
    return torch.cat([coords, torch.sin(ang), torch.cos(ang)], dim=-1)


def pe_width(n_freq: int, dim: int = 3) -> int:
    return dim + 2 * dim * n_freq


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return torch.softmax((q @ k.transpose(-2, -1)) * scale, dim=-1)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with learned Q/K/V/output projections.

    ``forward(x, context)`` lets each row of ``x`` attend over the rows of
    ``context``; inputs are ``(..., n, dim)`` and ``(..., m, context_dim)``.
    """

    def __init__(self, dim: int, heads: int = DEFAULT_HEADS, context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(context_dim, dim)
        self.to_v = nn.Linear(context_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def _split(self, t):
        return t.unflatten(-1, (self.heads, -1)).transpose(-3, -2)

    def forward(self, x: torch.Tensor, context: torch.Tensor, return_weights: bool = False):
        if x.shape[-1] != self.to_q.in_features or context.shape[-1] != self.to_k.in_features:
            raise ValueError(f"shape mismatch: queries {tuple(x.shape)}, context {tuple(context.shape)}")
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(context)), self._split(self.to_v(context))
        w = attention_weights(q, k)
        out = (w @ v).transpose(-3, -2).flatten(-2)
        out = self.to_out(out)
        return (out, w) if return_weights else out


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention with a feed-forward layer, as used for set aggregation."""

    def __init__(self, dim: int, context_dim: int | None = None, heads: int = DEFAULT_HEADS,
                 ff_mult: int = 4, residual: bool = True):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(context_dim or dim)
        self.attn = MultiHeadAttention(dim, heads, context_dim)
        self.norm_ff = nn.LayerNorm(dim) if ff_mult else None
        self.ff = FeedForward(dim, ff_mult) if ff_mult else None
        self.residual = residual

    def forward(self, x, context):
        a = self.attn(self.norm_q(x), self.norm_ctx(context))
        x = x + a if self.residual else a
        if self.ff is None:
            return x
        return x + self.ff(self.norm_ff(x))


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mult)
        self.fc2 = nn.Linear(dim * mult, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """layernorm -> attention -> residual -> layernorm -> feed-forward -> residual."""

    def __init__(self, dim: int, heads: int = DEFAULT_HEADS, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.norm2(x))

    def zero_output(self):
        """Zero both residual branches' output projections, making the block an identity."""
        for lin in (self.attn.to_out, self.ff.fc2):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor, generator: torch.Generator | None = None):
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + torch.exp(0.5 * logvar) * eps


def kl_loss(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())


def bce_with_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy, ``max(x, 0) - x*y + log(1 + exp(-|x|))``."""
    y = labels.to(logits.dtype)
    return torch.mean(torch.clamp(logits, min=0) - logits * y + torch.log1p(torch.exp(-logits.abs())))


def consistency_loss(z_p: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    return torch.mean((z_p - z_q) ** 2)


def make_optimizer(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def optimizer_step(optimizer: torch.optim.Optimizer, loss: torch.Tensor, clip: float | None = None):
    """Zero gradients, backpropagate ``loss`` and apply one bias-corrected Adam update."""
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if clip is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(params, clip)
    optimizer.step()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half).to(t.device)
    ang = t.to(freqs.dtype).unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb
