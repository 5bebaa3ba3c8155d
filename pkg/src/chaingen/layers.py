"""Building blocks shared by the conditioner, autoencoder and denoiser."""

from __future__ import annotations

import math

import torch
from torch import nn

from .diffengine import DTYPE


class MLP(nn.Sequential):
    """Two-layer perceptron with a SiLU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))


def biased_attention(q, k, v, bias=None, key_mask=None, scale: float | None = None):
    """Softmax(q.k / scale + bias) v over the last two axes.

    q, k, v: (B, H, N, Dh); bias: broadcastable to (B, H, N, N);
    key_mask: (B, N) True for real atoms.  ``scale`` defaults to sqrt(Dh).
    """
    if scale is None:
        scale = math.sqrt(q.shape[-1])
    logits = q @ k.transpose(-1, -2) / scale
    if bias is not None:
        if not torch.isfinite(bias).all():
            raise ValueError("attention bias contains non-finite values")
        logits = logits + bias
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    return attn @ v, attn


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int, scale_mode: str = "head_dim"):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        if scale_mode not in ("head_dim", "num_heads"):
            raise ValueError(f"unknown attention scale mode {scale_mode!r}")
        self.heads = heads
        self.scale = math.sqrt(heads if scale_mode == "num_heads" else width // heads)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, key_mask=None, bias=None):
        b, n, w = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        ctx, _ = biased_attention(qkv[0], qkv[1], qkv[2], bias, key_mask, self.scale)
        return self.out(ctx.transpose(1, 2).reshape(b, n, w))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block over atom tokens (no positional encoding)."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4, scale_mode: str = "head_dim"):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, scale_mode)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = MLP(width, mlp_ratio * width, width)

    def forward(self, x, key_mask=None):
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.mlp(self.norm2(x))


def to_dtype(module: nn.Module) -> nn.Module:
    return module.to(DTYPE)
