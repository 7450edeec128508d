"""Transformer building blocks: rotary attention with optional local window, SwiGLU MLP, RMS pre-norm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

POSITIONING_REGIMES = ("rotary", "rotary_real", "none")


@dataclass
class BlockConfig:
    model_dim: int = 1024
    n_heads: int = 16
    head_dim: int = 64
    mlp_dim: int = 4096
    window: Optional[int] = None
    positioning: str = "rotary"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.model_dim:
            raise ValueError(
                f"n_heads * head_dim must equal model_dim ({self.n_heads} * {self.head_dim} != {self.model_dim})"
            )
        if self.mlp_dim <= 0:
            raise ValueError("mlp_dim must be positive")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1 when set")
        if self.positioning not in POSITIONING_REGIMES:
            raise ValueError(f"unknown positioning regime {self.positioning!r}")


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs ``(2d, 2d+1)`` of the last axis by ``p * base**(-2d/head_dim)``.

    ``x`` is ``(..., seq, head_dim)``; ``positions`` is ``(seq,)`` or ``(batch, seq)`` and may
    hold non-integer values. Gradients flow into ``positions``.
    """
    head_dim = x.shape[-1]
    if head_dim % 2:
        raise ValueError(f"rotary encoding needs an even head_dim, got {head_dim}")
    if positions.shape[-1] != x.shape[-2]:
        raise ValueError(f"positions length {positions.shape[-1]} != seq length {x.shape[-2]}")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=x.dtype, device=x.device) / head_dim)
    angles = positions.to(x.dtype)[..., None] * inv_freq  # (..., seq, head_dim/2)
    if angles.dim() == 3 and x.dim() == 4:
        angles = angles[:, None]  # broadcast over heads
    cos, sin = angles.cos(), angles.sin()
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return out.flatten(-2)


def attention_mask(seq: int, window: Optional[int], device=None) -> torch.Tensor:
    """Boolean ``(seq, seq)`` mask, True where query i may attend to key j."""
    i = torch.arange(seq, device=device)[:, None]
    j = torch.arange(seq, device=device)[None, :]
    allowed = j <= i
    if window is not None:
        allowed &= j > i - window
    return allowed


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim, bias=False)
        self.out = nn.Linear(cfg.model_dim, cfg.model_dim, bias=False)

    def forward(self, x: torch.Tensor, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        cfg = self.cfg
        B, T, _ = x.shape
        if positions is not None and positions.shape[-1] != T:
            raise ValueError(f"positions length {positions.shape[-1]} != seq length {T}")
        q, k, v = self.qkv(x).view(B, T, 3, cfg.n_heads, cfg.head_dim).permute(2, 0, 3, 1, 4)
        if cfg.positioning != "none":
            if positions is None:
                positions = torch.arange(T, device=x.device)
            q = rope_rotate(q, positions, cfg.rope_base)
            k = rope_rotate(k, positions, cfg.rope_base)
        scores = (q @ k.transpose(-1, -2)) * cfg.head_dim**-0.5
        scores = scores.masked_fill(~attention_mask(T, cfg.window, x.device), float("-inf"))
        probs = torch.softmax(scores, dim=-1)  # subtracts the row max internally
        y = (probs @ v).transpose(1, 2).reshape(B, T, cfg.model_dim)
        return self.out(y)


class SwiGLU(nn.Module):
    """``down(silu(gate x) * up x)`` with intermediate width exactly ``mlp_dim``."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.gate = nn.Linear(cfg.model_dim, cfg.mlp_dim, bias=False)
        self.up = nn.Linear(cfg.model_dim, cfg.mlp_dim, bias=False)
        self.down = nn.Linear(cfg.mlp_dim, cfg.model_dim, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class TransformerLayer(nn.Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.attn_norm = RMSNorm(cfg.model_dim)
        self.attn = CausalSelfAttention(cfg)
        self.mlp_norm = RMSNorm(cfg.model_dim)
        self.mlp = SwiGLU(cfg)

    def forward(self, x, positions=None):
        x = x + self.attn(self.attn_norm(x), positions)
        return x + self.mlp(self.mlp_norm(x))

