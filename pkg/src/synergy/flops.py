"""Analytic forward-pass FLOPs for the routed model and the dense baseline.

A multiply-add counts as 2 FLOPs. Per layer over ``T`` tokens:

* MLP (SwiGLU, three ``d x mlp_dim`` matmuls): ``6 * T * d * mlp_dim``
* attention projections (q, k, v, out): ``8 * T * d**2``
* attention scores and value mixing: ``4 * d * sum_i span_i`` where ``span_i`` is
  ``min(i + 1, window)`` for local attention and ``i + 1`` for full causal attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .model import ModelConfig

LLAMA3_VOCAB = 128_256
BYTES_PER_TOKEN = 4.25


@dataclass
class LayerFlops:
    mlp: int
    attn_proj: int
    attn_mix: int

    @property
    def attn(self) -> int:
        return self.attn_proj + self.attn_mix

    @property
    def total(self) -> int:
        return self.mlp + self.attn

    def __mul__(self, n: int) -> "LayerFlops":
        return LayerFlops(self.mlp * n, self.attn_proj * n, self.attn_mix * n)

    def __add__(self, other: "LayerFlops") -> "LayerFlops":
        return LayerFlops(self.mlp + other.mlp, self.attn_proj + other.attn_proj, self.attn_mix + other.attn_mix)


def span_sum(T: int, window: Optional[int]) -> int:
    """``sum_{i<T} min(i + 1, window)``; full causal when ``window`` is None."""
    if window is None or window >= T:
        return T * (T + 1) // 2
    return window * (window + 1) // 2 + (T - window) * window


def layer_flops(T: int, d: int, mlp_dim: int, window: Optional[int] = None) -> LayerFlops:
    return LayerFlops(
        mlp=6 * T * d * mlp_dim,
        attn_proj=8 * T * d * d,
        attn_mix=4 * d * span_sum(T, window),
    )


@dataclass
class FlopsReport:
    synergy_flops: int
    baseline_flops: int
    ratio: float
    synergy_layers: LayerFlops
    baseline_layers: LayerFlops
    synergy_extra: int  # router, middle output projection, output head
    baseline_extra: int  # output head
    breakdown: dict = field(default_factory=dict)

    @property
    def layer_ratio(self) -> float:
        return self.synergy_layers.total / self.baseline_layers.total

    @property
    def mlp_share_of_extra(self) -> float:
        """Fraction of the routed model's extra layer FLOPs that comes from MLPs."""
        extra = self.synergy_layers.total - self.baseline_layers.total
        if extra <= 0:
            return 0.0
        return (self.synergy_layers.mlp - self.baseline_layers.mlp) / extra

    def as_dict(self) -> dict:
        return {
            "synergy_flops": self.synergy_flops,
            "baseline_flops": self.baseline_flops,
            "ratio": self.ratio,
            "layer_ratio": self.layer_ratio,
            "mlp_share_of_extra": self.mlp_share_of_extra,
            "synergy_mlp": self.synergy_layers.mlp,
            "synergy_attn": self.synergy_layers.attn,
            "baseline_mlp": self.baseline_layers.mlp,
            "baseline_attn": self.baseline_layers.attn,
            "synergy_extra": self.synergy_extra,
            "baseline_extra": self.baseline_extra,
            **self.breakdown,
        }


def estimate_flops(
    cfg: ModelConfig,
    seq_bytes: Optional[int] = None,
    k: Optional[int] = None,
    baseline_tokens: Optional[int] = None,
    baseline_vocab: Optional[int] = None,
    layers: Optional[tuple[int, int, int]] = None,
) -> FlopsReport:
    """Forward FLOPs for one sequence of ``seq_bytes`` bytes.

    The routed model runs encoder and decoder over ``seq_bytes`` positions and the
    middle over ``k``; the baseline runs all ``enc + mid + dec`` layers, full causal,
    over ``baseline_tokens`` tokens (default ``round(seq_bytes / 4.25)``).
    Totals include the output heads; the MLP share is taken over layer FLOPs.
    ``layers`` overrides ``(enc, mid, dec)`` layer counts, zeros allowed.
    """
    seq_bytes = cfg.context_length if seq_bytes is None else seq_bytes
    k = cfg.k if k is None else k
    baseline_tokens = round(seq_bytes / BYTES_PER_TOKEN) if baseline_tokens is None else baseline_tokens
    baseline_vocab = cfg.vocab_size if baseline_vocab is None else baseline_vocab
    if min(seq_bytes, k, baseline_tokens) <= 0:
        raise ValueError("token counts must be positive")
    b = cfg.block
    d = b.model_dim
    local = layer_flops(seq_bytes, d, b.mlp_dim, b.window)
    middle = layer_flops(k, d, b.mlp_dim, None)
    dense = layer_flops(baseline_tokens, d, b.mlp_dim, None)
    n_enc, n_mid, n_dec = layers or (cfg.enc_layers, cfg.mid_layers, cfg.dec_layers)
    enc = local * n_enc
    dec = local * n_dec
    mid = middle * n_mid
    syn_layers = enc + mid + dec
    base_layers = dense * (n_enc + n_mid + n_dec)
    router = 2 * seq_bytes * d
    middle_out = 2 * k * d * d
    syn_head = 2 * seq_bytes * d * cfg.vocab_size
    base_head = 2 * baseline_tokens * d * baseline_vocab
    syn_total = syn_layers.total + router + middle_out + syn_head
    base_total = base_layers.total + base_head
    return FlopsReport(
        synergy_flops=syn_total,
        baseline_flops=base_total,
        ratio=syn_total / base_total,
        synergy_layers=syn_layers,
        baseline_layers=base_layers,
        synergy_extra=router + middle_out + syn_head,
        baseline_extra=base_head,
        breakdown={
            "encoder": enc.total,
            "middle": mid.total,
            "decoder": dec.total,
            "synergy_head": syn_head,
            "baseline_head": base_head,
            "seq_bytes": seq_bytes,
            "k": k,
            "baseline_tokens": baseline_tokens,
            "baseline_vocab": baseline_vocab,
        },
    )
