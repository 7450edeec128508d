"""The encoder / routed middle / decoder byte language model and its dense baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import BlockConfig, RMSNorm, TransformerLayer
from .corpus import BYTE_SPECIALS, BYTE_VOCAB_SIZE, SpecialTokens
from .router import (
    POSITIONING_MODES,
    Router,
    RoutingState,
    _pack,
    gated_scatter_add,
    gather_compressed,
    inference_threshold_route,
    middle_positions,
    route_topk,
)

# middle-stack attention regime per positioning mode
_MIDDLE_REGIME = {
    "original": "rotary",
    "sigma": "rotary_real",
    "sigma_grad": "rotary_real",
    "sigma_all": "rotary_real",
    "sigma_all_grad": "rotary_real",
    "none": "none",
}


@dataclass
class ModelConfig:
    vocab_size: int = BYTE_VOCAB_SIZE
    context_length: int = 1024
    enc_layers: int = 4
    mid_layers: int = 24
    dec_layers: int = 4
    block: BlockConfig = field(default_factory=lambda: BlockConfig(window=128))
    k: int = 224
    positioning: str = "none"
    tie_embeddings: bool = False
    zero_init_middle_out: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.block, dict):
            self.block = BlockConfig(**self.block)
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("enc_layers and dec_layers must be >= 1")
        if self.mid_layers < 0:
            raise ValueError("mid_layers must be >= 0")
        if not 1 <= self.k <= self.context_length:
            raise ValueError(f"k must lie in [1, context_length], got {self.k}")
        if self.positioning not in POSITIONING_MODES:
            raise ValueError(f"unknown positioning mode {self.positioning!r}")

    @property
    def n_layers(self) -> int:
        return self.enc_layers + self.mid_layers + self.dec_layers

    def local_block(self) -> BlockConfig:
        return replace(self.block, positioning="rotary")

    def middle_block(self) -> BlockConfig:
        return replace(self.block, window=None, positioning=_MIDDLE_REGIME[self.positioning])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def paper_config(**overrides) -> ModelConfig:
    """4/24/4 layers, dim 1024, 16x64 heads, SwiGLU 4096, 1024 bytes, k=224."""
    cfg = ModelConfig(
        vocab_size=BYTE_VOCAB_SIZE,
        context_length=1024,
        enc_layers=4,
        mid_layers=24,
        dec_layers=4,
        block=BlockConfig(model_dim=1024, n_heads=16, head_dim=64, mlp_dim=4096, window=128),
        k=224,
        positioning="none",
    )
    return replace(cfg, **overrides)


def desk_config(**overrides) -> ModelConfig:
    """Proportional shrink of :func:`paper_config` that trains on a CPU; k/T stays 21.875%."""
    cfg = ModelConfig(
        vocab_size=BYTE_VOCAB_SIZE,
        context_length=256,
        enc_layers=2,
        mid_layers=4,
        dec_layers=2,
        block=BlockConfig(model_dim=128, n_heads=4, head_dim=32, mlp_dim=512, window=32),
        k=56,
        positioning="none",
    )
    return replace(cfg, **overrides)


def tiny_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(
        vocab_size=BYTE_VOCAB_SIZE,
        context_length=24,
        enc_layers=1,
        mid_layers=2,
        dec_layers=1,
        block=BlockConfig(model_dim=32, n_heads=4, head_dim=8, mlp_dim=64, window=6),
        k=8,
        positioning="none",
    )
    return replace(cfg, **overrides)


PRESETS = {"paper": paper_config, "desk": desk_config, "tiny": tiny_config}


def _init_weights(module: nn.Module, std: float, n_layers: int):
    for name, p in module.named_parameters():
        if p.dim() < 2:
            continue
        if name.endswith("attn.out.weight") or name.endswith("mlp.down.weight"):
            nn.init.normal_(p, std=std / math.sqrt(2 * max(n_layers, 1)))
        else:
            nn.init.normal_(p, std=std)


class SynergyLM(nn.Module):
    """Byte LM whose middle stack only sees the ``k`` tokens the router picks."""

    def __init__(self, cfg: ModelConfig, specials: SpecialTokens = BYTE_SPECIALS):
        super().__init__()
        self.cfg = cfg
        self.specials = specials
        d = cfg.block.model_dim
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.encoder = nn.ModuleList(TransformerLayer(cfg.local_block()) for _ in range(cfg.enc_layers))
        self.router = Router(d)
        self.middle = nn.ModuleList(TransformerLayer(cfg.middle_block()) for _ in range(cfg.mid_layers))
        self.middle_norm = RMSNorm(d)
        self.middle_out = nn.Linear(d, d, bias=False)
        self.decoder = nn.ModuleList(TransformerLayer(cfg.local_block()) for _ in range(cfg.dec_layers))
        self.final_norm = RMSNorm(d)
        self.head = nn.Linear(d, cfg.vocab_size, bias=False)
        _init_weights(self, cfg.init_std, cfg.n_layers)
        if cfg.tie_embeddings:
            self.head.weight = self.embed.weight
        if cfg.zero_init_middle_out:
            nn.init.zeros_(self.middle_out.weight)
        # routing threshold used at generation time; calibrated after training
        self.register_buffer("router_threshold", torch.tensor(0.0, dtype=torch.float64))

    # -- stages ------------------------------------------------------------

    def encode(self, h: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(h.shape[1], device=h.device)
        for layer in self.encoder:
            h = layer(h, pos)
        return h

    def route(
        self,
        x: torch.Tensor,
        valid: torch.Tensor,
        routing: str = "topk",
        mask: Optional[torch.Tensor] = None,
    ) -> RoutingState:
        """Router weights, mask and packed picks. ``mask`` forces a selection."""
        w = self.router(x)
        if mask is None and routing == "topk":
            state = route_topk(w, self.cfg.k, valid)
        else:
            if mask is not None:
                mask = mask.to(torch.bool) & valid
            elif routing == "threshold":
                mask = inference_threshold_route(w, float(self.router_threshold)) & valid
            else:
                raise ValueError(f"unknown routing {routing!r}")
            picked, picked_valid = _pack(mask)
            state = RoutingState(w, mask, torch.sigmoid(w), picked, picked_valid, self.cfg.k, valid=valid)
        state.middle_positions = middle_positions(state, self.cfg.positioning)
        return state

    def run_middle(self, xc: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """Middle stack over the compressed sequence, followed by norm and output projection."""
        for layer in self.middle:
            xc = layer(xc, positions)
        return self.middle_out(self.middle_norm(xc))

    def decode(self, y: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(y.shape[1], device=y.device)
        for layer in self.decoder:
            y = layer(y, pos)
        return self.head(self.final_norm(y))

    # -- full passes -------------------------------------------------------

    def _check_ids(self, ids):
        if ids.shape[-1] > self.cfg.context_length:
            raise ValueError(f"sequence of {ids.shape[-1]} exceeds context_length={self.cfg.context_length}")
        if ids.numel() and (int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0):
            raise ValueError("token id outside the vocabulary")

    def forward(
        self,
        ids: torch.Tensor,
        valid: Optional[torch.Tensor] = None,
        routing: str = "topk",
        mask: Optional[torch.Tensor] = None,
        embeds: Optional[torch.Tensor] = None,
    ):
        """Logits ``(B, T, vocab)`` and the :class:`RoutingState`.

        ``embeds`` replaces the embedding lookup (used for perturbation tests).
        """
        self._check_ids(ids)
        if valid is None:
            valid = ids != self.specials.pad
        h = self.embed(ids) if embeds is None else embeds
        x = self.encode(h)
        state = self.route(x, valid, routing, mask)
        if state.picked.shape[1] > 0:
            xc = gather_compressed(x, state.picked)
            y = gated_scatter_add(x, self.run_middle(xc, state.middle_positions), state)
        else:
            y = x
        return self.decode(y), state

    def forward_bypass(self, ids: torch.Tensor, embeds: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Encoder then decoder with no middle contribution."""
        self._check_ids(ids)
        h = self.embed(ids) if embeds is None else embeds
        return self.decode(self.encode(h))


class DenseLM(nn.Module):
    """Plain decoder-only stack: full causal attention, rotary positions, no router."""

    def __init__(self, block: BlockConfig, n_layers: int, vocab_size: int, context_length: int,
                 specials: SpecialTokens, tie_embeddings: bool = False, init_std: float = 0.02):
        super().__init__()
        self.block = replace(block, window=None, positioning="rotary")
        self.n_layers = n_layers
        self.vocab_size = vocab_size
        self.context_length = context_length
        self.specials = specials
        d = block.model_dim
        self.embed = nn.Embedding(vocab_size, d)
        self.layers = nn.ModuleList(TransformerLayer(self.block) for _ in range(n_layers))
        self.final_norm = RMSNorm(d)
        self.head = nn.Linear(d, vocab_size, bias=False)
        _init_weights(self, init_std, n_layers)
        if tie_embeddings:
            self.head.weight = self.embed.weight

    def forward(self, ids: torch.Tensor, **_):
        if ids.shape[-1] > self.context_length:
            raise ValueError(f"sequence of {ids.shape[-1]} exceeds context_length={self.context_length}")
        h = self.embed(ids)
        pos = torch.arange(ids.shape[1], device=ids.device)
        for layer in self.layers:
            h = layer(h, pos)
        return self.head(self.final_norm(h)), None


def build_dense_baseline(
    cfg: ModelConfig,
    vocab_size: Optional[int] = None,
    context_length: Optional[int] = None,
    specials: Optional[SpecialTokens] = None,
) -> DenseLM:
    """Baseline with as many layers as the routed model has in total, same block shape.

    Pass a BPE vocabulary's ``vocab_size``/``specials`` to pair it with a BPE tokenizer.
    """
    vocab_size = cfg.vocab_size if vocab_size is None else vocab_size
    if specials is None:
        specials = BYTE_SPECIALS if vocab_size == BYTE_VOCAB_SIZE else SpecialTokens.after(vocab_size - 3)
    model = DenseLM(
        cfg.block,
        cfg.n_layers,
        vocab_size,
        cfg.context_length if context_length is None else context_length,
        specials,
        cfg.tie_embeddings,
        cfg.init_std,
    )
    model.source_config = cfg
    return model


def count_params(model: nn.Module) -> int:
    """Exact number of distinct trainable scalars (tied weights counted once)."""
    return sum(p.numel() for p in model.parameters())


def loss(logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor):
    """Mean next-token cross entropy in nats over positions whose target is unmasked.

    ``loss_mask[:, i]`` refers to the target ``ids[:, i + 1]``. Returns
    ``(mean_nats, per_position_nats)``; the per-position tensor has ``T - 1`` columns
    and is zero where masked.
    """
    m = loss_mask[:, :-1].to(logits.dtype)
    total = m.sum()
    if float(total) == 0:
        raise ValueError("loss mask selects no target")
    ce = F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1), reduction="none"
    ).view_as(m)
    per_pos = ce * m
    return per_pos.sum() / total, per_pos


@torch.no_grad()
def generate(
    model: SynergyLM,
    prompt: bytes,
    max_new: int,
    temperature: float = 0.0,
    seed: Optional[int] = None,
) -> bytes:
    """Sample bytes after ``prompt`` using causal threshold routing.

    Returns ``prompt`` followed by the new bytes. Sampling stops at eos. When the
    sequence outgrows the context, the oldest bytes are dropped from the model's
    view (the returned bytes keep them). Temperature 0 is greedy decoding.
    """
    model.eval()
    specials = model.specials
    context = model.cfg.context_length
    out = list(prompt)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    # only bytes and eos are sampled
    allowed = torch.full((model.cfg.vocab_size,), float("-inf"))
    allowed[:256] = 0.0
    allowed[specials.eos] = 0.0
    for _ in range(max_new):
        window = out[-(context - 1) :] if context > 1 else []
        ids = torch.tensor([[specials.bos] + window], dtype=torch.long)
        logits, _ = model(ids, routing="threshold")
        last = logits[0, -1].double() + allowed.double()
        if temperature <= 0:
            nxt = int(torch.argmax(last))
        else:
            probs = torch.softmax(last / temperature, dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=gen))
        if nxt == specials.eos:
            break
        out.append(nxt)
    return bytes(out)


def routing_arrays(state: RoutingState) -> dict:
    """Numpy copies of a routing state, for dumps."""
    return {
        "w": state.w.detach().cpu().numpy(),
        "mask": state.mask.cpu().numpy(),
        "sigma": state.sigma.detach().cpu().numpy(),
        "picked": state.picked.cpu().numpy(),
        "picked_valid": state.picked_valid.cpu().numpy(),
    }


__all__ = [
    "ModelConfig",
    "SynergyLM",
    "DenseLM",
    "build_dense_baseline",
    "count_params",
    "loss",
    "generate",
    "paper_config",
    "desk_config",
    "tiny_config",
    "PRESETS",
]
