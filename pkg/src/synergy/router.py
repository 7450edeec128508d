"""Token router: per-token weights, top-k selection, sigmoid gates, gather/scatter and middle positions.

For a batch of encoder outputs ``x`` of shape ``(B, T, D)``:

* ``w = Linear(x)`` one scalar per token,
* ``m`` keeps the ``k`` largest valid weights of each row (earliest position wins ties),
* ``sigma = sigmoid(w)``,
* ``y = x + m * sigma * middle(x)``.

The mask carries no gradient; the router learns only through ``sigma``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

POSITIONING_MODES = ("original", "sigma", "sigma_grad", "sigma_all", "sigma_all_grad", "none")


@dataclass
class RoutingState:
    """Router outputs for a batch.

    ``picked`` is ``(B, S)`` with ascending positions in the leading
    ``picked_valid`` slots of each row; trailing invalid slots (rows with fewer
    than ``S`` picks) hold unused positions and are ignored on scatter.
    """

    w: torch.Tensor
    mask: torch.Tensor
    sigma: torch.Tensor
    picked: torch.Tensor
    picked_valid: torch.Tensor
    k: int
    valid: Optional[torch.Tensor] = None
    middle_positions: Optional[torch.Tensor] = None

    @property
    def k_eff(self) -> torch.Tensor:
        return self.mask.sum(-1)

    def row(self, r: int) -> dict:
        """Plain-python view of one row, used by the visualizer and failure dumps."""
        n = int(self.picked_valid[r].sum())
        out = {
            "w": self.w[r].detach().cpu().tolist(),
            "m": self.mask[r].to(torch.int64).cpu().tolist(),
            "sigma": self.sigma[r].detach().cpu().tolist(),
            "picked": self.picked[r, :n].cpu().tolist(),
            "k": self.k,
        }
        if self.middle_positions is not None:
            out["middle_positions"] = self.middle_positions[r, :n].detach().cpu().tolist()
        return out


class Router(nn.Module):
    """Linear map to one scalar weight per token; zero-initialised so every gate starts at 0.5."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x).squeeze(-1)


def _pack(mask: torch.Tensor, slots: Optional[int] = None):
    """Ascending positions of ``mask`` packed to the front of ``slots`` columns."""
    B, T = mask.shape
    if slots is None:
        slots = int(mask.sum(-1).max()) if mask.numel() else 0
    pos = torch.arange(T, device=mask.device).expand(B, T)
    key = pos + T * (~mask).to(pos.dtype)
    order = torch.argsort(key, dim=-1, stable=True)[:, :slots]
    return order, torch.gather(mask, 1, order)


def topk_mask(w: torch.Tensor, k: int, valid: Optional[torch.Tensor] = None):
    """Keep the ``min(k, valid count)`` largest valid weights per row.

    Returns ``(mask, picked, picked_valid)``; ``mask`` is boolean ``(B, T)``,
    ``picked`` is ``(B, min(k, T))`` in ascending positional order. Ties go to the
    earliest position.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    squeeze = w.dim() == 1
    if squeeze:
        w = w[None]
        valid = None if valid is None else valid[None]
    w = w.detach()
    B, T = w.shape
    if valid is None:
        valid = torch.ones_like(w, dtype=torch.bool)
    valid = valid.to(torch.bool)
    slots = min(k, T)
    key = torch.where(valid, -w, torch.full_like(w, float("inf")))
    ranked = torch.argsort(key, dim=-1, stable=True)[:, :slots]
    mask = torch.zeros_like(valid)
    mask.scatter_(1, ranked, torch.gather(valid, 1, ranked))
    picked, picked_valid = _pack(mask, slots)
    if squeeze:
        return mask[0], picked[0], picked_valid[0]
    return mask, picked, picked_valid


def route_topk(w: torch.Tensor, k: int, valid: Optional[torch.Tensor] = None) -> RoutingState:
    """Full routing state for weights ``w`` of shape ``(B, T)``: top-k mask, picks and gates."""
    if valid is None:
        valid = torch.ones_like(w, dtype=torch.bool)
    mask, picked, picked_valid = topk_mask(w, k, valid)
    return RoutingState(w, mask, torch.sigmoid(w), picked, picked_valid, k, valid=valid)


def inference_threshold_route(w: torch.Tensor, threshold: float) -> torch.Tensor:
    """Causal routing for generation: pick token i iff ``w_i >= threshold``."""
    return w.detach() >= threshold


def middle_positions(state: RoutingState, mode: str, original_positions: Optional[torch.Tensor] = None):
    """Positions fed to the middle stack's rotary encoding, one per picked slot.

    * ``original``: the picked tokens' own positions,
    * ``sigma``/``sigma_grad``: inclusive cumsum of sigma over picked tokens only,
    * ``sigma_all``/``sigma_all_grad``: inclusive cumsum of sigma over all valid tokens,
      sampled at the picked tokens,
    * ``none``: zeros (ignored downstream).

    Only the ``*_grad`` modes let gradients flow from the positions back into sigma.
    """
    if mode not in POSITIONING_MODES:
        raise ValueError(f"unknown positioning mode {mode!r}; expected one of {POSITIONING_MODES}")
    picked = state.picked
    if mode == "none":
        return torch.zeros(picked.shape, dtype=state.sigma.dtype, device=picked.device)
    if mode == "original":
        if original_positions is None:
            return picked.to(state.sigma.dtype)
        original_positions = original_positions.expand(picked.shape[0], -1)
        return torch.gather(original_positions, 1, picked).to(state.sigma.dtype)
    sigma = state.sigma if mode.endswith("_grad") else state.sigma.detach()
    if mode.startswith("sigma_all"):
        acc = sigma if state.valid is None else sigma * state.valid.to(sigma.dtype)
        acc = torch.cumsum(acc, dim=-1)
    else:
        acc = torch.cumsum(sigma * state.mask.to(sigma.dtype), dim=-1)
    return torch.gather(acc, 1, picked)


def gather_compressed(x: torch.Tensor, picked: torch.Tensor) -> torch.Tensor:
    """Rows of ``x`` at ``picked``, order preserved: ``(B, T, D) -> (B, S, D)``."""
    T = x.shape[1]
    if picked.numel() and (int(picked.min()) < 0 or int(picked.max()) >= T):
        raise IndexError(f"picked index out of range for sequence length {T}")
    return torch.gather(x, 1, picked[..., None].expand(-1, -1, x.shape[-1]))


def gated_scatter_add(x: torch.Tensor, middle_out: torch.Tensor, state: RoutingState) -> torch.Tensor:
    """``y_i = x_i + sigma_i * middle_out[rank of i]`` for picked i, ``y_i = x_i`` otherwise."""
    if middle_out.shape[:2] != state.picked.shape or middle_out.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"middle output {tuple(middle_out.shape)} does not match picked {tuple(state.picked.shape)}"
        )
    gate = torch.gather(state.sigma, 1, state.picked) * state.picked_valid.to(x.dtype)
    src = middle_out * gate[..., None]
    return x.scatter_add(1, state.picked[..., None].expand_as(middle_out), src)
