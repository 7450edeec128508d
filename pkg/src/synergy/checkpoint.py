"""Checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"SYNCKPT\\x01"
    version      u32      1
    header_len   u64
    header       header_len bytes of UTF-8 JSON (sorted keys)
    payload      raw little-endian tensor bytes, concatenated

The header holds the model kind and config, the training config, step,
router threshold, RNG state, optimizer hyper-parameters, and a tensor index
(``name``, ``dtype``, ``shape``, ``offset``, ``nbytes``) into the payload.
Tensor names prefixed ``param.`` are model parameters/buffers; ``optim.`` are
optimizer state. Writing is deterministic, so load-then-save reproduces the
file byte for byte.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .corpus import SpecialTokens
from .model import DenseLM, ModelConfig, SynergyLM, build_dense_baseline

MAGIC = b"SYNCKPT\x01"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    kind: str  # "synergy" or "dense"
    model_config: ModelConfig
    parameters: dict[str, torch.Tensor]
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer_meta: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    router_threshold: float = 0.0
    train_config: Optional[dict] = None
    rng_state: dict[str, Any] = field(default_factory=dict)
    dense: Optional[dict] = None  # vocab_size, context_length, specials for the baseline


def capture_rng_state(np_rng: Optional[np.random.Generator] = None) -> dict:
    state = {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")}
    if np_rng is not None:
        state["numpy"] = np_rng.bit_generator.state
    return state


def restore_rng_state(state: dict, np_rng: Optional[np.random.Generator] = None):
    if "torch" in state:
        raw = np.frombuffer(base64.b64decode(state["torch"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
    if np_rng is not None and "numpy" in state:
        np_rng.bit_generator.state = state["numpy"]


def _flatten_optimizer(opt_state: dict):
    """Split a torch optimizer state_dict into named tensors and JSON metadata."""
    tensors = {}
    for idx, slots in opt_state.get("state", {}).items():
        for key, value in slots.items():
            tensors[f"{idx}.{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    return tensors, {"param_groups": opt_state.get("param_groups", [])}


def optimizer_state_dict(ckpt: Checkpoint) -> dict:
    state: dict[int, dict] = {}
    for name, tensor in ckpt.optimizer_state.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = tensor
    return {"state": state, "param_groups": ckpt.optimizer_meta.get("param_groups", [])}


def make_checkpoint(model, optimizer=None, step=0, train_config=None, np_rng=None) -> Checkpoint:
    if isinstance(model, SynergyLM):
        kind, cfg, dense = "synergy", model.cfg, None
        threshold = float(model.router_threshold)
    elif isinstance(model, DenseLM):
        kind = "dense"
        cfg = getattr(model, "source_config", None)
        if cfg is None:
            raise ValueError("dense model lacks its source ModelConfig")
        sp = model.specials
        dense = {
            "vocab_size": model.vocab_size,
            "context_length": model.context_length,
            "specials": [sp.bos, sp.eos, sp.pad],
        }
        threshold = 0.0
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    opt_tensors, opt_meta = ({}, {})
    if optimizer is not None:
        opt_tensors, opt_meta = _flatten_optimizer(optimizer.state_dict())
        opt_tensors = {k: v.detach().clone() for k, v in opt_tensors.items()}
    return Checkpoint(
        kind=kind,
        model_config=cfg,
        parameters=params,
        optimizer_state=opt_tensors,
        optimizer_meta=opt_meta,
        step=step,
        router_threshold=threshold,
        train_config=train_config,
        rng_state=capture_rng_state(np_rng),
        dense=dense,
    )


def build_model(ckpt: Checkpoint):
    """Instantiate the checkpoint's model and load its parameters."""
    if ckpt.kind == "synergy":
        model = SynergyLM(ckpt.model_config)
    elif ckpt.kind == "dense":
        d = ckpt.dense
        model = build_dense_baseline(
            ckpt.model_config, d["vocab_size"], d["context_length"], SpecialTokens(*d["specials"])
        )
        model.source_config = ckpt.model_config
    else:
        raise ValueError(f"unknown model kind {ckpt.kind!r}")
    model.load_state_dict(ckpt.parameters)
    return model


def save_checkpoint(path, ckpt: Checkpoint):
    index = []
    chunks = []
    offset = 0
    for group, tensors in (("param", ckpt.parameters), ("optim", ckpt.optimizer_state)):
        for name in sorted(tensors):
            t = tensors[name].detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise TypeError(f"unsupported dtype {t.dtype} for tensor {name}")
            data = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
            index.append(
                {
                    "name": f"{group}.{name}",
                    "dtype": _DTYPES[t.dtype],
                    "shape": list(t.shape),
                    "offset": offset,
                    "nbytes": len(data),
                }
            )
            chunks.append(data)
            offset += len(data)
    header = {
        "format_version": VERSION,
        "kind": ckpt.kind,
        "model_config": ckpt.model_config.to_dict(),
        "dense": ckpt.dense,
        "train_config": ckpt.train_config,
        "step": ckpt.step,
        "router_threshold": ckpt.router_threshold,
        "rng_state": ckpt.rng_state,
        "optimizer_meta": ckpt.optimizer_meta,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(buf[start : start + header_len].decode("utf-8"))
    payload = start + header_len
    params, optim = {}, {}
    for entry in header["tensors"]:
        lo = payload + entry["offset"]
        arr = np.frombuffer(buf[lo : lo + entry["nbytes"]], dtype=entry["dtype"])
        t = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        group, name = entry["name"].split(".", 1)
        (params if group == "param" else optim)[name] = t
    return Checkpoint(
        kind=header["kind"],
        model_config=ModelConfig.from_dict(header["model_config"]),
        parameters=params,
        optimizer_state=optim,
        optimizer_meta=header["optimizer_meta"],
        step=header["step"],
        router_threshold=header["router_threshold"],
        train_config=header["train_config"],
        rng_state=header["rng_state"],
        dense=header["dense"],
    )
