"""Run configuration: TOML file, environment overrides, then ``--set`` flag overrides.

A config file mirrors the dataclass field names::

    preset = "desk"            # optional starting point: paper | desk | tiny

    [model]
    k = 56
    positioning = "none"

    [model.block]
    window = 32

    [train]
    lr = 0.003
    total_steps = 2000

Environment variables ``SYNERGY_<SECTION>__<FIELD>`` (``SYNERGY_TRAIN__LR=1e-3``,
``SYNERGY_MODEL__BLOCK__WINDOW=64``) override the file; ``--set train.lr=1e-3``
flags override both. Values are parsed as TOML scalars, falling back to strings.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .blocks import BlockConfig
from .model import PRESETS, ModelConfig
from .training import TrainConfig

ENV_PREFIX = "SYNERGY_"
_SECTIONS = ("model", "train")


def parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_path(tree: dict, path: list[str], value):
    for key in path[:-1]:
        tree = tree.setdefault(key, {})
    tree[path[-1]] = value


def _check_keys(tree: dict):
    model_fields = {f.name for f in fields(ModelConfig)}
    block_fields = {f.name for f in fields(BlockConfig)}
    train_fields = {f.name for f in fields(TrainConfig)}
    for key in tree.get("model", {}):
        if key not in model_fields:
            raise KeyError(f"unknown model field {key!r}")
    for key in tree.get("model", {}).get("block", {}) or {}:
        if key not in block_fields:
            raise KeyError(f"unknown block field {key!r}")
    for key in tree.get("train", {}):
        if key not in train_fields:
            raise KeyError(f"unknown train field {key!r}")
    for key in tree:
        if key not in (*_SECTIONS, "preset"):
            raise KeyError(f"unknown config section {key!r}")


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree: dict = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        if path[0] not in _SECTIONS and path != ["preset"]:
            continue  # other SYNERGY_* variables, e.g. the numba switch
        _set_path(tree, path, parse_scalar(value))
    return tree


def _merge(base: dict, extra: dict):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def load_config(
    path: Optional[str] = None,
    sets: Optional[list[str]] = None,
    preset: Optional[str] = None,
    environ=None,
) -> tuple[ModelConfig, TrainConfig]:
    tree: dict = {}
    if path:
        with open(Path(path), "rb") as fh:
            tree = tomllib.load(fh)
    _merge(tree, env_overrides(environ))
    for item in sets or []:
        if "=" not in item:
            raise ValueError(f"--set expects section.field=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(tree, key.strip().split("."), parse_scalar(value.strip()))
    if preset:
        tree["preset"] = preset
    _check_keys(tree)
    preset_name = tree.get("preset", "desk")
    if preset_name not in PRESETS:
        raise ValueError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
    model_tree = asdict(PRESETS[preset_name]())
    _merge(model_tree, tree.get("model", {}))
    model_cfg = ModelConfig.from_dict(model_tree)
    train_cfg = TrainConfig.from_dict(tree.get("train", {}))
    return model_cfg, train_cfg
