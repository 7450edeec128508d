"""Byte-level language model with a learned top-k router around a deep middle stack."""

from .blocks import BlockConfig
from .corpus import BYTE_SPECIALS, BYTE_VOCAB_SIZE, ByteSegment, SpecialTokens
from .model import DenseLM, ModelConfig, SynergyLM, build_dense_baseline, desk_config, paper_config, tiny_config
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BYTE_SPECIALS",
    "BYTE_VOCAB_SIZE",
    "BlockConfig",
    "ByteSegment",
    "DenseLM",
    "ModelConfig",
    "SpecialTokens",
    "SynergyLM",
    "TrainConfig",
    "build_dense_baseline",
    "desk_config",
    "evaluate",
    "paper_config",
    "tiny_config",
    "train",
]
