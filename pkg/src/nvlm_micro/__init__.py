"""Desk-scale decoder-only (D), cross-attention (X) and hybrid (H) multimodal
language model architectures with dynamic high-resolution tiling."""

from .config import ArchConfig, Config, EncoderConfig, TrainConfig
from .model import ARCHS, NVLMModel, TrainingExample
from .sequence import TagScheme, Tokenizer
from .tiler import DEFAULT_RATIOS, Image, RatioSet, TileLayout

__all__ = [
    "ARCHS",
    "ArchConfig",
    "Config",
    "DEFAULT_RATIOS",
    "EncoderConfig",
    "Image",
    "NVLMModel",
    "RatioSet",
    "TagScheme",
    "TileLayout",
    "Tokenizer",
    "TrainConfig",
    "TrainingExample",
]

__version__ = "0.1.0"
