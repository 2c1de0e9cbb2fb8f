"""Instruction-conditioned latent diffusion for low-light image enhancement."""

from .config import Config, desk_config, full_scale_config
from .enhancer import DiffusionEnhancer
from .pipeline import (
    ModelBundle,
    build_bundle,
    enhance,
    iterative_enhance,
    load_checkpoint,
    save_checkpoint,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "Config",
    "desk_config",
    "full_scale_config",
    "DiffusionEnhancer",
    "ModelBundle",
    "build_bundle",
    "enhance",
    "iterative_enhance",
    "load_checkpoint",
    "save_checkpoint",
    "train_loop",
    "__version__",
]
