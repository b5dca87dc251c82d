"""Prompt-enhanced interactive segmentation: click-driven iterative mask
refinement with a warm-start first interaction, prompt-attention feature
fusion, and a temporal recurrence across interactions."""

__version__ = "0.1.0"

from .backbone import ModelConfig, PemedModel, load_checkpoint, save_checkpoint
from .engine import InteractiveSession, binarize, refine, self_loop_init
from .harness import dsc, next_click, noc, run_benchmark
from .prompts import Click, assemble_input, load_image, render_disk_map
from .tensor import AttentionConfig, Tensor, attention, grad_check
from .training import TrainConfig, normalized_focal_loss, train

__all__ = [
    "AttentionConfig",
    "Click",
    "InteractiveSession",
    "ModelConfig",
    "PemedModel",
    "Tensor",
    "TrainConfig",
    "assemble_input",
    "attention",
    "binarize",
    "dsc",
    "grad_check",
    "load_checkpoint",
    "load_image",
    "next_click",
    "noc",
    "normalized_focal_loss",
    "refine",
    "render_disk_map",
    "run_benchmark",
    "save_checkpoint",
    "self_loop_init",
    "train",
]
