"""Hybrid linear-recurrence / local-attention encoders at desk scale.

Submodules: :mod:`numerics` (tensors and reverse-mode gradients), :mod:`scan`
(token orderings), :mod:`recurrence` (delta rule, gated decay), :mod:`attention`
(local-attention layouts and the block-skipping executor), :mod:`hybrid` (the
block and model) and :mod:`harness` (tasks, training, checks, CLI).
"""

from .attention import (BlockMask, WindowSpec, attention_flops, block_census, block_sparse_attention,
                        build_dense_mask, masked_attention_reference, sparsity)
from .errors import ConfigError, GeometryError, InvariantViolation, MixerContractError
from .hybrid import HybridConfig, ModelParams, init_params, load_checkpoint, model_forward, save_checkpoint
from .numerics import GradTape, NumericError, Tensor, backward, finite_diff_check
from .recurrence import delta_chunked, delta_sequential
from .scan import Permutation, ScanPlan, apply_scan, build_permutation

__version__ = "0.1.0"

__all__ = [
    "BlockMask", "ConfigError", "GeometryError", "GradTape", "HybridConfig", "InvariantViolation",
    "MixerContractError", "ModelParams", "NumericError", "Permutation", "ScanPlan", "Tensor",
    "WindowSpec", "apply_scan", "attention_flops", "backward", "block_census", "block_sparse_attention",
    "build_dense_mask", "build_permutation", "delta_chunked", "delta_sequential", "finite_diff_check",
    "init_params", "load_checkpoint", "masked_attention_reference", "model_forward", "save_checkpoint",
    "sparsity",
]
