"""Multi-scale Vision Longformer: attention kernels, model stack and cost accounting in NumPy."""

from .complexity import CostReport, attn_pairs, flops_model, interior_pairs_per_token, memory_theoretical
from .configs import ModelConfig, StageConfig, load_config, registry_lookup, with_attention, with_windows
from .model import Model, model_forward, param_count

__version__ = "0.1.0"

__all__ = [
    "CostReport", "Model", "ModelConfig", "StageConfig", "attn_pairs", "flops_model",
    "interior_pairs_per_token", "load_config", "memory_theoretical", "model_forward",
    "param_count", "registry_lookup", "with_attention", "with_windows",
]
