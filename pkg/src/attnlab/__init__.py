"""attnlab: a small numpy lab for comparing attention modules in a Transformer-XL
style character language model (MHA, MDHA, RMHA, RCMHA)."""

from .attention import AttentionConfig, Variant, attention_forward
from .model import Model, ModelConfig, model_forward, param_count, param_count_formula
from .tensor import MemoryMeter, Rng, Tape, Tensor, backward

__all__ = [
    "AttentionConfig", "MemoryMeter", "Model", "ModelConfig", "Rng", "Tape", "Tensor",
    "Variant", "attention_forward", "backward", "model_forward", "param_count",
    "param_count_formula",
]
__version__ = "0.1.0"
