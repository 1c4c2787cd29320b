"""
Depth-wise convolutions and segment memory
==========================================

With delta kernels the convolution is the identity, so RCMHA starts out as
RMHA. Memory carries hidden states across segments; feeding two segments one
after another matches feeding them as one long segment.
"""

import numpy as np

from attnlab import ModelConfig, Rng, Variant
from attnlab.model import init_params, model_forward
from attnlab.verify import random_model_params

rng = np.random.default_rng(2)

# %%
cfg = ModelConfig(vocab_size=20, n_layers=2, d_model=16, heads=4, seg_len=6, mem_len=6,
                  variant=Variant.RMHA)
plain = init_params(cfg, Rng(0), np.float64)
conv = init_params(cfg.replace(variant=Variant.RCMHA), Rng(1), np.float64)
for name, t in plain.items():
    conv[name].data[...] = t.data  # the dwc kernels keep their [0, 0, 1] init

tokens = rng.integers(0, 20, size=(2, 6))
a, _ = model_forward(tokens, None, plain, cfg)
b, _ = model_forward(tokens, None, conv, cfg.replace(variant=Variant.RCMHA))
print("RCMHA vs RMHA at init:", np.abs(a.data - b.data).max())

# %%
# Random weights now (kernels included), two segments of 6 against one of 12.
cfg = cfg.replace(variant=Variant.RCMHA)
params = random_model_params(cfg, rng)
long = rng.integers(0, 20, size=(2, 12))

_, mem = model_forward(long[:, :6], None, params, cfg)
second, _ = model_forward(long[:, 6:], mem, params, cfg)
joint, _ = model_forward(long, None, params, cfg.replace(seg_len=12, mem_len=12))
print("segment-by-segment vs joint:", np.abs(second.data - joint.data[:, 6:]).max())
print("memory shapes:", [m.shape for m in mem])
