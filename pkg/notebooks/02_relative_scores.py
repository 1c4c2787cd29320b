"""
Relative position scores, slow and fast
=======================================

The slow path looks up one relative offset per (query, key) pair. The fast
path multiplies every query against the whole offset table once and then
re-indexes the result with a strided view.
"""

import numpy as np

from attnlab import ops
from attnlab.attention import rel_scores_naive, rel_scores_shifted, relative_offsets
from attnlab.tensor import Tensor

rng = np.random.default_rng(1)
heads, d_head, q_len, mem = 2, 4, 3, 2
k_len = q_len + mem

print("offsets in the table:", relative_offsets(k_len, q_len))

# %%
# For query i, key j the offset is (mem + i) - j. Negative offsets point at
# the future and will be masked, but keeping them makes the shift exact.
for i in range(q_len):
    print(f"query {i}:", [(mem + i) - j for j in range(k_len)])

# %%
q = rng.normal(size=(1, heads, q_len, d_head))
k = rng.normal(size=(1, heads, k_len, d_head))
r = rng.normal(size=(heads, k_len + q_len - 1, d_head))
u, v = rng.normal(size=(heads, d_head)), rng.normal(size=(heads, d_head))

slow = rel_scores_naive(q, k, r, u, v)
fast = rel_scores_shifted(Tensor(q), Tensor(k), Tensor(r), Tensor(u), Tensor(v)).data
print("max |fast - slow| =", np.abs(fast - slow).max())

# %%
# What the shift does on a labelled table: row i reads columns q_len-1-i ... onwards.
full = np.arange(q_len * (k_len + q_len - 1)).reshape(1, q_len, -1).astype(float)
print(full[0])
print(ops.rel_shift(Tensor(full), k_len).data[0])
