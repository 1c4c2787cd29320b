"""
A tour of the tape
==================

Tensors, a recorded graph, a backward sweep and a finite-difference check.
"""

import numpy as np

from attnlab import ops
from attnlab.gradcheck import gradcheck
from attnlab.tensor import MemoryMeter, Tape, Tensor, backward

rng = np.random.default_rng(0)

# %%
# Two parameters and a fixed input. Only tensors with requires_grad get adjoints.
W = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="W")
b = Tensor(np.zeros(3), requires_grad=True, name="b")
x = Tensor(rng.normal(size=(4, 5)))

with Tape() as tape:
    h = ops.squared_relu(ops.add(ops.transpose(ops.matmul(W, x), (1, 0)), b))
    loss = ops.mean(h)

print("ops on the tape:", [e.op for e in tape.entries])
gW, gb = backward(loss, tape, [W, b])
print("dL/db =", np.round(gb, 4))

# %%
# The same function, re-evaluated by central differences.
def f():
    return ops.mean(ops.squared_relu(ops.add(ops.transpose(ops.matmul(W, x), (1, 0)), b)))

report = gradcheck(f, {"W": W, "b": b})
print("\n".join(report.lines()))

# %%
# The meter only sees tensor buffers, so a float32 million-vector costs 4 MB exactly.
with MemoryMeter() as meter:
    big = Tensor(np.zeros(1_000_000, dtype=np.float32))
    print("live bytes:", meter.live_bytes)
    del big
print("after free:", meter.live_bytes, "peak:", meter.peak_bytes)
