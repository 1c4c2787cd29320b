"""
A short training run on Tiny Shakespeare
========================================

A small RCMHA model for a couple of hundred steps. The full desk-scale run
(d_model 128, 2000 steps) is ``attnlab train``; this one takes a few seconds.
"""

import math

from attnlab import ModelConfig, Variant
from attnlab.training import RunConfig, build_vocab, load_corpus, train

data = build_vocab(load_corpus())
print(f"{len(data.text):,} characters, vocabulary of {data.vocab_size}")
print("uniform baseline loss:", round(math.log(data.vocab_size), 4))

# %%
cfg = ModelConfig(vocab_size=data.vocab_size, n_layers=2, d_model=64, heads=4,
                  seg_len=32, mem_len=32, variant=Variant.RCMHA)
run = RunConfig(steps=200, batch=16, seed=42, log_every=25, eval_batches=20)

result = train(cfg, run, dataset=data,
               on_record=lambda r: print(f"{r.split:5s} step {r.step:4d}  loss {r.loss:.3f}  "
                                         f"acc {r.accuracy:.3f}  ppl {r.ppl:.2f}"))

# %%
print("parameters:", result.final.params)
print("peak tensor bytes:", result.peak_mem_bytes)
