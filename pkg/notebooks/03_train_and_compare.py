# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Training the four objectives
#
# Short runs on a bigram grammar: the word after `a` is always `b`, and
# likewise for `c d`, `e f`, `g h`. Everything else is noise. Set
# `MPNET_LAB_STEPS` for longer runs; the default keeps the notebook quick.

# %%
import os

import numpy as np

from mpnet_lab.corpora import bigram_corpus, classification_task, toy_corpus
from mpnet_lab.model import ModelConfig, init_params
from mpnet_lab.objectives import dependency_demo
from mpnet_lab.tokenizer import CLS, SEP, encode
from mpnet_lab.trainer import FinetuneConfig, TrainConfig, finetune, pretrain

steps = int(os.environ.get("MPNET_LAB_STEPS", "60"))
model = ModelConfig(layers=2, hidden=32, heads=4, ffn=64, max_pos=64, dropout=0.0)
corpus = bigram_corpus(400, seed=0)
print(corpus[:3])

# %%
runs = {}
for mode in ("mpnet", "plm", "mlm_od", "mlm"):
    cfg = TrainConfig(mode=mode, total_steps=steps, lr=1e-3, max_len=64, vocab_size=64, predict_ratio=0.3)
    runs[mode] = pretrain(cfg, corpus, model)
    losses = [m.loss for m in runs[mode].metrics]
    print(f"{mode:7s} first {losses[0]:.3f}  last {np.mean(losses[-10:]):.3f}")

# %% [markdown]
# Probability of the second word of a pair, once with the first word
# already predicted and once with it still masked.

# %%
held_out = bigram_corpus(20, seed=99)
for mode, res in runs.items():
    p_rev, p_mask = [], []
    for line in held_out:
        ids = [CLS] + encode(res.vocab, line).ids + [SEP]
        demo = dependency_demo(res.params, res.model_cfg, ids, 3, 4, mode)
        p_rev.append(demo.p_revealed)
        p_mask.append(demo.p_masked)
    print(f"{mode:7s} revealed {np.mean(p_rev):.3f}  masked {np.mean(p_mask):.3f}")

# %% [markdown]
# Fine-tuning reads only the content stream.

# %%
rows = classification_task(120, seed=0)
res = runs["mpnet"]
ft = finetune(res.params, res.model_cfg, res.vocab, rows[:80], rows[80:], FinetuneConfig(epochs=3, lr=1e-3))
print("dev accuracy", ft.accuracy)
