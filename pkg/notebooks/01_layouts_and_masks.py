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
# # Layouts and attention masks
#
# A six-token sentence, predicted in the order 4, 6, 2 after keeping 1, 3, 5.
# Everything below is built from that one plan.

# %%
import numpy as np

from mpnet_lab.masks import mpnet_masks, plm_masks, render, strip_compensation
from mpnet_lab.objectives import conditioning_table, format_info
from mpnet_lab.permute import PermutationPlan, build_layout, symbolic_tokens

plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
layout = build_layout(plan, np.arange(10, 16))
print(" ".join(symbolic_tokens(layout)))
print(" ".join(f"p{p + 1}" for p in layout.input_positions))

# %% [markdown]
# Slots 0-2 hold the kept tokens, 3-5 the mask tokens (one per predicted
# position), 6-8 the true predicted tokens. The mask slots are what lets a
# prediction know where the later targets sit.

# %%
masks = mpnet_masks(plan)
print(render(masks))
print("row sums:", masks.content_allow.sum(1), masks.query_allow.sum(1))

# %% [markdown]
# Dropping the mask-slot permissions (except each step's own carrier) gives
# the permuted-LM masks exactly.

# %%
plm = plm_masks(PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3, mode="plm"))
print(strip_compensation(masks, plan) == plm)
print(render(plm).split("query")[1])

# %% [markdown]
# What each objective conditions on, for a five-word sentence whose last two
# words are predicted.

# %%
for line in conditioning_table("the river carries golden light".split(), [3, 4]):
    print(line)

# %%
for mode in ("mlm", "plm", "mpnet"):
    print(f"{mode:6s}", format_info(mode, 0.15))
