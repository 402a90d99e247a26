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
# # Who sees what
#
# Perturb every token and every position of a small sentence and record
# which prediction steps move. Compare with the sets read off the masks.

# %%
import numpy as np

from mpnet_lab.analysis import mask_closure, probe_dependencies
from mpnet_lab.masks import masks_for
from mpnet_lab.model import ModelConfig, init_params
from mpnet_lab.permute import PermutationPlan, build_layout

cfg = ModelConfig(layers=2, hidden=16, heads=2, ffn=32, vocab=20, max_pos=16, rel_buckets=8,
                  rel_max_dist=16, dropout=0.0)
params = init_params(cfg, seed=0, std=0.5)
ids = np.array([5, 9, 7, 12, 6, 8])

# %%
for mode in ("mpnet", "plm", "mlm_od", "mlm"):
    order = [1, 3, 5, 4, 6, 2] if mode in ("mpnet", "plm") else [1, 3, 5, 2, 4, 6]
    plan = PermutationPlan.from_order(order, c=3, mode=mode)
    layout = build_layout(plan, ids)
    rep = probe_dependencies(params, cfg, layout, masks_for(plan))
    same = rep == mask_closure(layout, masks_for(plan), cfg.layers)
    print(f"== {mode} (matches closure: {same})")
    print(rep.render())

# %% [markdown]
# The mpnet rows see every position from the first step; plm only gains
# positions as it predicts. The mlm rows never see each other's tokens.
# The size of the largest logit change per (step, position) is kept too:

# %%
plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
rep = probe_dependencies(params, cfg, build_layout(plan, ids), masks_for(plan))
np.set_printoptions(precision=3, suppress=True)
print(rep.token_change)
