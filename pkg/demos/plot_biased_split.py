"""
Building a biased training split
================================

Subsample a pool into exact group counts, check the per-class bias ratio,
then draw group-uniform batches from the result.
"""

import numpy as np

from fairgen.groups import (ALIGNED, CONFLICTING, DatasetItem, GroupedDataset, GroupKey, SplitSpec,
                            compute_bias_ratio, construct_biased_split, group_uniform_batches)

# %%
# A pool of placeholder images with gender as the class and age as the bias.
rng = np.random.default_rng(0)
alignment = {GroupKey("male", "child"): ALIGNED, GroupKey("male", "adult"): CONFLICTING,
             GroupKey("female", "adult"): ALIGNED, GroupKey("female", "child"): CONFLICTING}
items = [DatasetItem(f"{g.class_label}-{g.bias_label}-{i}", rng.random((4, 4, 3)), g.class_label, g.bias_label, "train")
         for g in alignment for i in range(6000)]
pool = GroupedDataset(items, ("female", "male"), ("adult", "child"), alignment)

# %%
# Exact counts give roughly 0.9 aligned per class.
counts = {GroupKey("male", "adult"): 103, GroupKey("male", "child"): 934,
          GroupKey("female", "adult"): 5730, GroupKey("female", "child"): 636}
split = construct_biased_split(pool, SplitSpec(target_counts=counts, seed=0))
for g, n in sorted(split.group_sizes().items()):
    print(f"{g}: {n}")
print("bias ratio per class:", {k: round(v, 4) for k, v in compute_bias_ratio(split).items()})

# %%
# A ratio alone also works: aligned groups stay whole, conflicting ones shrink.
severe = construct_biased_split(pool, SplitSpec(bias_ratio=0.99, seed=0))
print("at 0.99:", {str(g): n for g, n in sorted(severe.group_sizes().items())})

# %%
# Group-uniform batches ignore how rare a group is.
gid = split.group_indices()
seen = np.zeros(len(split.all_groups()), dtype=int)
for ix in group_uniform_batches(split, 16, seed=0, n_batches=2000):
    seen += np.bincount(gid[ix], minlength=len(seen))
print("draws per group:", dict(zip(map(str, split.all_groups()), seen.tolist())))
