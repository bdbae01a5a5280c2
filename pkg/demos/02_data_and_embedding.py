"""
Synthetic spatio-temporal graphs and node embeddings
====================================================

The generator plants one daily factor shared by every client and one
factor private to each client.  Node embeddings come from biased random
walks and skip-gram with negative sampling.
"""
from __future__ import annotations

import numpy as np

from fedstg import data as stg
from fedstg import embed

# %%
# Three clients with 12 nodes each and two days at 5-minute resolution.
gen = stg.generate_synthetic(3, 12, 576, seed=0)
for k, (ds, truth) in enumerate(gen):
    share = np.var(truth.shared_signal) / np.var(ds.series)
    print(f"client {k}: series {ds.series.shape}, {int(ds.adjacency.sum() / 2)} edges, shared variance {share:.2f}")

# %%
# Sliding windows with stride one, then a chronological 7:1:2 split.
# Normalisation statistics come from the training part only.
ds = gen[0][0]
windows = stg.window(ds, 12, 12)
train, val, test = stg.split(windows)
stats = stg.fit_normalize(train)
print(len(windows), "windows ->", len(train), len(val), len(test), "| train mean", stats.mean.round(3))

# %%
# Time-of-day and day-of-week become one-hot features.
print("encoded width for 288 slots per day:", stg.encode_time(np.array([0]), 288).shape[1])

# %%
# Node2vec-style embeddings: nodes in the planted motif end up closer
# to each other than to the rest of the graph.
emb = embed.spatial_embedding(ds.adjacency, dim=16, seed=0)
unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
sim = unit @ unit.T
m = len(gen[0][1].motif_nodes)
print("mean cosine inside motif", sim[:m, :m][np.triu_indices(m, 1)].mean().round(3),
      "| motif to rest", sim[:m, m:].mean().round(3))
