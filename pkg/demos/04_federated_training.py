"""
Federated rounds with a shared codebook
=======================================

Clients train their own forecasters and only exchange the prototype
codebook.  This script runs a short federation, compares it with purely
local training and shows what crosses the wire.
"""
from __future__ import annotations

import numpy as np

from fedstg import codebook as cb
from fedstg import data as stg
from fedstg import federated as fd
from fedstg import model as mdl

# %%
# Three clients, small model, a handful of rounds.
datasets = [ds for ds, _ in stg.generate_synthetic(3, 12, 600, slots_per_day=48, seed=0)]
cfg = fd.FedConfig(gamma=3, beta=3, hidden=8, prototypes=8, code_dim=16, se_dim=8, batch_size=64, lr=0.02,
                   rounds=5, walks_per_node=4, walk_length=10)
prepared = [fd.prepare_client(ds, cfg) for ds in datasets]


def show(rec: fd.RoundRecord) -> None:
    print(f"  round {rec.round}: mean val MAE {rec.mean_val_mae:.4f}, upload {rec.bytes_up} B, codebook {rec.checksum}")


# %%
scores = {}
for variant in ("full", "local_only"):
    print(variant)
    fed = fd.Federation(fd.FedConfig(**{**fd.asdict(cfg), "variant": variant}), datasets, prepared=prepared)
    fed.run(show)
    scores[variant] = np.array([m.mae for m in fed.test_metrics()])
    print("  test MAE per client", scores[variant].round(4))

# %%
# The server only ever stores the codebook.
print("server state:", list(fed.server_state()))

# %%
# Payload at the default architecture: 32 prototypes of width 64 in
# 4-byte floats, against sending every model weight as well.
default = fd.FedConfig()
book = cb.init_codebook(default.prototypes, default.code_dim)
weights = mdl.init_params(default.model_config(1, 288))
print("codebook bytes", fd.comm_bytes(book), "| full model bytes", fd.fedavg_bytes(weights, book))
