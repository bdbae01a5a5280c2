"""
One forward pass: separation masks, codebook queries and the local loss
=======================================================================

A single client's model splits each branch's features into a shared part
and a client-specific part with complementary soft masks.  The shared part
queries the prototype codebook, and a hard-negative contrastive loss pulls
it towards its best prototype.
"""
from __future__ import annotations

import numpy as np

from fedstg import codebook as cb
from fedstg import data as stg
from fedstg import embed
from fedstg import model as mdl
from fedstg.autodiff import Tape

# %%
(ds, _), = stg.generate_synthetic(1, 10, 400, slots_per_day=48, seed=1)
train, _, _ = stg.split(stg.window(ds, 6, 6))
norm = stg.fit_normalize(train)
x, y, hs, ts = stg.stack_windows(train[:8])
stamps = np.concatenate([hs, ts], axis=1)
cfg = mdl.ModelConfig(hidden=16, se_dim=8, slots_per_day=48, code_dim=16)
se = embed.spatial_embedding(ds.adjacency, dim=8, seed=0)
batch = mdl.Batch(norm.apply(x), norm.apply(y), stg.encode_time(stamps, 48), se)

# %%
tape = Tape()
params = {k: tape.leaf(v, name=k) for k, v in mdl.init_params(cfg, 0).items()}
delta = tape.leaf(cb.init_codebook(8, 16, seed=0).delta, name="delta")
losses, out = mdl.training_loss(tape, params, batch, cfg, delta, None)
print(f"mse {losses.l_mse:.4f}  contrastive {losses.l_com:.4f}  irm {losses.l_irm:.6f}  total {losses.l_local:.4f}")

# %%
# The two masks add up to one exactly, element by element.
for name, sep in out.encoder.items():
    total = sep.mask_shared.value + sep.mask_specific.value
    print(name, "masks complementary:", bool(np.all(total == 1.0)))

# %%
# Which prototypes the shared spatial features pick, and how often.
alpha = out.queries["enc.spatial"].alpha.value
print("prototype usage", np.bincount(alpha.argmax(-1).ravel(), minlength=8))

# %%
# Gradients reach the codebook, which is all a client ever uploads.
g = tape.backward(losses.node)
print("codebook gradient norm", np.linalg.norm(g[delta.id]).round(5))
