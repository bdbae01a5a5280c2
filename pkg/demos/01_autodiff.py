"""
Reverse-mode autodiff on a tape
===============================

Every model in the package is built from operators recorded on a ``Tape``.
This script builds a small loss, runs the backward pass and checks it
against central differences.
"""
from __future__ import annotations

import numpy as np

from fedstg import autodiff as ad

# %%
# A tape records each operator as it runs.  Leaves are trainable inputs,
# constants are not.
rng = np.random.default_rng(0)
tape = ad.Tape()
x = tape.const(rng.standard_normal((5, 3)))
w = tape.leaf(rng.standard_normal((3, 4)), name="w")
b = tape.leaf(np.zeros(4), name="b")
scores = ad.softmax(x @ w + b, axis=-1)
loss = ad.mean(ad.square(scores - tape.const(np.eye(4)[[0, 1, 2, 3, 0]])))
print("loss", float(loss.value))

# %%
# ``backward`` returns a gradient per node id.
grads = tape.backward(loss)
print("dL/dw\n", grads[w.id].round(4))

# %%
# Central differences agree with the analytic gradient.
for leaf in (w, b):
    print(leaf.name, "max relative error", ad.grad_check(tape, loss, leaf, 1e-5))

# %%
# Tensors round-trip through the plain-text checkpoint format.
from fedstg import checkpoint  # noqa: E402

print(checkpoint.dumps({"w": w.value})[:80], "...")
