"""
The gated low-rank edit
=======================

A steering module rewrites a hidden state inside the row space of R:
h -> h + R^T diag(m) (W h + b - R h). We check its two fixed points and
look at the gate vector under each granularity.
"""

import numpy as np

from msrs.steering import SteeringModule, init_steering, intervene, mask_weights
from msrs.subspace import AlignedSubspace, Block

rng = np.random.default_rng(0)
layout = (Block("shared", None, 0, 2), Block("private", "A", 2, 3), Block("private", "B", 5, 3))
aligned = AlignedSubspace(np.linalg.qr(rng.standard_normal((16, 8)))[0].T, layout)
h = rng.standard_normal(16)

# %%
# Fresh modules start at W = R, b = 0, so the edit cancels exactly.
for g in ("same", "attribute", "rank"):
    m = init_steering(aligned, g, seed=1)
    print(g, "identity at init:", np.array_equal(intervene(m, h), h), "gates:", mask_weights(m, h).round(3))

# %%
# Attribute gates are one scalar per block, broadcast over its rows.
m = init_steering(aligned, "attribute", seed=1)
params = dict(m.params, mask_w2=rng.standard_normal(m.params["mask_w2"].shape),
              W=rng.standard_normal((8, 16)))
m = SteeringModule(params, aligned, "attribute")
print("attribute gates", mask_weights(m, h).round(3))

# %%
# Closing every gate leaves h untouched, whatever W and b are.
closed = SteeringModule(dict(params, mask_b2=np.full_like(params["mask_b2"], -1000.0)), aligned, "attribute")
print("closed gates keep h:", np.array_equal(intervene(closed, h), h))

# %%
# Open gates move h only inside span(R): the orthogonal complement is kept.
out = intervene(m, h)
R = params["R"]
P = R.T @ np.linalg.pinv(R @ R.T) @ R
print("change outside span(R):", np.abs((np.eye(16) - P) @ (out - h)).max())
