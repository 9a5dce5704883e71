"""
Finding and squashing activation outliers
=========================================

Calibrate the synthetic outlier checkpoint, look at each layer's input
range, and see how the logarithmic equalization folds the wide layers back
into a narrow band.
"""

# %%
import math
import warnings

import numpy as np

from fptq.calibration import (
    CalibSource,
    build_recipe,
    calibrate,
    post_equalization_range,
)
from fptq.numerics import effective_bits
from fptq.toymodel import generate_checkpoint

model = generate_checkpoint(seed=0)
stats = calibrate(model, CalibSource.random(n_samples=128, seq_len=32, seed=1))

# %%
# Input range v per linear layer of the first block. The attention and FFN
# inputs sit between 15 and 150, the down projection far above.
for lid in model.linear_layer_ids[:7]:
    st = stats[lid]
    levels = effective_bits(st, 8)
    print(f"{lid:<22} v = {st.tensor_absmax:8.2f}   median channel gets {np.median(levels):6.1f} of 256 levels")

# %%
with warnings.catch_warnings():
    warnings.simplefilter("error")
    recipe = build_recipe(model, stats)

for lp in recipe.layers[:7]:
    print(f"{lp.layer_id:<22} {lp.strategy.value}")

# %%
# After dividing each channel by its scale the layer maximum is log2(2 + v).
lp = recipe["layers.0.q_proj"]
v = max(stats[f"layers.0.{m}"].tensor_absmax for m in ("q_proj", "k_proj", "v_proj"))
post = post_equalization_range(stats["layers.0.q_proj"], lp.lae_scales)
print(f"v = {v:.2f}  ->  post-equalization max {post:.4f}  (log2(2+v) = {math.log2(2 + v):.4f})")
m = stats["layers.0.q_proj"].channel_absmax / lp.lae_scales.s
print("median channel levels before/after:",
      float(np.median(effective_bits(stats["layers.0.q_proj"], 8))),
      float(np.median(256 * m / m.max())))
