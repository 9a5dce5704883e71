"""
Symmetric quantizers at four granularities
==========================================

One outlier row and one outlier column are enough to show why a single
scale per tensor wastes most of the integer grid.
"""

# %%
import numpy as np

from fptq.quantizers import (
    dequantize,
    quantize_act_per_token,
    quantize_per_tensor,
    quantize_weight_groupwise,
    quantize_weight_per_channel,
)

rng = np.random.default_rng(0)
x = rng.standard_normal((64, 256)).astype(np.float32)
x[3] *= 40      # a loud token
x[:, 17] *= 25  # a loud channel

# %%
# Reconstruction error for 8-bit activations: one scale for everything versus
# one scale per token (row).
for name, qt in (("per-tensor", quantize_per_tensor(x, 8)), ("per-token", quantize_act_per_token(x, 8))):
    err = dequantize(qt) - x
    print(f"A8 {name:<11} mse {np.mean(err**2):.3e}  distinct levels used {np.unique(qt.q).size}")

# %%
# 4-bit weights: per output channel versus groups of 128 input rows.
w = rng.standard_normal((256, 128)).astype(np.float32)
w[5:9] *= 12
for name, qt in (("per-channel", quantize_weight_per_channel(w, 4)), ("group 128", quantize_weight_groupwise(w, 4, 128))):
    print(f"W4 {name:<11} mse {np.mean((dequantize(qt) - w) ** 2):.3e}  scales {qt.params.scales.shape}")

# %%
# Every element lands within half a step of where it started.
qt = quantize_weight_groupwise(w, 4, 128)
step = qt.params.scale_map(*w.shape)
print("worst |x - dq(q(x))| / step:", float((np.abs(dequantize(qt) - w) / step).max()))
