"""
W4A8 end to end
===============

Quantize the outlier checkpoint two ways, compare both against the float
model, decode with the 8-bit KV cache and save the result to disk.
"""

# %%
import tempfile
import warnings
from pathlib import Path

import numpy as np

from fptq.calibration import (
    STREAM_EVAL,
    CalibSource,
    build_naive_recipe,
    build_recipe,
    calibrate,
    random_tokens,
)
from fptq.formats import file_digest, read_quantized, write_quantized
from fptq.toymodel import (
    evaluate,
    forward_quant,
    generate_checkpoint,
    greedy_decode,
    quantize_model,
)

model = generate_checkpoint(seed=1)
stats = calibrate(model, CalibSource.random(n_samples=256, seq_len=32, seed=7))
with warnings.catch_warnings():
    warnings.simplefilter("error")
    fine = build_recipe(model, stats)
naive = build_naive_recipe(model, stats)

# %%
# Held-out tokens come from a separate random stream.
eval_tokens = random_tokens(model.config.vocab_size, 32, 32, seed=7, stream=STREAM_EVAL)
for name, recipe in (("fine-grained", fine), ("naive", naive)):
    m = evaluate(model, recipe, quantize_model(model, recipe), eval_tokens)
    print(f"{name:<13} mse {m.mse:.4f}  cosine {m.cosine:.4f}  top-1 {m.top1_agreement:.3f}")

# %%
# Greedy decoding through the KV cache reproduces the full-context argmax.
qckpt = quantize_model(model, fine)
seq = greedy_decode(model, fine, qckpt, eval_tokens[0, :4], 24)
full = forward_quant(model, fine, qckpt, seq).argmax(axis=-1)
print("generated:", seq[4:].tolist())
print("matches full-context argmax:", bool(np.array_equal(full[3:-1], seq[4:])))

# %%
with tempfile.TemporaryDirectory() as d:
    path = Path(d) / "w4a8.fptq"
    write_quantized(path, qckpt)
    print(f"{path.stat().st_size / 1e6:.2f} MB on disk, sha256 {file_digest(path)[:16]}...")
    back = read_quantized(path)
    print("recipe survives the round trip:", back.recipe == fine)
