"""Recipe-driven fake-quant execution of the toy decoder.

Weights are quantized once (with equalization scales already folded in); at
run time each linear quantizes its input according to its layer policy and
multiplies with the dequantized weights. Keys and values pass through an
8-bit per-token quantizer before attention, both in full-sequence mode and in
the incremental :class:`KvCache`.
"""

from __future__ import annotations

import numpy as np

from ..equalization import LaeScales, fuse_scales_into_norm, scale_weight_rows
from ..quantizers import (
    ActQuant,
    QuantTensor,
    compute_scales,
    dequantize,
    fake_quant_activation,
    qmax,
    quantize_act_per_token,
    quantize_weight_groupwise,
    quantize_weight_per_channel,
    round_half_away,
)
from ..recipe import PASS_THROUGH_BITS, Recipe, Strategy
from .model import (
    SIBLING_GROUPS,
    Decoder,
    ModelConfig,
    ToyModel,
    check_tokens,
    matmul32,
)

StoredWeight = QuantTensor | np.ndarray


class RecipeMismatchError(ValueError):
    """Recipe, model and quantized weights do not belong together."""


def _check_recipe(model: ToyModel, recipe: Recipe) -> None:
    if recipe.model_id != model.model_id:
        raise RecipeMismatchError(f"recipe is for model {recipe.model_id}, got {model.model_id}")
    missing = [lid for lid in model.linear_layer_ids if lid not in recipe]
    if missing:
        raise RecipeMismatchError(f"recipe lacks layers {missing}")
    extra = sorted(set(recipe.layer_ids) - set(model.linear_layer_ids))
    if extra:
        raise RecipeMismatchError(f"recipe names unknown layers {extra}")


def _shared_group_scales(recipe: Recipe, prefix: str, norm: str, members) -> LaeScales | None:
    """The one scale vector a sibling group folds into ``norm`` (or None)."""
    pols = [recipe[prefix + m] for m in members]
    lae = [p for p in pols if p.strategy is Strategy.LAE_STATIC_PER_TENSOR]
    if not lae:
        return None
    if len(lae) != len(pols):
        raise RecipeMismatchError(f"{prefix}{norm}: siblings must all use equalization or none")
    s0 = lae[0].lae_scales.s
    for p in lae:
        if p.fusion_target != prefix + norm:
            raise RecipeMismatchError(f"{p.layer_id}: fusion target {p.fusion_target!r}, expected {prefix + norm!r}")
        if not np.array_equal(p.lae_scales.s, s0):
            raise RecipeMismatchError(f"{prefix}{norm}: siblings carry different scales")
    return lae[0].lae_scales


def fuse_equalization(model: ToyModel, recipe: Recipe) -> ToyModel:
    """Float model with every LAE group's scales folded into its norm and
    consumer weights. Functionally equivalent to ``model``."""
    _check_recipe(model, recipe)
    for lp in recipe.layers:
        if lp.lae_scales is not None and lp.fusion_target.rsplit(".", 1)[-1] not in SIBLING_GROUPS:
            raise RecipeMismatchError(f"{lp.layer_id}: cannot fuse into {lp.fusion_target!r}")
    updates: dict[str, np.ndarray] = {}
    for i in range(model.config.n_layers):
        prefix = f"layers.{i}."
        for norm, members in SIBLING_GROUPS.items():
            s = _shared_group_scales(recipe, prefix, norm, members)
            if s is None:
                continue
            gain, bias = fuse_scales_into_norm(
                model[prefix + norm + ".weight"], model.params.get(prefix + norm + ".bias"), s
            )
            updates[prefix + norm + ".weight"] = gain
            if bias is not None:
                updates[prefix + norm + ".bias"] = bias
            for m in members:
                updates[prefix + m + ".weight"] = scale_weight_rows(model.weight(prefix + m), s)
    return model.replace(**updates) if updates else model


def quantize_weight(w: np.ndarray, bits: int, group_size: int) -> StoredWeight:
    if bits == PASS_THROUGH_BITS:
        return np.asarray(w, dtype=np.float32)
    if group_size == 0:
        return quantize_weight_per_channel(w, bits)
    return quantize_weight_groupwise(w, bits, group_size)


class QuantizedCheckpoint:
    """Everything a quantized forward needs: the recipe, the float tensors
    outside the linears (with fused norm gains) and the stored weights."""

    def __init__(self, config: ModelConfig, recipe: Recipe, tensors: dict[str, np.ndarray], weights: dict[str, StoredWeight]):
        self.config = config
        self.recipe = recipe
        self.tensors = dict(tensors)
        self.weights = dict(weights)
        missing = [lid for lid in recipe.layer_ids if lid not in self.weights]
        if missing:
            raise RecipeMismatchError(f"quantized weights missing for {missing}")
        for lid, w in self.weights.items():
            bits = w.params.bits if isinstance(w, QuantTensor) else PASS_THROUGH_BITS
            if bits != recipe.weight_bits:
                raise RecipeMismatchError(f"{lid}: stored at {bits} bits, recipe says {recipe.weight_bits}")
        self._dense: dict[str, np.ndarray] = {}

    def dense_weight(self, layer_id: str) -> np.ndarray:
        """Dequantized weight (memoized)."""
        w = self._dense.get(layer_id)
        if w is None:
            stored = self.weights[layer_id]
            w = dequantize(stored) if isinstance(stored, QuantTensor) else stored
            w.setflags(write=False)
            self._dense[layer_id] = w
        return w


def quantize_model(model: ToyModel, recipe: Recipe) -> QuantizedCheckpoint:
    """Fold equalization scales into the norms and quantize every linear
    weight at the recipe's width and group size."""
    fused = fuse_equalization(model, recipe)
    weights = {lid: quantize_weight(fused.weight(lid), recipe.weight_bits, recipe.group_size) for lid in recipe.layer_ids}
    tensors = {k: v for k, v in fused.params.items() if k[: -len(".weight")] not in weights}
    return QuantizedCheckpoint(model.config, recipe, tensors, weights)


def act_quantizer(recipe: Recipe, layer_id: str) -> ActQuant | None:
    if not recipe.activations_enabled:
        return None
    lp = recipe[layer_id]
    if lp.strategy is Strategy.DYNAMIC_PER_TOKEN:
        return ActQuant(recipe.act_bits, dynamic=True)
    return ActQuant(recipe.act_bits, dynamic=False, calibrated_absmax=lp.calibrated_absmax)


def kv_fake_quant(rows: np.ndarray, bits: int) -> np.ndarray:
    if bits == PASS_THROUGH_BITS:
        return rows
    return dequantize(quantize_act_per_token(rows, bits))


def _decoder(model: ToyModel, recipe: Recipe, qckpt: QuantizedCheckpoint) -> Decoder:
    _check_recipe(model, recipe)
    if qckpt.recipe is not recipe and qckpt.recipe != recipe:
        raise RecipeMismatchError("quantized checkpoint was built from a different recipe")
    acts = {lid: act_quantizer(recipe, lid) for lid in recipe.layer_ids}

    def linear(layer_id, x):
        return matmul32(fake_quant_activation(x, acts[layer_id]), qckpt.dense_weight(layer_id))

    kv = None
    if recipe.kv_bits != PASS_THROUGH_BITS:
        kv = lambda rows: kv_fake_quant(rows, recipe.kv_bits)
    return Decoder(model.config, qckpt.tensors, linear, kv)


def forward_quant(model: ToyModel, recipe: Recipe, qckpt: QuantizedCheckpoint, tokens) -> np.ndarray:
    """Fake-quant logits; same shape conventions as :func:`forward_fp`."""
    squeeze = np.asarray(tokens).ndim == 1
    toks = check_tokens(tokens, model.config)
    logits = _decoder(model, recipe, qckpt)(toks)
    return logits[0] if squeeze else logits


class CacheOverflowError(RuntimeError):
    pass


class KvCache:
    """Per-layer key/value rows for one decoding session.

    With ``bits`` of 4 or 8 every appended row is quantized symmetrically with
    its own float32 scale; ``bits=16`` stores float rows unchanged.
    """

    def __init__(self, config: ModelConfig, bits: int = 8):
        self.config = config
        self.bits = bits
        n, t, d = config.n_layers, config.max_seq, config.d_model
        if bits == PASS_THROUGH_BITS:
            self._k = np.zeros((n, t, d), dtype=np.float32)
            self._v = np.zeros((n, t, d), dtype=np.float32)
        else:
            qmax(bits)
            self._k = np.zeros((n, t, d), dtype=np.int8)
            self._v = np.zeros((n, t, d), dtype=np.int8)
        self._ks = np.ones((n, t), dtype=np.float32)
        self._vs = np.ones((n, t), dtype=np.float32)
        self._fill = np.zeros(n, dtype=np.int64)
        self.length = 0

    @property
    def quantized(self) -> bool:
        return self.bits != PASS_THROUGH_BITS

    def _store(self, payload, scales, i, rows):
        lo = self._fill[i]
        hi = lo + rows.shape[0]
        if self.quantized:
            s = compute_scales(np.abs(rows).max(axis=1), self.bits)
            lim = qmax(self.bits)
            q = np.clip(round_half_away(rows / s[:, None]), -lim, lim)
            payload[i, lo:hi] = q.astype(np.int8)
            scales[i, lo:hi] = s
        else:
            payload[i, lo:hi] = rows

    def append(self, i: int, k: np.ndarray, v: np.ndarray) -> None:
        if k.shape != v.shape or k.ndim != 2 or k.shape[1] != self.config.d_model:
            raise ValueError(f"bad key/value rows: {k.shape}, {v.shape}")
        if self._fill[i] + k.shape[0] > self.config.max_seq:
            raise CacheOverflowError(f"cache full ({self.config.max_seq} positions)")
        self._store(self._k, self._ks, i, k)
        self._store(self._v, self._vs, i, v)
        self._fill[i] += k.shape[0]

    def _read(self, payload, scales, i):
        n = self._fill[i]
        if not self.quantized:
            return payload[i, :n]
        return payload[i, :n].astype(np.float32) * scales[i, :n, None]

    def keys(self, i: int) -> np.ndarray:
        return self._read(self._k, self._ks, i)

    def values(self, i: int) -> np.ndarray:
        return self._read(self._v, self._vs, i)

    def commit(self) -> None:
        """Advance the logical length once every layer holds the new rows."""
        if not (self._fill == self._fill[0]).all():
            raise RuntimeError("layers hold different numbers of cached positions")
        self.length = int(self._fill[0])


def decode_step(
    model: ToyModel, recipe: Recipe, qckpt: QuantizedCheckpoint, cache: KvCache, token: int
) -> tuple[np.ndarray, KvCache]:
    """Run one token at position ``cache.length``; returns its ``(vocab,)``
    logits and the cache with the new key/value rows appended."""
    if cache.config != model.config:
        raise ValueError("cache was built for another model configuration")
    if cache.length >= model.config.max_seq:
        raise CacheOverflowError(f"cache full ({model.config.max_seq} positions)")
    tok = check_tokens(np.array([[token]]), model.config)
    dec = _decoder(model, recipe, qckpt)
    x = dec.embed(tok)
    offset = cache.length
    for i in range(model.config.n_layers):
        x = dec.block(i, x, offset, cache=cache)
    cache.commit()
    return dec.head(x)[0, 0], cache


def new_cache(model: ToyModel, recipe: Recipe) -> KvCache:
    return KvCache(model.config, recipe.kv_bits)


def greedy_decode(
    model: ToyModel, recipe: Recipe, qckpt: QuantizedCheckpoint, prompt, n_steps: int
) -> np.ndarray:
    """Feed ``prompt`` token by token, then extend it greedily by ``n_steps``.

    Returns the full token sequence (prompt plus generated tokens).
    """
    prompt = [int(t) for t in np.atleast_1d(prompt)]
    if not prompt:
        raise ValueError("prompt must hold at least one token")
    if len(prompt) + n_steps > model.config.max_seq:
        raise CacheOverflowError("prompt plus generated tokens exceed max_seq")
    cache = new_cache(model, recipe)
    seq = list(prompt)
    logits = None
    for t in prompt:
        logits, cache = decode_step(model, recipe, qckpt, cache, t)
    for _ in range(n_steps):
        nxt = int(np.argmax(logits))
        seq.append(nxt)
        if len(seq) < len(prompt) + n_steps:
            logits, cache = decode_step(model, recipe, qckpt, cache, nxt)
    return np.array(seq, dtype=np.int64)
