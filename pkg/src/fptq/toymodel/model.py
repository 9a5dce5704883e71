"""A small LLaMA-style decoder in float32 numpy.

Pre-norm blocks: ``x + Attn(norm(x))`` then ``x + Down(silu(Gate(h)) * Up(h))``
with ``h = norm(x)``. Rotary position embedding on queries and keys, causal
softmax attention. Linear weights are stored ``in x out``.

Every tensor between operations is float32. Products and reductions
accumulate in float64 before rounding back, which makes each row's result
independent of how many rows are processed together; incremental decoding
then reproduces the full-sequence forward bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Callable
from dataclasses import asdict, dataclass

import numpy as np

NORM_KINDS = ("rmsnorm", "layernorm")

ATTN_SIBLINGS = ("q_proj", "k_proj", "v_proj")
FFN_SIBLINGS = ("gate_proj", "up_proj")
BLOCK_LINEARS = ATTN_SIBLINGS + ("o_proj",) + FFN_SIBLINGS + ("down_proj",)

# which normalization feeds each sibling group
SIBLING_GROUPS = {"attn_norm": ATTN_SIBLINGS, "ffn_norm": FFN_SIBLINGS}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    vocab_size: int = 1024
    max_seq: int = 256
    norm_kind: str = "rmsnorm"
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head dimension must be even for rotary embedding")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def linear_layer_ids(cfg: ModelConfig) -> list[str]:
    return [f"layers.{i}.{name}" for i in range(cfg.n_layers) for name in BLOCK_LINEARS]


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"embed.weight": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for norm in ("attn_norm", "ffn_norm"):
            shapes[p + norm + ".weight"] = (d,)
            if cfg.norm_kind == "layernorm":
                shapes[p + norm + ".bias"] = (d,)
        for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[p + name + ".weight"] = (d, d)
        shapes[p + "gate_proj.weight"] = (d, f)
        shapes[p + "up_proj.weight"] = (d, f)
        shapes[p + "down_proj.weight"] = (f, d)
    shapes["norm.weight"] = (d,)
    if cfg.norm_kind == "layernorm":
        shapes["norm.bias"] = (d,)
    shapes["lm_head.weight"] = (d, cfg.vocab_size)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded random initialization (unit-variance residual stream)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "embed.weight":
            t = rng.standard_normal(shape)
        elif name.endswith("norm.weight"):
            t = np.ones(shape)
        elif name.endswith(".bias"):
            t = 0.02 * rng.standard_normal(shape)
        else:
            t = rng.standard_normal(shape) / np.sqrt(shape[0])
        params[name] = t.astype(np.float32)
    return params


class ToyModel:
    """Configuration plus named float32 parameters; treated as immutable."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        clean = {}
        for name, shape in expected.items():
            t = np.ascontiguousarray(params[name], dtype=np.float32)
            if t.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name}: non-finite values")
            t.setflags(write=False)
            clean[name] = t
        self.config = config
        self.params = clean
        self._fingerprint = None

    @classmethod
    def random(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> ToyModel:
        return cls(config, init_params(config, seed))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    @property
    def linear_layer_ids(self) -> list[str]:
        return linear_layer_ids(self.config)

    def weight(self, layer_id: str) -> np.ndarray:
        return self.params[layer_id + ".weight"]

    def replace(self, **updates: np.ndarray) -> ToyModel:
        """Copy with some parameters swapped (keys are parameter names)."""
        params = dict(self.params)
        params.update(updates)
        return ToyModel(self.config, params)

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256()
            h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
            for name in sorted(self.params):
                h.update(name.encode())
                h.update(self.params[name].tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint

    @property
    def model_id(self) -> str:
        return "toy-" + self.fingerprint()[:16]


# -- building blocks -------------------------------------------------------


def matmul32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """float32 product with float64 accumulation (row-count invariant)."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def normalize(x: np.ndarray, gain: np.ndarray, bias: np.ndarray | None, kind: str, eps: float) -> np.ndarray:
    x64 = x.astype(np.float64)
    if kind == "rmsnorm":
        xn = x64 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    else:
        xc = x64 - np.mean(x64, axis=-1, keepdims=True)
        xn = xc / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    out = xn.astype(np.float32) * gain
    if bias is not None:
        out = out + bias
    return out.astype(np.float32, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (x / (np.float32(1) + np.exp(-x))).astype(np.float32, copy=False)


def rope_tables(positions: np.ndarray, head_dim: int, base: float):
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate ``x`` of shape ``(B, T, H, Dh)`` with tables of shape ``(T, Dh/2)``."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[None, :, None, :], sin[None, :, None, :]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, offset: int) -> np.ndarray:
    """Softmax attention for ``(B, H, Tq, Dh)`` queries over ``(B, H, Tk, Dh)`` keys.

    Query ``t`` sits at absolute position ``offset + t`` and sees keys ``<=`` it.
    """
    tq, tk = q.shape[2], k.shape[2]
    scores = np.matmul(q, np.swapaxes(k, -1, -2), dtype=np.float64) / np.sqrt(q.shape[-1])
    allowed = np.arange(tk)[None, :] <= (offset + np.arange(tq))[:, None]
    scores = np.where(allowed, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p = p / p.sum(axis=-1, keepdims=True)
    return np.matmul(p, v, dtype=np.float64).astype(np.float32)


LinearFn = Callable[[str, np.ndarray], np.ndarray]
KvFn = Callable[[np.ndarray], np.ndarray]


class Decoder:
    """Forward machinery shared by the float and fake-quant paths.

    ``tensors`` supplies embedding, norm and head parameters; ``linear`` maps
    ``(layer_id, x2d)`` to the layer output; ``kv`` post-processes the flat
    key and value rows before attention (identity in float mode).
    """

    def __init__(self, config: ModelConfig, tensors, linear: LinearFn, kv: KvFn | None = None):
        self.config = config
        self.tensors = tensors
        self.linear = linear
        self.kv = kv

    def _norm(self, prefix: str, x: np.ndarray) -> np.ndarray:
        c = self.config
        return normalize(x, self.tensors[prefix + ".weight"], self.tensors.get(prefix + ".bias"), c.norm_kind, c.norm_eps)

    def embed(self, tokens: np.ndarray) -> np.ndarray:
        return self.tensors["embed.weight"][tokens]

    def block(self, i: int, x: np.ndarray, offset: int, cache=None) -> np.ndarray:
        c = self.config
        b, t, d = x.shape
        p = f"layers.{i}."
        h = self._norm(p + "attn_norm", x).reshape(b * t, d)
        q = self.linear(p + "q_proj", h)
        k = self.linear(p + "k_proj", h)
        v = self.linear(p + "v_proj", h)
        cos, sin = rope_tables(np.arange(offset, offset + t), c.head_dim, c.rope_base)
        shape4 = (b, t, c.n_heads, c.head_dim)
        q = apply_rope(q.reshape(shape4), cos, sin)
        k = apply_rope(k.reshape(shape4), cos, sin).reshape(b * t, d)
        if cache is not None:
            cache.append(i, k, v)
            k, v = cache.keys(i), cache.values(i)
            tk = k.shape[0]
        else:
            if self.kv is not None:
                k, v = self.kv(k), self.kv(v)
            tk = t
        kh = k.reshape(b, tk, c.n_heads, c.head_dim).transpose(0, 2, 1, 3)
        vh = v.reshape(b, tk, c.n_heads, c.head_dim).transpose(0, 2, 1, 3)
        att = causal_attention(q.transpose(0, 2, 1, 3), kh, vh, offset)
        att = att.transpose(0, 2, 1, 3).reshape(b * t, d)
        x = x + self.linear(p + "o_proj", att).reshape(b, t, d)
        h = self._norm(p + "ffn_norm", x).reshape(b * t, d)
        gated = silu(self.linear(p + "gate_proj", h)) * self.linear(p + "up_proj", h)
        x = x + self.linear(p + "down_proj", gated).reshape(b, t, d)
        return x

    def head(self, x: np.ndarray) -> np.ndarray:
        b, t, d = x.shape
        h = self._norm("norm", x).reshape(b * t, d)
        return matmul32(h, self.tensors["lm_head.weight"]).reshape(b, t, -1)

    def __call__(self, tokens: np.ndarray) -> np.ndarray:
        x = self.embed(tokens)
        for i in range(self.config.n_layers):
            x = self.block(i, x, 0)
        return self.head(x)


def check_tokens(tokens, cfg: ModelConfig, max_len: int | None = None) -> np.ndarray:
    """Validate token ids; returns a ``(batch, seq)`` int64 array."""
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] == 0:
        raise ValueError(f"tokens must be a non-empty (batch, seq) array, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("token ids must be integers")
    if t.min() < 0 or t.max() >= cfg.vocab_size:
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    limit = cfg.max_seq if max_len is None else max_len
    if t.shape[1] > limit:
        raise ValueError(f"sequence length {t.shape[1]} exceeds max_seq {limit}")
    return t.astype(np.int64)


def forward_fp(model: ToyModel, tokens, observer: Callable[[str, np.ndarray], None] | None = None) -> np.ndarray:
    """Float32 reference logits of shape ``(batch, seq, vocab)``.

    A 1-D token sequence yields ``(seq, vocab)``. ``observer(layer_id, x)`` is
    called with every linear layer's ``tokens x channels`` input.
    """
    squeeze = np.asarray(tokens).ndim == 1
    toks = check_tokens(tokens, model.config)
    params = model.params

    def linear(layer_id, x):
        if observer is not None:
            observer(layer_id, x)
        return matmul32(x, params[layer_id + ".weight"])

    logits = Decoder(model.config, params, linear)(toks)
    return logits[0] if squeeze else logits
