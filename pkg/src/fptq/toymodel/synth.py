"""Seeded toy checkpoints with planted fixed-channel activation outliers.

The base network carries a constant offset on a few residual dimensions
(persistent QKV / Gate-Up outlier channels) and a handful of down-projection
channels that fire only on special tokens. Each op's input range is then set
by rescaling the producer of its input per channel: the norm gain (and bias)
for QKV and Gate/Up, the value-projection columns for ``o_proj`` and the
up-projection columns for ``down_proj``. The consumer weights absorb the
inverse factor, so the rescaling changes representations but not the
network's output.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .model import ModelConfig, ToyModel, forward_fp, init_params

OPS = ("o_proj", "qkv", "gate_up", "down")
OP_OF_LAYER = {
    "q_proj": "qkv",
    "k_proj": "qkv",
    "v_proj": "qkv",
    "o_proj": "o_proj",
    "gate_proj": "gate_up",
    "up_proj": "gate_up",
    "down_proj": "down",
}
RANGE_TOLERANCE = 0.25

# planted structure of the base network
DC_OFFSET = 6.0  # constant residual offset on the outlier dims
SPECIAL_TOKEN_RATIO = 128  # one token id in this many triggers down_proj spikes
SPIKE_PREACT = 4.0  # gate/up pre-activation on special tokens
SPIKE_NOISE = 0.03  # remaining random part of the spike columns
SPIKE_WRITEBACK = 0.025  # down-projection gain of a spike onto the offset direction


class InfeasibleProfileError(ValueError):
    def __init__(self, message: str, achieved: dict[str, float]):
        super().__init__(f"{message}; achieved ranges: {achieved}")
        self.achieved = achieved


@dataclass(frozen=True)
class OpRange:
    inlier_max: float
    outlier_max: float
    outlier_fraction: float = 0.02

    def __post_init__(self):
        if not (self.outlier_max >= self.inlier_max > 0):
            raise ValueError("need outlier_max >= inlier_max > 0")
        if not (0 < self.outlier_fraction <= 0.1):
            raise ValueError("outlier_fraction must lie in (0, 0.1]")


@dataclass(frozen=True)
class OutlierProfile:
    o_proj: OpRange
    qkv: OpRange
    gate_up: OpRange
    down: OpRange

    def __getitem__(self, op: str) -> OpRange:
        return getattr(self, op)

    def to_dict(self) -> dict:
        return {f.name: vars(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> OutlierProfile:
        return cls(**{op: OpRange(**d[op]) for op in OPS})


PRESETS = {
    # o_proj stays compact, QKV and Gate/Up land between the thresholds and
    # down_proj far above them
    "outlier": OutlierProfile(
        o_proj=OpRange(5.0, 8.0, 0.02),
        qkv=OpRange(5.0, 90.0, 0.02),
        gate_up=OpRange(5.0, 90.0, 0.02),
        down=OpRange(5.0, 600.0, 0.02),
    ),
    "flat": OutlierProfile(
        o_proj=OpRange(5.0, 5.0, 0.02),
        qkv=OpRange(5.0, 5.0, 0.02),
        gate_up=OpRange(5.0, 5.0, 0.02),
        down=OpRange(5.0, 5.0, 0.02),
    ),
}


def _channel_targets(width: int, op: OpRange, order: np.ndarray):
    n_out = max(1, round(op.outlier_fraction * width))
    mask = np.zeros(width, dtype=bool)
    mask[order[:n_out]] = True
    return mask


def _rescale_factors(observed: np.ndarray, mask: np.ndarray, op: OpRange) -> np.ndarray:
    """Per-channel multipliers that put the inlier channels' joint maximum at
    ``inlier_max`` and the outlier channels' joint maximum at ``outlier_max``.

    One factor per class keeps the natural spread between channels.
    """
    if (observed <= 0).any():
        return None
    f = np.empty_like(observed, dtype=np.float64)
    inl = ~mask
    if inl.any():
        f[inl] = op.inlier_max / observed[inl].max()
    f[mask] = op.outlier_max / observed[mask].max()
    return f


def measure_op_ranges(model: ToyModel, tokens: np.ndarray) -> dict[str, float]:
    """Per-layer, per-op tensor maxima of the linear inputs (keys ``'{i}.{op}'``)."""
    out: dict[str, float] = {}

    def observe(layer_id, x):
        _, i, name = layer_id.split(".")
        key = f"{i}.{OP_OF_LAYER[name]}"
        out[key] = max(out.get(key, 0.0), float(np.abs(x).max()))

    forward_fp(model, tokens, observer=observe)
    return out


def _channel_maxima(model: ToyModel, tokens: np.ndarray, batch: int = 64) -> dict[str, np.ndarray]:
    """Per-channel input maxima keyed ``'{i}.{op}'``."""
    out: dict[str, np.ndarray] = {}

    def observe(layer_id, x):
        _, i, name = layer_id.split(".")
        if name in ("k_proj", "v_proj", "up_proj"):
            return  # same input as q_proj / gate_proj
        key = f"{i}.{OP_OF_LAYER[name]}"
        m = np.abs(x).max(axis=0)
        out[key] = m if key not in out else np.maximum(out[key], m)

    for lo in range(0, len(tokens), batch):
        forward_fp(model, tokens[lo : lo + batch], observer=observe)
    return out


def _plant_structure(params, cfg: ModelConfig, dc_dims, spike_channels, attn_channels, rng) -> None:
    """Give the base network fixed-channel outliers.

    Every token embedding gets a large constant offset on ``dc_dims``; the
    special tokens get the opposite sign. The gate/up columns of
    ``spike_channels`` read that offset so that those down-projection inputs
    are near zero for ordinary tokens and large for special ones, and the
    value columns of ``attn_channels`` read it to give the attention output a
    steady component.
    """
    d = cfg.d_model
    sign = rng.choice([-1.0, 1.0], size=dc_dims.size)
    offset = np.zeros(d)
    offset[dc_dims] = DC_OFFSET * sign
    emb = params["embed.weight"].astype(np.float64)
    n_special = max(1, cfg.vocab_size // SPECIAL_TOKEN_RATIO)
    emb += offset
    emb[:n_special] -= 2 * offset
    params["embed.weight"] = emb.astype(np.float32)

    rms = np.sqrt(1.0 + (DC_OFFSET**2) * dc_dims.size / d)
    reader = np.zeros(d)
    reader[dc_dims] = sign / np.sqrt(dc_dims.size)
    # gate/up pre-activation of ~SPIKE_PREACT on the offset direction
    gain = SPIKE_PREACT / (DC_OFFSET * np.sqrt(dc_dims.size) / rms)
    for i in range(cfg.n_layers):
        for name in ("gate_proj", "up_proj"):
            key = f"layers.{i}.{name}.weight"
            w = params[key].astype(np.float64)
            w[:, spike_channels] = SPIKE_NOISE * w[:, spike_channels] - gain * reader[:, None]
            params[key] = w.astype(np.float32)
        # spikes write back along the special tokens' (negated) offset
        key = f"layers.{i}.down_proj.weight"
        w = params[key].astype(np.float64)
        w[spike_channels, :] = SPIKE_NOISE * w[spike_channels, :] - SPIKE_WRITEBACK * reader[None, :]
        params[key] = w.astype(np.float32)
        key = f"layers.{i}.v_proj.weight"
        w = params[key].astype(np.float64)
        w[:, attn_channels] = SPIKE_NOISE * w[:, attn_channels] + gain * reader[:, None]
        params[key] = w.astype(np.float32)


def _retarget(params, cfg: ModelConfig, maxima: dict[str, np.ndarray], profile, masks) -> None:
    """Apply function-preserving per-channel rescalings that move every op's
    input range to its profile target.

    A channel amplified by ``f`` at the producer is divided by ``f`` in the
    rows of every consumer weight, so the network output is unchanged.
    """
    for i in range(cfg.n_layers):
        p = f"layers.{i}."

        def scale(name, f, axis, p=p):
            key = p + name
            w = params[key].astype(np.float64)
            w = w * (f[None, :] if axis == 1 else f[:, None])
            params[key] = w.astype(np.float32)

        for norm, op, consumers in (
            ("attn_norm", "qkv", ("q_proj", "k_proj", "v_proj")),
            ("ffn_norm", "gate_up", ("gate_proj", "up_proj")),
        ):
            f = _rescale_factors(maxima[f"{i}.{op}"], masks[op], profile[op])
            if f is None:
                raise InfeasibleProfileError(f"layer {i}: dead channel at {norm}", _summ(maxima))
            params[p + norm + ".weight"] = (params[p + norm + ".weight"] * f).astype(np.float32)
            if p + norm + ".bias" in params:
                params[p + norm + ".bias"] = (params[p + norm + ".bias"] * f).astype(np.float32)
            for c in consumers:
                scale(c + ".weight", 1.0 / f, 0)

        for op, producer, consumer in (("o_proj", "v_proj", "o_proj"), ("down", "up_proj", "down_proj")):
            f = _rescale_factors(maxima[f"{i}.{op}"], masks[op], profile[op])
            if f is None:
                raise InfeasibleProfileError(f"layer {i}: dead channel at {op} input", _summ(maxima))
            scale(producer + ".weight", f, 1)
            scale(consumer + ".weight", 1.0 / f, 0)


def _summ(maxima: dict[str, np.ndarray]) -> dict[str, float]:
    return {k: float(v.max()) for k, v in maxima.items()}


def _off_target(achieved: dict[str, float], profile: OutlierProfile) -> dict[str, float]:
    bad = {}
    for key, val in achieved.items():
        target = profile[key.split(".")[1]].outlier_max
        if abs(val - target) > RANGE_TOLERANCE * target:
            bad[key] = val
    return bad


def generate_checkpoint(
    config: ModelConfig = ModelConfig(),
    profile: OutlierProfile = PRESETS["outlier"],
    seed: int = 0,
    *,
    n_construct: int = 512,
    n_verify: int = 128,
    seq_len: int = 32,
    max_iter: int = 4,
) -> ToyModel:
    """Build a deterministic toy model whose linear inputs follow ``profile``.

    The targets are fitted on seeded random token batches; a held-out batch
    then checks that every op's input range lies within 25% of its
    ``outlier_max``. Each retry refits on a larger batch. Raises
    :class:`InfeasibleProfileError` if the targets are still missed after
    ``max_iter`` rounds.
    """
    seq_len = min(seq_len, config.max_seq)
    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 0x5EED])
    order_d = rng.permutation(config.d_model)
    order_f = rng.permutation(config.d_ff)
    masks = {
        "qkv": _channel_targets(config.d_model, profile.qkv, order_d),
        "o_proj": _channel_targets(config.d_model, profile.o_proj, order_d),
        "gate_up": _channel_targets(config.d_model, profile.gate_up, order_d),
        "down": _channel_targets(config.d_ff, profile.down, order_f),
    }
    dc_dims = np.flatnonzero(masks["qkv"] | masks["gate_up"])
    _plant_structure(
        params, config, dc_dims, np.flatnonzero(masks["down"]), np.flatnonzero(masks["o_proj"]), rng
    )

    verify = rng.integers(0, config.vocab_size, size=(n_verify, seq_len))
    construct = rng.integers(0, config.vocab_size, size=(n_construct, seq_len))
    model = ToyModel(config, params)
    achieved: dict[str, float] | None = None
    for _ in range(max_iter):
        params = dict(model.params)
        _retarget(params, config, _channel_maxima(model, construct), profile, masks)
        model = ToyModel(config, params)
        achieved = measure_op_ranges(model, verify)
        if not _off_target(achieved, profile):
            return model
        extra = rng.integers(0, config.vocab_size, size=(n_construct, seq_len))
        construct = np.concatenate([construct, extra])
    raise InfeasibleProfileError(f"profile not reached after {max_iter} rounds", achieved or {})
