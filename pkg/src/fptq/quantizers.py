"""Symmetric uniform quantizers.

Integers live in ``[-(2**(b-1) - 1), 2**(b-1) - 1]`` so that ``q(-x) == -q(x)``.
Rounding is half away from zero. All arithmetic is float32.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .numerics import absmax_per_col, absmax_per_row, absmax_per_tensor

SUPPORTED_BITS = (4, 8)
MIN_SCALE = np.float32(1e-8)
DEFAULT_GROUP_SIZE = 128


class Granularity(str, enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_TOKEN = "per_token"
    PER_CHANNEL = "per_channel"
    GROUP_WISE = "group_wise"


def qmax(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"unsupported bit-width {bits}; expected one of {SUPPORTED_BITS}")
    return 2 ** (bits - 1) - 1


def compute_scales(absmax, bits: int) -> np.ndarray:
    """Vectorised ``absmax / (2**(b-1) - 1)`` with a floor for all-zero data."""
    a = np.asarray(absmax, dtype=np.float32)
    if (a < 0).any() or not np.isfinite(a).all():
        raise ValueError("absmax must be finite and non-negative")
    s = a / np.float32(qmax(bits))
    return np.where(s > 0, s, MIN_SCALE).astype(np.float32)


def compute_scale(absmax: float, bits: int) -> float:
    return float(compute_scales(np.float32(absmax), bits))


def round_half_away(v: np.ndarray) -> np.ndarray:
    # exact: v - trunc(v) is representable, so ties are detected without error
    t = np.trunc(v)
    frac = np.abs(v - t)
    return t + np.where(frac >= 0.5, np.sign(v), 0).astype(v.dtype)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    granularity: Granularity
    scales: np.ndarray
    group_size: int | None = None

    def __post_init__(self):
        qmax(self.bits)
        g = Granularity(self.granularity)
        object.__setattr__(self, "granularity", g)
        s = np.ascontiguousarray(np.asarray(self.scales, dtype=np.float32))
        if not (s > 0).all() or not np.isfinite(s).all():
            raise ValueError("scales must be finite and > 0")
        if g is Granularity.GROUP_WISE:
            if self.group_size is None or self.group_size < 1:
                raise ValueError("group-wise quantization needs group_size >= 1")
            if s.ndim != 2:
                raise ValueError("group-wise scales must be [out_channels, n_groups]")
        elif s.ndim != 1:
            raise ValueError(f"{g.value} scales must be 1-D")
        if g is Granularity.PER_TENSOR and s.size != 1:
            raise ValueError("per-tensor quantization takes exactly one scale")
        object.__setattr__(self, "scales", s)

    def scale_map(self, rows: int, cols: int) -> np.ndarray:
        """Scales broadcast to ``rows x cols`` (``scale(i, j)``)."""
        s, g = self.scales, self.granularity
        if g is Granularity.PER_TENSOR:
            return np.broadcast_to(s.reshape(1, 1), (rows, cols))
        if g is Granularity.PER_TOKEN:
            if s.size != rows:
                raise ValueError(f"per-token scales: expected {rows}, got {s.size}")
            return np.broadcast_to(s.reshape(rows, 1), (rows, cols))
        if g is Granularity.PER_CHANNEL:
            if s.size != cols:
                raise ValueError(f"per-channel scales: expected {cols}, got {s.size}")
            return np.broadcast_to(s.reshape(1, cols), (rows, cols))
        n_groups = -(-rows // self.group_size)
        if s.shape != (cols, n_groups):
            raise ValueError(
                f"group-wise scales: expected shape {(cols, n_groups)}, got {s.shape}"
            )
        return np.repeat(s.T, self.group_size, axis=0)[:rows]


@dataclass(frozen=True)
class QuantTensor:
    q: np.ndarray
    params: QuantParams

    def __post_init__(self):
        q = np.asarray(self.q)
        if q.ndim != 2:
            raise ValueError("quantized payload must be 2-D")
        lim = qmax(self.params.bits)
        if q.size and (q.min() < -lim or q.max() > lim):
            raise ValueError(f"integer values outside [-{lim}, {lim}]")
        object.__setattr__(self, "q", np.ascontiguousarray(q, dtype=np.int8))
        self.params.scale_map(*q.shape)  # validates the scale layout

    @property
    def shape(self):
        return self.q.shape


def quantize(x: np.ndarray, params: QuantParams) -> QuantTensor:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError("quantize expects a 2-D array")
    lim = qmax(params.bits)
    v = x / params.scale_map(*x.shape)
    q = np.clip(round_half_away(v), -lim, lim)
    return QuantTensor(q.astype(np.int8), params)


def dequantize(qx: QuantTensor) -> np.ndarray:
    return qx.q.astype(np.float32) * qx.params.scale_map(*qx.shape)


def quantize_per_tensor(x: np.ndarray, bits: int) -> QuantTensor:
    scale = compute_scales([absmax_per_tensor(x)], bits)
    return quantize(x, QuantParams(bits, Granularity.PER_TENSOR, scale))


def quantize_act_per_tensor_static(x: np.ndarray, calibrated_absmax: float, bits: int) -> QuantTensor:
    """Per-tensor quantization with a scale fixed at calibration time.

    Runtime values beyond ``calibrated_absmax`` saturate.
    """
    scale = compute_scales([calibrated_absmax], bits)
    return quantize(x, QuantParams(bits, Granularity.PER_TENSOR, scale))


def quantize_act_per_token(x: np.ndarray, bits: int) -> QuantTensor:
    """Dynamic quantization: one scale per row, computed from the live data."""
    scales = compute_scales(absmax_per_row(x), bits)
    return quantize(x, QuantParams(bits, Granularity.PER_TOKEN, scales))


def quantize_weight_per_channel(w: np.ndarray, bits: int) -> QuantTensor:
    scales = compute_scales(absmax_per_col(w), bits)
    return quantize(w, QuantParams(bits, Granularity.PER_CHANNEL, scales))


def group_absmax(w: np.ndarray, group_size: int) -> np.ndarray:
    """``[out_channels, n_groups]`` maxima over contiguous input-row groups."""
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2 or w.size == 0:
        raise ValueError("empty input")
    rows, cols = w.shape
    n_groups = -(-rows // group_size)
    pad = n_groups * group_size - rows
    a = np.abs(w)
    if pad:
        a = np.concatenate([a, np.zeros((pad, cols), dtype=a.dtype)])
    return a.reshape(n_groups, group_size, cols).max(axis=1).T


def quantize_weight_groupwise(w: np.ndarray, bits: int, group_size: int = DEFAULT_GROUP_SIZE) -> QuantTensor:
    """Fine-grained weight quantization.

    Each output channel (column) is split along the input dimension into
    contiguous groups of ``group_size`` rows; the last group may be short.
    Every group gets its own scale.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    scales = compute_scales(group_absmax(w, group_size), bits)
    return quantize(w, QuantParams(bits, Granularity.GROUP_WISE, scales, group_size))


@dataclass(frozen=True)
class ActQuant:
    """Activation quantization policy of one linear layer.

    ``dynamic=True`` means per-token scales from the live input; otherwise a
    single static scale from ``calibrated_absmax``.
    """

    bits: int = 8
    dynamic: bool = False
    calibrated_absmax: float | None = None

    def __post_init__(self):
        qmax(self.bits)
        if not self.dynamic and (self.calibrated_absmax is None or self.calibrated_absmax < 0):
            raise ValueError("static activation quantization needs calibrated_absmax >= 0")

    def quantize(self, x: np.ndarray) -> QuantTensor:
        if self.dynamic:
            return quantize_act_per_token(x, self.bits)
        return quantize_act_per_tensor_static(x, self.calibrated_absmax, self.bits)


WeightLike = QuantTensor | np.ndarray


def fake_quant_activation(x: np.ndarray, act: ActQuant | None) -> np.ndarray:
    if act is None:
        return x
    return dequantize(act.quantize(x))


def weight_values(w: WeightLike) -> np.ndarray:
    return dequantize(w) if isinstance(w, QuantTensor) else np.asarray(w, dtype=np.float32)


def fake_quant_matmul(x: np.ndarray, act: ActQuant | None, w: WeightLike) -> np.ndarray:
    """Reference W/A fake-quant product ``dq(q(x)) @ dq(w)``.

    Operands and result are float32; the sum accumulates in float64.

    ``act=None`` passes activations through untouched and a plain float array
    for ``w`` skips weight quantization; with both the result is exactly
    ``x @ w``.
    """
    x = np.asarray(x, dtype=np.float32)
    wv = weight_values(w)
    if x.ndim != 2 or x.shape[1] != wv.shape[0]:
        raise ValueError(f"shape mismatch: {x.shape} @ {wv.shape}")
    return np.matmul(fake_quant_activation(x, act), wv, dtype=np.float64).astype(np.float32)
