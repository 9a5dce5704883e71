"""Tensor validation and absolute-maximum statistics.

Activations are laid out ``tokens x channels`` and weights
``input channels x output channels`` so that ``X @ W`` is the layer product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def tensor2d(data, *, name: str = "tensor") -> np.ndarray:
    """Return ``data`` as a C-contiguous float32 matrix.

    Raises ``ValueError`` for non-2D input or any NaN/Inf element.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite values are not allowed")
    return arr


def _require_nonempty(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty input")
    return x


def absmax_per_tensor(x: np.ndarray) -> float:
    x = _require_nonempty(x)
    return float(np.abs(x).max())


def absmax_per_row(x: np.ndarray) -> np.ndarray:
    """Per-token maxima; entry ``r`` is ``max |x[r, :]|``."""
    x = _require_nonempty(x)
    return np.abs(x).max(axis=1)


def absmax_per_col(x: np.ndarray) -> np.ndarray:
    """Per-channel maxima; entry ``c`` is ``max |x[:, c]|``."""
    x = _require_nonempty(x)
    return np.abs(x).max(axis=0)


@dataclass(frozen=True)
class ActivationStats:
    """Calibration record for the input of one linear layer.

    ``channel_absmax`` holds the per-channel maximum amplitude and
    ``tensor_absmax`` (the activation range used by the layer policy) is
    always its maximum.
    """

    layer_id: str
    channel_absmax: np.ndarray
    sample_count: int = 1
    tensor_absmax: float = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.channel_absmax, dtype=np.float32).copy()
        if m.ndim != 1 or m.size == 0:
            raise ValueError("channel_absmax must be a non-empty 1-D array")
        if not np.isfinite(m).all() or (m < 0).any():
            raise ValueError("channel_absmax entries must be finite and >= 0")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        m.setflags(write=False)
        object.__setattr__(self, "channel_absmax", m)
        object.__setattr__(self, "tensor_absmax", float(m.max()))

    @property
    def n_channels(self) -> int:
        return int(self.channel_absmax.size)

    @classmethod
    def from_batch(cls, layer_id: str, x: np.ndarray, sample_count: int = 1) -> ActivationStats:
        """One-pass statistics of a ``tokens x channels`` batch."""
        return cls(layer_id, absmax_per_col(x), sample_count)

    def __eq__(self, other):
        if not isinstance(other, ActivationStats):
            return NotImplemented
        return (
            self.layer_id == other.layer_id
            and self.sample_count == other.sample_count
            and np.array_equal(self.channel_absmax, other.channel_absmax)
        )

    __hash__ = None


def merge_stats(a: ActivationStats, b: ActivationStats) -> ActivationStats:
    """Combine two records of the same layer (element-wise max, counts summed)."""
    if a.layer_id != b.layer_id:
        raise ValueError(f"cannot merge stats of {a.layer_id!r} and {b.layer_id!r}")
    if a.n_channels != b.n_channels:
        raise ValueError(
            f"{a.layer_id}: channel count mismatch ({a.n_channels} vs {b.n_channels})"
        )
    return ActivationStats(
        a.layer_id,
        np.maximum(a.channel_absmax, b.channel_absmax),
        a.sample_count + b.sample_count,
    )


def effective_bits(stats: ActivationStats, bits: int = 8) -> np.ndarray:
    """Quantization levels left to each channel under per-tensor scaling.

    Entry ``i`` is ``2**bits * m_i / m``: a channel whose maximum is far below
    the tensor maximum only reaches a handful of integer levels.
    """
    if stats.tensor_absmax <= 0:
        raise ValueError("degenerate stats: tensor_absmax is 0")
    m = stats.channel_absmax.astype(np.float64)
    return (2.0**bits) * m / stats.tensor_absmax
