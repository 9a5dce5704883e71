"""Logarithmic activation equalization.

Channel ``i`` of a layer input is divided by ``s_i = m_i / log2(2 + m_i)**alpha``
where ``m_i`` is its calibrated maximum amplitude, so its new maximum is
``log2(2 + m_i)**alpha``. The matching weight rows are multiplied by ``s_i``,
which leaves ``X @ W`` unchanged. Scales come from activation statistics only.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .numerics import ActivationStats, merge_stats


@dataclass(frozen=True)
class LaeConfig:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")


@dataclass(frozen=True)
class LaeScales:
    layer_id: str
    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).copy()
        if s.ndim != 1 or not np.isfinite(s).all() or not (s > 0).all():
            raise ValueError(f"{self.layer_id}: LAE scales must be finite and > 0")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    def __len__(self):
        return self.s.size

    def __eq__(self, other):
        if not isinstance(other, LaeScales):
            return NotImplemented
        return self.layer_id == other.layer_id and np.array_equal(self.s, other.s)

    __hash__ = None


def equalized_channel_max(m, alpha: float = 1.0):
    """Channel maximum after division by its LAE scale: ``log2(2 + m)**alpha``.

    Dead channels (``m == 0``) keep a unit scale and stay at zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("channel maxima must be >= 0")
    out = np.where(m > 0, np.log2(2.0 + m) ** alpha, 0.0)
    return float(out) if out.ndim == 0 else out


def lae_scale_vector(channel_absmax, alpha: float = 1.0) -> np.ndarray:
    m = np.asarray(channel_absmax, dtype=np.float64)
    denom = np.log2(2.0 + m) ** alpha
    return np.where(m > 0, m / denom, 1.0)


def compute_lae_scales(stats: ActivationStats, cfg: LaeConfig = LaeConfig()) -> LaeScales:
    return LaeScales(stats.layer_id, lae_scale_vector(stats.channel_absmax, cfg.alpha))


def shared_scales_for_siblings(
    stats_list: Sequence[ActivationStats],
    cfg: LaeConfig = LaeConfig(),
    layer_id: str | None = None,
) -> LaeScales:
    """One scale vector for linears that read the same normalized tensor.

    The siblings' maxima are combined element-wise first, so no sibling ends
    up with a larger equalized range than its own target.
    """
    if not stats_list:
        raise ValueError("no sibling statistics given")
    n = {st.n_channels for st in stats_list}
    if len(n) != 1:
        raise ValueError(f"sibling channel counts differ: {sorted(n)}")
    lid = layer_id or stats_list[0].layer_id
    renamed = [ActivationStats(lid, st.channel_absmax, st.sample_count) for st in stats_list]
    return compute_lae_scales(reduce(merge_stats, renamed), cfg)


def apply_equalization(x: np.ndarray, w: np.ndarray, scales: LaeScales) -> tuple[np.ndarray, np.ndarray]:
    """Eager form of the update: ``X' = X diag(s)^-1`` and ``W' = diag(s) W``."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    s = scales.s
    if x.ndim != 2 or w.ndim != 2 or not (x.shape[1] == w.shape[0] == s.size):
        raise ValueError(
            f"dimension mismatch: X {x.shape}, W {w.shape}, s ({s.size},)"
        )
    x_eq = (x / s[None, :]).astype(np.float32)
    w_eq = (w * s[:, None]).astype(np.float32)
    return x_eq, w_eq


def scale_weight_rows(w: np.ndarray, scales: LaeScales) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32)
    if w.shape[0] != scales.s.size:
        raise ValueError(f"dimension mismatch: W {w.shape}, s ({scales.s.size},)")
    return (w * scales.s[:, None]).astype(np.float32)


def fuse_scales_into_norm(
    norm_gain: np.ndarray,
    norm_bias: np.ndarray | None,
    scales: LaeScales,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Fold ``diag(s)^-1`` into the affine part of the preceding norm.

    The normalization statistics are taken before the gain is applied, so the
    folded norm produces exactly ``norm(x) / s``.
    """
    g = np.asarray(norm_gain, dtype=np.float32)
    if g.shape != scales.s.shape:
        raise ValueError(f"gain length {g.size} != scale length {scales.s.size}")
    g_new = (g / scales.s).astype(np.float32)
    if norm_bias is None:
        return g_new, None
    b = np.asarray(norm_bias, dtype=np.float32)
    if b.shape != g.shape:
        raise ValueError(f"bias length {b.size} != gain length {g.size}")
    return g_new, (b / scales.s).astype(np.float32)
