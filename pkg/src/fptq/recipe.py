"""Per-layer quantization policy records."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

from .equalization import LaeScales

PASS_THROUGH_BITS = 16


class Strategy(str, enum.Enum):
    STATIC_PER_TENSOR = "static_per_tensor"
    LAE_STATIC_PER_TENSOR = "lae_static_per_tensor"
    DYNAMIC_PER_TOKEN = "dynamic_per_token"

    @property
    def rank(self) -> int:
        """Position in the static -> LAE -> dynamic ordering."""
        return _RANK[self]


_RANK = {
    Strategy.STATIC_PER_TENSOR: 0,
    Strategy.LAE_STATIC_PER_TENSOR: 1,
    Strategy.DYNAMIC_PER_TOKEN: 2,
}


@dataclass(frozen=True)
class PolicyThresholds:
    v0: float = 15.0
    v1: float = 150.0

    def __post_init__(self):
        if not (0 < self.v0 < self.v1 < math.inf):
            raise ValueError(f"thresholds must satisfy 0 < v0 < v1 < inf (got {self.v0}, {self.v1})")


@dataclass(frozen=True)
class QuantConfig:
    """Bit-widths and weight group size. A width of 16 disables quantization."""

    weight_bits: int = 4
    act_bits: int = 8
    group_size: int = 128
    kv_bits: int = 8

    def __post_init__(self):
        for name in ("weight_bits", "act_bits", "kv_bits"):
            if getattr(self, name) not in (4, 8, PASS_THROUGH_BITS):
                raise ValueError(f"{name} must be 4, 8 or 16")
        if self.group_size < 0:
            raise ValueError("group_size must be >= 0 (0 = per-channel)")


@dataclass(frozen=True)
class LayerPolicy:
    layer_id: str
    strategy: Strategy
    calibrated_absmax: float
    lae_scales: LaeScales | None = None
    fusion_target: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "calibrated_absmax", float(self.calibrated_absmax))
        is_lae = self.strategy is Strategy.LAE_STATIC_PER_TENSOR
        if is_lae != (self.lae_scales is not None):
            raise ValueError(f"{self.layer_id}: lae_scales must be present iff strategy is LAE")
        if is_lae and not self.fusion_target:
            raise ValueError(f"{self.layer_id}: LAE layers need a fusion target")
        if not self.calibrated_absmax > 0:
            raise ValueError(f"{self.layer_id}: calibrated_absmax must be > 0")


@dataclass(frozen=True)
class Recipe:
    """Outcome of the layerwise policy: one entry per linear layer.

    ``group_size == 0`` denotes plain per-channel weight quantization.
    """

    model_id: str
    thresholds: PolicyThresholds
    lae_alpha: float
    weight_bits: int
    act_bits: int
    group_size: int
    kv_bits: int
    layers: tuple[LayerPolicy, ...]
    _index: dict[str, LayerPolicy] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        QuantConfig(self.weight_bits, self.act_bits, self.group_size, self.kv_bits)
        index = {}
        for lp in self.layers:
            if lp.layer_id in index:
                raise ValueError(f"layer {lp.layer_id!r} appears more than once")
            index[lp.layer_id] = lp
        object.__setattr__(self, "_index", index)

    def __getitem__(self, layer_id: str) -> LayerPolicy:
        return self._index[layer_id]

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._index

    @property
    def layer_ids(self) -> tuple[str, ...]:
        return tuple(lp.layer_id for lp in self.layers)

    @property
    def quant_config(self) -> QuantConfig:
        return QuantConfig(self.weight_bits, self.act_bits, self.group_size, self.kv_bits)

    @property
    def activations_enabled(self) -> bool:
        return self.act_bits != PASS_THROUGH_BITS
