"""LLaMA-style toy decoder, its quantized execution and synthetic checkpoints."""

from .metrics import MetricsReport, evaluate
from .model import ModelConfig, ToyModel, forward_fp
from .quantized import (
    KvCache,
    QuantizedCheckpoint,
    decode_step,
    forward_quant,
    fuse_equalization,
    greedy_decode,
    quantize_model,
)
from .synth import (
    PRESETS,
    InfeasibleProfileError,
    OpRange,
    OutlierProfile,
    generate_checkpoint,
)

__all__ = [
    "PRESETS",
    "InfeasibleProfileError",
    "KvCache",
    "MetricsReport",
    "ModelConfig",
    "OpRange",
    "OutlierProfile",
    "QuantizedCheckpoint",
    "ToyModel",
    "decode_step",
    "evaluate",
    "forward_fp",
    "forward_quant",
    "fuse_equalization",
    "generate_checkpoint",
    "greedy_decode",
    "quantize_model",
]
