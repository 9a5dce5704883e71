"""Fine-grained post-training W4A8 quantization on a numpy toy transformer."""

__version__ = "0.1.0"
