"""Post-training quantization of small Vision Transformers with block-wise
evolutionary scale search."""

__version__ = "0.1.0"
