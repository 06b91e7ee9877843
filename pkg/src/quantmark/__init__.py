"""Quantization watermarks for a tiny character-level language model.

The fp32 weights are nudged inside the rounding gap of their INT8 grid so
that the full-precision model emits a watermark while the quantized model
stays bit-identical to the original one (or the reverse).
"""
__version__ = "0.1.0"
