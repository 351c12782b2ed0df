"""Secure-aggregation laboratory.

Implements one-shot mask recovery over encoded sub-masks alongside two
pairwise-mask baselines, all over a shared prime-field substrate, plus a
deterministic federated-round simulator with instrumented cost counters
and a benchmark CLI.
"""

from .field import (
    DEFAULT_MODULUS,
    FieldVector,
    QuantizationScheme,
    SeedStream,
    dequantize,
    quantize,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MODULUS",
    "FieldVector",
    "QuantizationScheme",
    "SeedStream",
    "dequantize",
    "quantize",
    "__version__",
]
