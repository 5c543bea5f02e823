"""Uniform parameter quantization and the textured / non-textured block split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PixelBlock

TEXTURED = "textured"
NON_TEXTURED = "non-textured"

MEAN_BITS = 8
FLAG_BITS = 1

# variance of a [0,1] block whose std is ~0.03; flat blocks sit well below
DEFAULT_VARIANCE_THRESHOLD = 0.0009


@dataclass(frozen=True)
class QuantSpec:
    """Bit allocation per coded parameter.

    center_bits applies to each center coordinate, expert_bits to each expert
    value.  Non-textured blocks always spend mean_bits on their average
    luminance plus the one block-type flag bit.
    """

    center_bits: int = 4
    expert_bits: int = 5
    mean_bits: int = MEAN_BITS
    flag_bits: int = FLAG_BITS

    def __post_init__(self):
        if not 1 <= self.center_bits <= 8:
            raise ValueError("center_bits must be in 1..8")
        if not 1 <= self.expert_bits <= 8:
            raise ValueError("expert_bits must be in 1..8")
        if self.mean_bits != MEAN_BITS:
            raise ValueError(f"mean_bits is fixed at {MEAN_BITS}")
        if self.flag_bits != FLAG_BITS:
            raise ValueError(f"flag_bits is fixed at {FLAG_BITS}")

    def textured_bits(self, kernel_count: int) -> int:
        """Payload bits of one textured block, flag included."""
        return self.flag_bits + kernel_count * (2 * self.center_bits + self.expert_bits)

    def non_textured_bits(self) -> int:
        """Payload bits of one non-textured block, flag included."""
        return self.flag_bits + self.mean_bits


def quantize_uniform(value: float, bits: int) -> int:
    """Uniform midtread code on [0,1]: round(value * (2^bits - 1)), half away from zero."""
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"value {value} outside [0, 1]; clamp before quantizing")
    levels = (1 << bits) - 1
    return int(np.floor(value * levels + 0.5))


def dequantize_uniform(code: int, bits: int) -> float:
    """Inverse of quantize_uniform; code must fit its bit width."""
    code = int(code)
    if not 0 <= code < (1 << bits):
        raise ValueError(f"code {code} does not fit in {bits} bits")
    return code / ((1 << bits) - 1)


def quantize_array(values: np.ndarray, bits: int) -> np.ndarray:
    """Vectorized quantize_uniform."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise ValueError("values outside [0, 1]; clamp before quantizing")
    levels = (1 << bits) - 1
    return np.floor(values * levels + 0.5).astype(np.int64)


def dequantize_array(codes: np.ndarray, bits: int) -> np.ndarray:
    """Vectorized dequantize_uniform."""
    codes = np.asarray(codes)
    if np.any(codes < 0) or np.any(codes >= (1 << bits)):
        raise ValueError(f"codes do not fit in {bits} bits")
    return codes.astype(np.float64) / ((1 << bits) - 1)


def classify_block(block: PixelBlock, variance_threshold: float = DEFAULT_VARIANCE_THRESHOLD) -> str:
    """Textured iff pixel variance strictly exceeds the threshold; ties are non-textured."""
    return TEXTURED if float(np.var(block.pixels)) > variance_threshold else NON_TEXTURED
