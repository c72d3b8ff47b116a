"""Uniform k-bit quantization primitives and their straight-through versions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ste

MAX_BITS = 8

SYMMETRIC = "symmetric"
UNIT_INTERVAL = "unit-interval"


def check_bits(k: int) -> int:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_BITS:
        raise ValueError(f"bitwidth must be an integer in [1, {MAX_BITS}], got {k!r}")
    return int(k)


def round_to_zero(x):
    """Round to nearest integer, ties toward zero: sgn(x) * ceil(|x| - 1/2)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def q_k(w, k: int) -> np.ndarray:
    """Quantize values in [0, 1] to the grid {0, 1/(2^k-1), ..., 1}."""
    k = check_bits(k)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ValueError("q_k expects inputs in [0, 1]")
    levels = (1 << k) - 1
    return round_to_zero(levels * w) / levels


def q_k_codes(w, k: int) -> np.ndarray:
    """Integer codes of :func:`q_k`, i.e. round-to-zero((2^k - 1) w)."""
    k = check_bits(k)
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ValueError("q_k expects inputs in [0, 1]")
    return round_to_zero(((1 << k) - 1) * w).astype(np.uint8)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the scale that maps them back to reals.

    Symmetric tensors dequantize to ``scale * (2c - L) / L`` with
    ``L = 2^k - 1``; unit-interval tensors to ``c / L``.
    """

    codes: np.ndarray
    bits: int
    scale: float = 1.0
    convention: str = SYMMETRIC

    def __post_init__(self):
        check_bits(self.bits)
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < 0 or codes.max() >= (1 << self.bits)):
            raise ValueError(f"codes out of range for {self.bits}-bit tensor")
        object.__setattr__(self, "codes", codes.astype(np.uint8))
        if self.convention not in (SYMMETRIC, UNIT_INTERVAL):
            raise ValueError(f"unknown convention {self.convention!r}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        c = self.codes.astype(np.float64)
        if self.convention == UNIT_INTERVAL:
            return c / self.levels
        return self.scale * (2.0 * c - self.levels) / self.levels

    def signed_codes(self) -> np.ndarray:
        """Odd integers ``2c - L``; dequantized value is ``scale / L`` times this."""
        return 2 * self.codes.astype(np.int64) - self.levels


def quant_k(w, k: int) -> QuantizedTensor:
    """Uniform symmetric quantization through phi(W) = W / (2 max|W|) + 1/2."""
    k = check_bits(k)
    w = np.asarray(w, dtype=np.float64)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    if scale == 0.0:
        # every code dequantizes to 0 when the scale is 0
        return QuantizedTensor(np.zeros(w.shape, np.uint8), k, 0.0)
    phi = np.clip(w / (2.0 * scale) + 0.5, 0.0, 1.0)
    return QuantizedTensor(q_k_codes(phi, k), k, scale)


def quant_k_values(w, k: int) -> np.ndarray:
    return quant_k(w, k).dequantize()


# Straight-through versions. The rounding is the only zero-gradient piece, so
# the whole quantizer passes the incoming gradient unchanged.

def round_to_zero_ste(x: Tensor) -> Tensor:
    return ste(x, round_to_zero, "round_to_zero_ste")


def q_k_ste(x: Tensor, k: int) -> Tensor:
    return ste(x, lambda v: q_k(v, k), f"q{k}_ste")


def quant_k_ste(x: Tensor, k: int) -> Tensor:
    return ste(x, lambda v: quant_k_values(v, k), f"quant{k}_ste")


def ste_wrap(fn):
    """Turn a numpy quantizer ``fn(values) -> values`` into an STE autodiff op."""
    name = getattr(fn, "__name__", "quantizer")
    return lambda x: ste(x, fn, f"ste[{name}]")
