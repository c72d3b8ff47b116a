"""Effective bitwidth and code-distribution diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .quant import QuantizedTensor


@dataclass(frozen=True)
class CodeHistogram:
    counts: np.ndarray
    total: int

    @classmethod
    def of(cls, qt: QuantizedTensor) -> "CodeHistogram":
        counts = np.bincount(qt.codes.ravel(), minlength=1 << qt.bits)
        return cls(counts, int(counts.sum()))

    def rows(self) -> list[tuple[int, int, int]]:
        return [(c, c + 1, int(n)) for c, n in enumerate(self.counts)]


def entropy_bits(counts) -> float:
    """Base-2 entropy of a histogram; empty bins contribute nothing."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("entropy of an empty histogram is undefined")
    p = counts[counts > 0] / total
    return float(max(0.0, -np.sum(p * np.log2(p))))


def effective_bitwidth(qt: QuantizedTensor) -> float:
    """Entropy (bits) of the code distribution of a quantized tensor."""
    if qt.codes.size == 0:
        raise ValueError("effective bitwidth of an empty tensor is undefined")
    return entropy_bits(CodeHistogram.of(qt).counts)


def layer_mean_effective_bitwidth(layers: Iterable[QuantizedTensor]) -> float:
    """Mean of the per-layer effective bitwidths.

    Accepts any iterable of quantized weight tensors, or a model exposing
    ``quantized_weights()``.
    """
    if hasattr(layers, "quantized_weights"):
        layers = layers.quantized_weights()
    values = [effective_bitwidth(q) for q in layers]
    if not values:
        raise ValueError("model has no quantized layers")
    return float(np.mean(values))


def histogram_rows(values, bins=64, range_=None) -> list[tuple[float, float, int]]:
    """(bin_left, bin_right, count) rows for a real-valued distribution."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64).ravel(), bins=bins, range=range_)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def quantized_histogram_rows(qt: QuantizedTensor) -> list[tuple[float, float, int]]:
    """Histogram over the dequantized levels; each level gets a bin centred on it."""
    counts = CodeHistogram.of(qt).counts
    levels = QuantizedTensor(np.arange(len(counts)), qt.bits, qt.scale, qt.convention).dequantize()
    half = (levels[1] - levels[0]) / 2 if len(levels) > 1 and levels[1] != levels[0] else 0.5
    return [(float(v - half), float(v + half), int(c)) for v, c in zip(levels, counts)]


def write_histogram_csv(rows, fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["bin_left", "bin_right", "count"])
    for left, right, count in rows:
        writer.writerow([repr(float(left)), repr(float(right)), int(count)])
