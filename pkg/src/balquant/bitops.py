"""Bit-plane packed integer dot products using AND + popcount.

An M-bit code vector x is split into planes c_m(x) with x = sum_m c_m(x) 2^m.
Each plane is packed into little-endian uint64 words (entry j lives in word
j // 64, bit j % 64; padding bits are zero), so

    x . y = sum_m sum_k 2^(m+k) popcount(c_m(x) & c_k(y))

costs M*K AND+popcount passes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .quant import check_bits

WORD_BITS = 64
ROW = "row"
COL = "col"


@dataclass(frozen=True)
class BitPlaneMatrix:
    """A k-bit code matrix stored as k packed bit planes.

    ``layout == "row"`` packs each row (rows are the bit vectors);
    ``layout == "col"`` packs each column. ``planes`` has shape
    ``(bits, n_vectors, n_words)``.
    """

    rows: int
    cols: int
    bits: int
    planes: np.ndarray
    layout: str = ROW

    @property
    def vector_length(self) -> int:
        return self.cols if self.layout == ROW else self.rows


def _pack_bits(bits01: np.ndarray) -> np.ndarray:
    """Pack a (n_vectors, length) 0/1 array into (n_vectors, n_words) uint64."""
    n_vec, length = bits01.shape
    n_words = max(1, -(-length // WORD_BITS))
    padded = np.zeros((n_vec, n_words * WORD_BITS), dtype=np.uint8)
    padded[:, :length] = bits01
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").reshape(n_vec, n_words)


def _unpack_bits(words: np.ndarray, length: int) -> np.ndarray:
    as_bytes = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :length]


def pack(codes, bits: int, layout: str = ROW) -> BitPlaneMatrix:
    """Decompose an unsigned code matrix (or vector) into packed bit planes."""
    bits = check_bits(bits)
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    if codes.ndim != 2:
        raise ValueError("pack expects a vector or a matrix")
    if not np.issubdtype(codes.dtype, np.integer):
        if not np.all(codes == np.round(codes)):
            raise ValueError("codes must be integers")
        codes = codes.astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise ValueError(f"codes do not fit in {bits} bits")
    if layout not in (ROW, COL):
        raise ValueError(f"unknown layout {layout!r}")
    rows, cols = codes.shape
    vectors = codes if layout == ROW else codes.T
    c = vectors.astype(np.uint64)
    planes = np.stack([_pack_bits(((c >> np.uint64(m)) & np.uint64(1)).astype(np.uint8))
                       for m in range(bits)])
    return BitPlaneMatrix(rows, cols, bits, planes, layout)


def unpack(bp: BitPlaneMatrix) -> np.ndarray:
    total = np.zeros((bp.planes.shape[1], bp.vector_length), dtype=np.int64)
    for m in range(bp.bits):
        total += _unpack_bits(bp.planes[m], bp.vector_length).astype(np.int64) << m
    return total if bp.layout == ROW else total.T


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def dot_1bit(x, y) -> int:
    """Dot product of two 0/1 vectors as popcount(and(x, y))."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"dot_1bit: length mismatch {x.shape} vs {y.shape}")
    if np.any((x != 0) & (x != 1)) or np.any((y != 0) & (y != 1)):
        raise ValueError("dot_1bit expects bit vectors")
    px = _pack_bits(x[None, :].astype(np.uint8))
    py = _pack_bits(y[None, :].astype(np.uint8))
    return int(popcount(px & py).sum())


class PassCounter:
    """Counts AND+popcount plane passes executed by the kernels."""

    def __init__(self):
        self.passes = 0


def dot_multibit(x: BitPlaneMatrix, y: BitPlaneMatrix, counter: PassCounter | None = None) -> int:
    """Integer dot product of two packed code vectors of widths M and K."""
    if x.planes.shape[1] != 1 or y.planes.shape[1] != 1:
        raise ValueError("dot_multibit expects packed vectors")
    if x.vector_length != y.vector_length:
        raise ValueError(f"dot_multibit: length mismatch {x.vector_length} vs {y.vector_length}")
    total = 0
    for m in range(x.bits):
        for k in range(y.bits):
            total += int(popcount(x.planes[m, 0] & y.planes[k, 0]).sum()) << (m + k)
            if counter is not None:
                counter.passes += 1
    return total


def gemm_multibit(a: BitPlaneMatrix, b: BitPlaneMatrix, counter: PassCounter | None = None) -> np.ndarray:
    """Integer matrix product of packed code matrices, exact in int64.

    ``a`` must be row-packed and ``b`` column-packed so both operands expose
    their inner dimension as bit vectors.
    """
    if a.layout != ROW or b.layout != COL:
        raise ValueError("gemm_multibit needs a row-packed left and a column-packed right operand")
    if a.cols != b.rows:
        raise ValueError(f"gemm_multibit: cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    out = np.zeros((a.rows, b.cols), dtype=np.int64)
    for m in range(a.bits):
        am = a.planes[m][:, None, :]
        for k in range(b.bits):
            counts = popcount(am & b.planes[k][None, :, :]).sum(axis=2, dtype=np.int64)
            out += counts << (m + k)
            if counter is not None:
                counter.passes += 1
    return out


def int_matmul(a_codes, b_codes) -> np.ndarray:
    """Integer GEMM of code matrices through the bit-plane kernel."""
    a_codes, b_codes = np.asarray(a_codes), np.asarray(b_codes)
    abits = max(1, int(a_codes.max()).bit_length()) if a_codes.size else 1
    bbits = max(1, int(b_codes.max()).bit_length()) if b_codes.size else 1
    return gemm_multibit(pack(a_codes, abits, ROW), pack(b_codes, bbits, COL))


def bench(sizes=(256, 1024, 4096), bitwidths=((1, 1), (2, 2), (4, 4)), repeats: int = 5,
          seed: int = 0) -> list[dict]:
    """Time the bit-plane kernel against a plain int64 GEMM.

    Each size n runs a (16 x n) by (n x 16) product. Rows report the median
    of ``repeats`` runs in nanoseconds.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        for m_bits, k_bits in bitwidths:
            a = rng.integers(0, 1 << m_bits, size=(16, n))
            b = rng.integers(0, 1 << k_bits, size=(n, 16))
            pa, pb = pack(a, m_bits, ROW), pack(b, k_bits, COL)
            kernel, naive = [], []
            for _ in range(max(5, repeats)):
                t0 = time.perf_counter_ns()
                gemm_multibit(pa, pb)
                t1 = time.perf_counter_ns()
                a @ b
                t2 = time.perf_counter_ns()
                kernel.append(t1 - t0)
                naive.append(t2 - t1)
            rows.append({"size": n, "M": m_bits, "K": k_bits,
                         "kernel_ns": int(np.median(kernel)), "naive_ns": int(np.median(naive))})
    return rows
