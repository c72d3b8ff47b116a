"""Balanced quantization: histogram equalization followed by uniform rounding.

Two equalizers are provided. The exact one maps percentile intervals of the
weights linearly onto equal segments of [0, 1]. The recursive one splits the
working set at its mean (or median) ``k`` times and min-max scales each leaf,
which avoids sorting.

Codes are the index of the equalized segment each weight lands in. Away from
segment boundaries this is identical to ``round_to_zero(2^k w_e - 1/2)``; on a
boundary the rounding formula would push the point into the segment below,
which breaks the one-leaf-one-code property of the recursive equalizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import QuantizedTensor, check_bits, round_to_zero
from .tensor import Tensor, custom_op

MAX_SLOPE = 1e6

EXACT = "exact-percentile"
RECURSIVE_MEAN = "recursive-mean"
RECURSIVE_MEDIAN = "recursive-median"
MODES = (EXACT, RECURSIVE_MEAN, RECURSIVE_MEDIAN)


@dataclass(frozen=True)
class EqualizerSpec:
    """Piecewise-linear map sending [t_i, t_{i+1}) onto [i/N, (i+1)/N).

    ``rank_fallback`` is set when tied values made two thresholds collide;
    equalization then assigns segments by rank (see :func:`equalize_exact`).
    """

    bits: int
    thresholds: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    rank_fallback: bool = False

    @property
    def n_intervals(self) -> int:
        return 1 << self.bits

    def interval_index(self, x) -> np.ndarray:
        """Half-open membership, last interval closed; out-of-range values clamp."""
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(self.thresholds[1:-1], x, side="right")
        return np.clip(idx, 0, self.n_intervals - 1)


def percentile_thresholds(w, k: int) -> EqualizerSpec:
    """Thresholds at the 100 i / 2^k percentiles (linear interpolation)."""
    k = check_bits(k)
    flat = np.asarray(w, dtype=np.float64).ravel()
    n_int = 1 << k
    if flat.size < n_int:
        raise ValueError(f"need at least {n_int} values for {k}-bit equalization, got {flat.size}")
    t = np.quantile(flat, np.arange(n_int + 1) / n_int, method="linear")
    t[0], t[-1] = flat.min(), flat.max()
    widths = np.diff(t)
    collided = bool(np.any(widths <= 0.0))
    with np.errstate(divide="ignore"):
        slopes = np.where(widths > 0.0, (1.0 / n_int) / np.where(widths > 0.0, widths, 1.0), np.inf)
    if collided:
        slopes = np.minimum(slopes, MAX_SLOPE)
    intercepts = np.arange(n_int) / n_int - slopes * t[:-1]
    return EqualizerSpec(k, t, slopes, intercepts, collided)


def _rank_segments(flat: np.ndarray, n_int: int) -> np.ndarray:
    order = np.argsort(flat, kind="stable")
    seg = np.empty(flat.size, dtype=np.int64)
    seg[order] = np.arange(flat.size) * n_int // flat.size
    return seg


def equalize_exact(w, spec: EqualizerSpec, return_index: bool = False):
    """Apply the piecewise-linear equalization; output lies in [0, 1].

    With ``return_index`` the segment index of every entry is returned too.
    """
    w = np.asarray(w, dtype=np.float64)
    flat = w.ravel()
    n_int = spec.n_intervals
    if spec.rank_fallback:
        idx = _rank_segments(flat, n_int)
        out = (idx + 0.5) / n_int
    else:
        x = np.clip(flat, spec.thresholds[0], spec.thresholds[-1])
        idx = spec.interval_index(x)
        out = np.clip(spec.slopes[idx] * x + spec.intercepts[idx], 0.0, 1.0)
    out = out.reshape(w.shape)
    if return_index:
        return out, idx.reshape(w.shape)
    return out


def equalize_backward(grad_out, spec: EqualizerSpec, w) -> np.ndarray:
    """Gradient through the equalizer: slope of the interval holding each weight."""
    w = np.asarray(w, dtype=np.float64)
    if spec.rank_fallback:
        idx = _rank_segments(w.ravel(), spec.n_intervals).reshape(w.shape)
    else:
        idx = spec.interval_index(w)
    return spec.slopes[idx] * np.asarray(grad_out, dtype=np.float64)


def equalize_op(x: Tensor, k: int) -> Tensor:
    """Autodiff node for exact equalization (thresholds recomputed per call)."""
    spec = percentile_thresholds(x.data, k)
    return custom_op(x, lambda v: equalize_exact(v, spec),
                     lambda g, v: equalize_backward(g, spec, v), f"equalize{k}")


@dataclass
class SplitRecord:
    depth: int
    path: int
    n_left: int
    n_right: int
    threshold: float
    mean: float
    median: float
    std: float


@dataclass
class LeafRecord:
    path: int
    members: np.ndarray


@dataclass
class PartitionTrace:
    """What the recursive equalizer did: every split and every leaf."""

    splits: list[SplitRecord] = field(default_factory=list)
    leaves: list[LeafRecord] = field(default_factory=list)


def _split_threshold(values: np.ndarray, mode: str) -> float:
    if mode == RECURSIVE_MEAN:
        return float(values.mean())
    return float(np.median(values))


def recursive_equalize(w, k: int, mode: str = RECURSIVE_MEAN,
                       trace: PartitionTrace | None = None, return_index: bool = False):
    """Approximate histogram equalization by recursive partitioning.

    Each call splits its working set into ``w < T`` and ``w >= T`` where ``T``
    is the set's mean (or median), recurses ``k`` levels, min-max scales each
    leaf into [0, 1], and combines children as ``W_l / 2`` and ``W_g / 2 + 1/2``.
    The working set is carried as an index array rather than a dense mask;
    entries outside it contribute 0 exactly as with the mask.
    """
    k = check_bits(k)
    if mode not in (RECURSIVE_MEAN, RECURSIVE_MEDIAN):
        raise ValueError(f"unknown threshold mode {mode!r}")
    w = np.asarray(w, dtype=np.float64)
    flat = w.ravel()
    if flat.size < (1 << k):
        raise ValueError(f"need at least {1 << k} values for {k}-bit equalization, got {flat.size}")
    out = np.zeros(flat.size)
    seg = np.zeros(flat.size, dtype=np.int64)

    def visit(members: np.ndarray, level: int, depth: int, path: int) -> None:
        values = flat[members]
        if level == 0:
            if trace is not None:
                trace.leaves.append(LeafRecord(path, members))
            if members.size == 0:
                return
            lo, hi = values.min(), values.max()
            out[members] = 0.5 if hi == lo else (values - lo) / (hi - lo)
            seg[members] = 0
            return
        if members.size == 0:
            # empty working set: both children are empty too
            if trace is not None:
                trace.splits.append(SplitRecord(depth, path, 0, 0, np.nan, np.nan, np.nan, np.nan))
            visit(members, level - 1, depth + 1, 2 * path)
            visit(members, level - 1, depth + 1, 2 * path + 1)
            return
        t = _split_threshold(values, mode)
        less = values < t
        left, right = members[less], members[~less]
        if trace is not None:
            trace.splits.append(SplitRecord(depth, path, left.size, right.size, t,
                                            float(values.mean()), float(np.median(values)),
                                            float(values.std())))
        visit(left, level - 1, depth + 1, 2 * path)
        visit(right, level - 1, depth + 1, 2 * path + 1)
        out[left] = 0.5 * out[left]
        out[right] = 0.5 * out[right] + 0.5
        seg[right] += 1 << (level - 1)

    visit(np.arange(flat.size), k, 0, 0)
    out = out.reshape(w.shape)
    if return_index:
        return out, seg.reshape(w.shape)
    return out


def rounded_codes(w_e, k: int) -> np.ndarray:
    """round_to_zero(2^k w_e - 1/2): the rounding formula applied to equalized values."""
    return round_to_zero((1 << k) * np.asarray(w_e, dtype=np.float64) - 0.5).astype(np.int64)


def fixed_point_from_equalized(w_e, k: int) -> np.ndarray:
    """Map equalized values in [0, 1] onto {-1/2, -1/2 + 1/(2^k-1), ..., 1/2}."""
    return rounded_codes(w_e, k) / ((1 << k) - 1) - 0.5


def equalize(w, k: int, mode: str = EXACT, trace: PartitionTrace | None = None):
    """Equalized values and segment indices for any of the three modes."""
    if mode == EXACT:
        return equalize_exact(w, percentile_thresholds(w, k), return_index=True)
    if mode in (RECURSIVE_MEAN, RECURSIVE_MEDIAN):
        return recursive_equalize(w, k, mode, trace=trace, return_index=True)
    raise ValueError(f"unknown equalization mode {mode!r}")


def balanced_quantize(w, k: int, mode: str = EXACT,
                      trace: PartitionTrace | None = None) -> QuantizedTensor:
    """k-bit balanced quantization of ``w``.

    Values dequantize to the 2^k-point grid spanning [-max|w|, max|w|].
    """
    k = check_bits(k)
    w = np.asarray(w, dtype=np.float64)
    scale = float(np.max(np.abs(w))) if w.size else 0.0
    _, seg = equalize(w, k, mode, trace)
    if scale == 0.0:
        return QuantizedTensor(np.zeros(w.shape, np.uint8), k, 0.0)
    return QuantizedTensor(seg.astype(np.uint8), k, scale)


def balanced_quantize_values(w, k: int, mode: str = EXACT) -> np.ndarray:
    return balanced_quantize(w, k, mode).dequantize()


@dataclass
class BalanceReport:
    """Outcome of checking the recursive-partition balance bound on one tensor."""

    gamma: float
    ratio: float
    holds: bool
    leaves_distinct: bool
    mean_median_ok: bool
    counts: np.ndarray
    empty_codes: list[int]
    effective_bits: float


def verify_balance_bound(w, k: int, mode: str = RECURSIVE_MEAN) -> BalanceReport:
    """Check that code counts differ by at most gamma^(2k).

    gamma is the worst left/right size ratio over all splits (inf if a side
    was empty). Empty codes are excluded from the ratio and listed separately.
    Also verifies that every leaf's equalized values sit in its own segment
    [p/N, (p+1)/N] and receive code p, and that |mean - median| <= std held at
    every split.
    """
    from .metrics import entropy_bits

    if mode not in (RECURSIVE_MEAN, RECURSIVE_MEDIAN):
        raise ValueError("balance bound applies to the recursive modes only")
    k = check_bits(k)
    n_int = 1 << k
    trace = PartitionTrace()
    w = np.asarray(w, dtype=np.float64)
    w_e, seg = recursive_equalize(w, k, mode, trace=trace, return_index=True)
    codes = balanced_quantize(w, k, mode).codes.ravel() if np.any(w) else seg.ravel()
    w_e = w_e.ravel()

    gamma = 1.0
    mean_median_ok = True
    for s in trace.splits:
        if s.n_left == 0 or s.n_right == 0:
            gamma = np.inf
            continue
        gamma = max(gamma, s.n_left / s.n_right, s.n_right / s.n_left)
        slack = 1e-12 * max(1.0, abs(s.mean), abs(s.median))
        if abs(s.mean - s.median) > s.std + slack:
            mean_median_ok = False

    counts = np.bincount(codes, minlength=n_int)
    populated = counts[counts > 0]
    ratio = float(populated.max() / populated.min())
    bound = gamma ** (2 * k)
    holds = bool(ratio <= bound)

    paths = [leaf.path for leaf in trace.leaves]
    leaves_distinct = len(set(paths)) == len(paths) == n_int
    for leaf in trace.leaves:
        if leaf.members.size == 0:
            continue
        vals = w_e[leaf.members]
        lo, hi = leaf.path / n_int, (leaf.path + 1) / n_int
        if vals.min() < lo or vals.max() > hi or np.any(codes[leaf.members] != leaf.path):
            leaves_distinct = False

    empty = [int(c) for c in np.flatnonzero(counts == 0)]
    return BalanceReport(float(gamma), ratio, holds, leaves_distinct, mean_median_ok,
                         counts, empty, entropy_bits(counts))
