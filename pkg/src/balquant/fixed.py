"""Integer-only evaluation of quantized layers.

A hidden layer computes ``Q_A(sigma(alpha * acc + b))`` where ``acc`` is the
integer accumulator ``sum_i (2 w_i - L_w) x_i`` over weight codes ``w`` and
activation codes ``x`` and ``alpha = s / (L_w * L_x)`` folds the weight scale
and both grid denominators. Because sigma is monotone, ``Q_A`` reduces to
counting how many precomputed integer thresholds ``acc`` exceeds.

Activation decision points are the midpoints between adjacent output levels,
``h_j = (2j - 1) / (2 (2^A - 1))``; the quantizer's round-half-toward-zero
ties resolve downward, hence the strict ``acc > threshold`` comparison.
The floor formula ``floor((sigma^-1(h_j) - b) / alpha)`` gives each starting
threshold, which is then checked against the activation quantizer evaluated in
float64 so accumulators landing exactly on a decision point agree with the
float path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bitops import COL, ROW, gemm_multibit, pack
from .quant import check_bits, q_k_codes

INT_MIN = np.iinfo(np.int64).min
INT_MAX = np.iinfo(np.int64).max

ASCENDING = "ascending"
DESCENDING = "descending"


@dataclass(frozen=True)
class Activation:
    """A monotone activation with its inverse on (0, 1)."""

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Callable[[float], float]
    increasing: bool = True


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


SIGMOID = Activation("sigmoid", _sigmoid, lambda h: math.log(h / (1.0 - h)))
# identity clipped into [0, 1] so the activation quantizer's domain holds
CLIP = Activation("clip", lambda x: np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0), lambda h: h)
ACTIVATIONS = {a.name: a for a in (SIGMOID, CLIP)}


def decision_points(act_bits: int) -> np.ndarray:
    levels = (1 << check_bits(act_bits)) - 1
    return (2 * np.arange(1, levels + 1) - 1) / (2 * levels)


@dataclass(frozen=True)
class ThresholdTable:
    """Integer thresholds for one layer; row j of ``thresholds`` serves output unit j.

    A single row (scalar bias) is shared by every unit.

    ``alpha`` and ``bias`` are kept for audit only; evaluation never reads them.
    """

    K: int
    thresholds: np.ndarray
    alpha: float
    bias: np.ndarray
    direction: str
    weight_bits: int
    input_bits: int
    act_bits: int
    activation: str

    @property
    def n_out(self) -> int:
        return self.thresholds.shape[0]


_SPAN = 2 ** 62
_NUDGES = 8


def _threshold(t: float, pred_above: Callable[[int], bool], descending: bool) -> int:
    """Largest integer n with ``pred_above(n)`` false (ascending case).

    Starts from floor(t) (ceil(t) when descending) and nudges by one where the
    float predicate disagrees. If the predicate is flat near t (an activation
    saturated in float64) the switch point is found by bisection over the
    int64-safe range, saturating to a sentinel when it never switches.
    """
    if math.isnan(t):
        raise ValueError("threshold is undefined")
    # ascending: f(n) = pred_above(n); descending: f(n) = pred_above(-n) and negate back
    sign = -1 if descending else 1

    def above(n: int) -> bool:
        return pred_above(sign * n)

    if not math.isinf(t) and abs(t) <= _SPAN:
        n = math.floor(sign * t)
        for _ in range(_NUDGES):
            if above(n):
                n -= 1
            elif not above(n + 1):
                n += 1
            else:
                return sign * n
    if above(-_SPAN):
        return INT_MIN if not descending else INT_MAX
    if not above(_SPAN):
        return INT_MAX if not descending else INT_MIN
    lo, hi = -_SPAN, _SPAN  # above(lo) false, above(hi) true
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if above(mid):
            hi = mid
        else:
            lo = mid
    return sign * lo


def precompute_thresholds(alpha: float, bias, activation: Activation | str = SIGMOID,
                          act_bits: int = 2, K: int = 0, weight_bits: int = 1,
                          input_bits: int = 1) -> ThresholdTable:
    """Build the integer comparison table reproducing ``Q_A(sigma(alpha * acc + b))``.

    For ascending order the output code is the number of thresholds that
    ``2^K * acc`` strictly exceeds; for descending order (alpha < 0) it is the
    number it falls strictly below.
    """
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    if not act.increasing:
        raise ValueError(f"activation {act.name!r} must be increasing")
    act_bits = check_bits(act_bits)
    bias = np.atleast_1d(np.asarray(bias, dtype=np.float64))
    levels = (1 << act_bits) - 1
    h = decision_points(act_bits)
    descending = alpha < 0
    scale = float(2 ** K)
    table = np.empty((bias.size, levels), dtype=np.int64)
    for u, b in enumerate(bias):
        for j, hj in enumerate(h):
            if alpha == 0.0:
                # constant layer: output is Q_A(sigma(b)) whatever acc is
                above = int(q_k_codes(act.forward(b), act_bits)) > j
                table[u, j] = INT_MIN if above else INT_MAX
                continue
            t = scale * (act.inverse(float(hj)) - b) / alpha

            # decided by the activation quantizer itself, so ties round as on the float path
            def pred_above(n, b=b, j=j):
                return int(q_k_codes(act.forward(alpha * (n / scale) + b), act_bits)) > j

            table[u, j] = _threshold(t, pred_above, descending)
    return ThresholdTable(K, table, float(alpha), bias, DESCENDING if descending else ASCENDING,
                          check_bits(weight_bits), check_bits(input_bits), act_bits, act.name)


def layer_alpha(weight_scale: float, weight_bits: int, input_bits: int) -> float:
    return weight_scale / (((1 << weight_bits) - 1) * ((1 << input_bits) - 1))


def accumulate(w_codes, x_codes, weight_bits: int, input_bits: int) -> np.ndarray:
    """Integer accumulator ``X (2W - L_w)`` from unsigned codes via the bit kernel.

    ``x_codes`` is (batch, in), ``w_codes`` is (in, out).
    """
    x_codes = np.asarray(x_codes)
    w_codes = np.asarray(w_codes)
    prod = gemm_multibit(pack(x_codes, input_bits, ROW), pack(w_codes, weight_bits, COL))
    row_sums = x_codes.astype(np.int64).sum(axis=1, keepdims=True)
    return 2 * prod - ((1 << weight_bits) - 1) * row_sums


def apply_thresholds(acc: np.ndarray, table: ThresholdTable) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    if table.n_out != 1 and (acc.ndim == 0 or acc.shape[-1] != table.n_out):
        raise ValueError(f"accumulator shape {acc.shape} does not match a table with {table.n_out} units")
    scaled = acc << table.K if table.K else acc
    thr = table.thresholds if table.n_out != 1 else table.thresholds[0]
    if table.direction == ASCENDING:
        hits = scaled[..., None] > thr
    else:
        hits = scaled[..., None] < thr
    return hits.sum(axis=-1).astype(np.uint8)


def eval_layer_fixed(w_codes, x_codes, table: ThresholdTable) -> np.ndarray:
    """Output activation codes of a quantized layer using integers only."""
    w_codes = np.asarray(w_codes)
    x_codes = np.asarray(x_codes)
    if not (np.issubdtype(w_codes.dtype, np.integer) and np.issubdtype(x_codes.dtype, np.integer)):
        raise TypeError("eval_layer_fixed takes integer codes")
    if w_codes.size and w_codes.max() >= (1 << table.weight_bits):
        raise ValueError(f"weight codes exceed the table's {table.weight_bits}-bit width")
    if x_codes.size and x_codes.max() >= (1 << table.input_bits):
        raise ValueError(f"input codes exceed the table's {table.input_bits}-bit width")
    if table.n_out not in (1, w_codes.shape[1]):
        raise ValueError(f"layer has {w_codes.shape[1]} outputs, table has {table.n_out}")
    return apply_thresholds(accumulate(w_codes, x_codes, table.weight_bits, table.input_bits), table)


def eval_layer_float(w_codes, x_codes, weight_scale: float, bias, weight_bits: int,
                     input_bits: int, act_bits: int, activation: Activation | str = SIGMOID) -> np.ndarray:
    """Reference path: dequantize, multiply in float64, activate, quantize.

    The product of the dequantized operands is formed as ``alpha * (X (2W - L_w))``
    with the integer part exact in float64, so a pre-activation that lands
    exactly on a decision point rounds the same way on every call.
    """
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    lw = (1 << weight_bits) - 1
    w = 2.0 * np.asarray(w_codes, dtype=np.float64) - lw
    x = np.asarray(x_codes, dtype=np.float64)
    pre = layer_alpha(weight_scale, weight_bits, input_bits) * (x @ w)
    y = act.forward(pre + np.asarray(bias, dtype=np.float64))
    return q_k_codes(y, act_bits)


@dataclass(frozen=True)
class ArgmaxTable:
    """Pairwise integer margins for an output layer without activation quantization.

    Unit j beats unit i iff ``acc_j - acc_i > margins[i, j]`` where
    ``margins[i, j] = floor((b_i - b_j) / alpha)``.
    """

    margins: np.ndarray
    alpha: float
    bias: np.ndarray
    weight_bits: int
    input_bits: int


def precompute_argmax(alpha: float, bias, weight_bits: int, input_bits: int) -> ArgmaxTable:
    bias = np.asarray(bias, dtype=np.float64)
    n = bias.size
    margins = np.empty((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if alpha == 0.0:
                margins[i, j] = INT_MIN if bias[j] > bias[i] else INT_MAX
                continue

            def beats(d, i=i, j=j):
                return alpha * d + bias[j] > bias[i]

            margins[i, j] = _threshold((bias[i] - bias[j]) / alpha, beats, alpha < 0)
    return ArgmaxTable(margins, float(alpha), bias, weight_bits, input_bits)


def eval_argmax_fixed(w_codes, x_codes, table: ArgmaxTable) -> np.ndarray:
    """Index of the largest ``alpha * acc + b`` computed with integer comparisons only.

    Ties go to the lowest index, as with ``np.argmax``.
    """
    acc = accumulate(w_codes, x_codes, table.weight_bits, table.input_bits)
    descending = table.alpha < 0
    best = np.zeros(acc.shape[0], dtype=np.int64)
    rows = np.arange(acc.shape[0])
    for j in range(1, acc.shape[1]):
        diff = acc[:, j] - acc[rows, best]
        margin = table.margins[best, j]
        wins = diff < margin if descending else diff > margin
        best = np.where(wins, j, best)
    return best
