"""Quantized GRU and LSTM cells and a small sequence model around them.

GRU (all activations sigmoid so the state stays in [0, 1])::

    z  = sigmoid([h, x] W_z + b_z)
    r  = sigmoid([h, x] W_r + b_r)
    hc = sigmoid([Q_k(r * h), x] W + b)
    h' = Q_k((1 - z) * h + z * hc)

LSTM (cell state C stays full precision)::

    f, i, o = sigmoid([h, x] W_{f,i,o} + b_{f,i,o})
    Cc = tanh([h, x] W_C + b_C)
    C' = f * C + i * Cc
    h' = Q_k(o * sigmoid(C'))

Every matrix product consumes grid-valued operands: h is on the k-bit grid,
x is on the input grid and the weights come out of a weight quantizer.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import BALANCED_EXACT, IMBALANCED, Bias, Parameter
from .quant import QuantizedTensor, check_bits, q_k
from .tensor import Tensor


def _check_unit_grid(values: np.ndarray, bits: int, what: str) -> None:
    levels = (1 << bits) - 1
    if values.size == 0:
        return
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError(f"{what} must lie in [0, 1]")
    scaled = values * levels
    if np.max(np.abs(scaled - np.rint(scaled))) > 1e-9:
        raise ValueError(f"{what} is not on the {bits}-bit grid")


def check_weight(w: Tensor, bits: int, name: str = "weight") -> None:
    """Contract: ``w`` holds quantized values on a symmetric k-bit grid inside [-1, 1].

    The grid scale is taken to be max |w|: every weight quantizer here sends
    the largest-magnitude entry to an extreme code.
    """
    v = w.data
    s = float(np.max(np.abs(v))) if v.size else 0.0
    if s > 1.0 + 1e-12:
        raise ValueError(f"{name} must be quantized into [-1, 1] (max |w| = {s:.4g})")
    if s == 0.0:
        return
    levels = (1 << bits) - 1
    u = (v / s + 1.0) * levels / 2.0
    if np.max(np.abs(u - np.rint(u))) > 1e-9:
        raise ValueError(f"{name} is not quantized to {bits} bits")


def in_grid(values: np.ndarray, bits: int) -> bool:
    """Exact membership of every entry in {0, 1/(2^k-1), ..., 1}."""
    levels = (1 << bits) - 1
    grid = np.arange(levels + 1) / levels
    idx = np.clip(np.rint(np.asarray(values) * levels).astype(np.int64), 0, levels)
    return bool(np.all(grid[idx] == values))


def _qk(x: Tensor, k: int) -> Tensor:
    return T.ste(x, lambda v: q_k(v, k), f"Q{k}_ste")


def gru_step(h_prev: Tensor, x_t: Tensor, W_z: Tensor, W_r: Tensor, W: Tensor, k: int,
             weight_bits: int | None = None, biases=None, input_bits: int | None = None,
             trace: dict | None = None) -> Tensor:
    """One quantized GRU step on a batch; returns the new k-bit state.

    ``biases`` is an optional (b_z, b_r, b) triple; the cell has none by default.
    ``trace`` receives the pre-quantization state under key ``"pre"``.
    """
    k = check_bits(k)
    weight_bits = k if weight_bits is None else weight_bits
    for name, w in (("W_z", W_z), ("W_r", W_r), ("W", W)):
        check_weight(w, weight_bits, name)
    _check_unit_grid(h_prev.data, k, "h_prev")
    if input_bits is not None:
        _check_unit_grid(x_t.data, input_bits, "x_t")
    elif x_t.data.size and (x_t.data.min() < 0 or x_t.data.max() > 1):
        raise ValueError("x_t must lie in [0, 1]")

    hx = T.concat([h_prev, x_t], axis=1)
    z_pre, r_pre = T.matmul(hx, W_z), T.matmul(hx, W_r)
    if biases is not None:
        z_pre, r_pre = T.add(z_pre, biases[0]), T.add(r_pre, biases[1])
    z, r = T.sigmoid(z_pre), T.sigmoid(r_pre)
    rh = _qk(T.hadamard(r, h_prev), k)
    c_pre = T.matmul(T.concat([rh, x_t], axis=1), W)
    if biases is not None:
        c_pre = T.add(c_pre, biases[2])
    cand = T.sigmoid(c_pre)
    mix = T.add(T.hadamard(T.affine(z, -1.0, 1.0), h_prev), T.hadamard(z, cand))
    if trace is not None:
        trace["pre"] = mix.data
        trace["z"], trace["r"], trace["candidate"] = z.data, r.data, cand.data
    return _qk(mix, k)


def lstm_step(h_prev: Tensor, C_prev: Tensor, x_t: Tensor, W_f: Tensor, W_i: Tensor,
              W_C: Tensor, W_o: Tensor, biases, k: int, weight_bits: int | None = None,
              input_bits: int | None = None, trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """One quantized LSTM step; ``biases`` is (b_f, b_i, b_C, b_o). Returns (h_t, C_t)."""
    k = check_bits(k)
    weight_bits = k if weight_bits is None else weight_bits
    for name, w in (("W_f", W_f), ("W_i", W_i), ("W_C", W_C), ("W_o", W_o)):
        check_weight(w, weight_bits, name)
    _check_unit_grid(h_prev.data, k, "h_prev")
    if input_bits is not None:
        _check_unit_grid(x_t.data, input_bits, "x_t")
    elif x_t.data.size and (x_t.data.min() < 0 or x_t.data.max() > 1):
        raise ValueError("x_t must lie in [0, 1]")
    b_f, b_i, b_C, b_o = biases

    hx = T.concat([h_prev, x_t], axis=1)
    f = T.sigmoid(T.add(T.matmul(hx, W_f), b_f))
    i = T.sigmoid(T.add(T.matmul(hx, W_i), b_i))
    cand = T.tanh(T.add(T.matmul(hx, W_C), b_C))
    C = T.add(T.hadamard(f, C_prev), T.hadamard(i, cand))
    o = T.sigmoid(T.add(T.matmul(hx, W_o), b_o))
    if trace is not None:
        trace.update(f=f.data, i=i.data, o=o.data, candidate=cand.data)
    return _qk(T.hadamard(o, T.sigmoid(C)), k), C


class QuantRNN:
    """GRU or LSTM over a sequence with a per-step quantized linear readout.

    Inputs are (batch, steps, n_in) arrays in [0, 1]; targets are (batch, steps)
    bits. The float copies of the recurrent weights are kept inside [-1, 1] by
    clipping after each update unless ``tanh_clip`` is set.
    """

    def __init__(self, cell: str, n_in: int, hidden: int, bits: int = 2, weight_bits: int = 2,
                 mode: str = BALANCED_EXACT, input_bits: int = 1, tanh_clip: bool = False,
                 rng: np.random.Generator | None = None):
        if cell not in ("gru", "lstm"):
            raise ValueError(f"unknown cell {cell!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cell, self.n_in, self.hidden = cell, n_in, hidden
        self.bits, self.weight_bits, self.mode = check_bits(bits), check_bits(weight_bits), mode
        self.input_bits, self.tanh_clip = check_bits(input_bits), tanh_clip
        self.grad_bits = None
        if mode != IMBALANCED and hidden < (1 << weight_bits):
            raise ValueError(f"balanced {weight_bits}-bit quantization of the {hidden}-entry readout "
                             f"needs at least {1 << weight_bits} hidden units")
        gates = ("z", "r", "c") if cell == "gru" else ("f", "i", "C", "o")
        limit = np.sqrt(6.0 / (n_in + 2 * hidden))
        self.weights = [Parameter(rng.uniform(-limit, limit, (hidden + n_in, hidden)), f"W_{g}")
                        for g in gates]
        self.biases = [Bias(np.zeros(hidden), f"b_{g}") for g in gates]
        if cell == "lstm":
            self.biases[0].value[:] = 1.0  # forget gate open at start
        self.readout = Parameter(rng.uniform(-limit, limit, (hidden, 1)), "W_out")
        self.readout_bias = Bias(np.zeros(1), "b_out")

    def parameters(self):
        yield from self.weights
        yield from self.biases
        yield self.readout
        yield self.readout_bias

    def clip_weights(self) -> None:
        if not self.tanh_clip:
            for p in [*self.weights, self.readout]:
                p.value = np.clip(p.value, -1.0, 1.0)

    def _quantized(self, p: Parameter) -> Tensor:
        wq = p.quantized(self.weight_bits, self.mode, self.tanh_clip)
        if self.tanh_clip:
            s = float(np.max(np.abs(wq.data))) or 1.0
            wq = T.affine(wq, 1.0 / s)
        return wq

    def logits(self, x: np.ndarray) -> Tensor:
        batch, steps, _ = x.shape
        ws = [self._quantized(p) for p in self.weights]
        bs = [b.tensor() for b in self.biases]
        w_out, b_out = self._quantized(self.readout), self.readout_bias.tensor()
        h = Tensor(np.zeros((batch, self.hidden)))
        C = Tensor(np.zeros((batch, self.hidden)))
        outs = []
        for t in range(steps):
            xt = Tensor(q_k(np.clip(x[:, t, :], 0.0, 1.0), self.input_bits))
            if self.cell == "gru":
                h = gru_step(h, xt, *ws, self.bits, self.weight_bits, bs, self.input_bits)
            else:
                h, C = lstm_step(h, C, xt, *ws, bs, self.bits, self.weight_bits, self.input_bits)
            outs.append(T.add(T.matmul(h, w_out), b_out))
        return T.concat(outs, axis=1)

    def loss(self, x: np.ndarray, y: np.ndarray):
        logits = self.logits(x)
        loss = T.sigmoid_cross_entropy(logits, y)
        correct = int(((logits.data > 0).astype(int) == y).sum())
        return loss, correct, y.size

    def quantized_weights(self) -> list[QuantizedTensor]:
        return [p.frozen(self.weight_bits, self.mode, self.tanh_clip)
                for p in [*self.weights, self.readout]]

    def predict_float(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).data
