"""Quantized MLP built on the autodiff engine, plus the integer inference export."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .balanced import EXACT, RECURSIVE_MEAN, RECURSIVE_MEDIAN, balanced_quantize
from .fixed import (ACTIVATIONS, ArgmaxTable, ThresholdTable, eval_argmax_fixed, eval_layer_fixed,
                    eval_layer_float, layer_alpha, precompute_argmax, precompute_thresholds)
from .quant import QuantizedTensor, check_bits, q_k, q_k_codes, quant_k
from .tensor import Tensor

IMBALANCED = "imbalanced"
BALANCED_EXACT = "balanced-exact"
BALANCED_MEAN = "balanced-mean"
BALANCED_MEDIAN = "balanced-median"
QUANTIZER_MODES = (IMBALANCED, BALANCED_EXACT, BALANCED_MEAN, BALANCED_MEDIAN)

_EQUALIZER = {BALANCED_EXACT: EXACT, BALANCED_MEAN: RECURSIVE_MEAN, BALANCED_MEDIAN: RECURSIVE_MEDIAN}


def quantize_weights(w: np.ndarray, bits: int, mode: str) -> QuantizedTensor:
    """Weight quantizer Q_W for any of the supported modes."""
    if mode == IMBALANCED:
        return quant_k(w, bits)
    if mode in _EQUALIZER:
        return balanced_quantize(w, bits, _EQUALIZER[mode])
    raise ValueError(f"unknown quantizer mode {mode!r}")


def quantize_gradient(g: np.ndarray, bits: int) -> np.ndarray:
    """Uniform G-bit gradient quantizer with per-tensor max scaling."""
    return quant_k(g, bits).dequantize()


def grad_quant(x: Tensor, bits: int | None) -> Tensor:
    """Identity forward; quantizes the gradient flowing back through it."""
    if bits is None:
        return x
    return T.custom_op(x, lambda v: v, lambda g, v: quantize_gradient(g, bits), f"qgrad{bits}")


class Parameter:
    """Floating-point copy of a weight tensor.

    The copy is read only when a quantizer builds W^q and written only by the
    optimizer; the counters make that checkable.
    """

    def __init__(self, value: np.ndarray, name: str):
        self.value = np.array(value, dtype=np.float64)
        self.name = name
        self.reads = 0
        self.writes = 0
        self.leaf: Tensor | None = None

    def quantized(self, bits: int, mode: str, tanh_clip: bool = False) -> Tensor:
        """Leaf tensor for the float copy followed by the STE quantizer."""
        self.reads += 1
        self.leaf = Tensor(self.value, requires_grad=True, name=self.name)
        w = T.tanh(self.leaf) if tanh_clip else self.leaf
        return T.ste(w, lambda v: quantize_weights(v, bits, mode).dequantize(), f"Q_W[{mode},{bits}]")

    def frozen(self, bits: int, mode: str, tanh_clip: bool = False) -> QuantizedTensor:
        self.reads += 1
        v = np.tanh(self.value) if tanh_clip else self.value
        return quantize_weights(v, bits, mode)

    def update(self, new_value: np.ndarray) -> None:
        self.writes += 1
        self.value = np.array(new_value, dtype=np.float64)


class Bias:
    """Full-precision parameter (biases are never quantized)."""

    def __init__(self, value: np.ndarray, name: str):
        self.value = np.array(value, dtype=np.float64)
        self.name = name
        self.leaf: Tensor | None = None
        self.writes = 0

    def tensor(self) -> Tensor:
        self.leaf = Tensor(self.value, requires_grad=True, name=self.name)
        return self.leaf

    def update(self, new_value: np.ndarray) -> None:
        self.writes += 1
        self.value = np.array(new_value, dtype=np.float64)


@dataclass
class QnnLayerSpec:
    n_in: int
    n_out: int
    weight_bits: int = 2
    act_bits: int = 2
    mode: str = BALANCED_EXACT
    activation: str = "sigmoid"

    def __post_init__(self):
        check_bits(self.weight_bits)
        check_bits(self.act_bits)
        if self.mode not in QUANTIZER_MODES:
            raise ValueError(f"unknown quantizer mode {self.mode!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ModelSpec:
    layers: list[QnnLayerSpec]
    input_bits: int = 8
    tanh_clip: bool = False
    kind: str = "mlp"

    def __post_init__(self):
        check_bits(self.input_bits)
        self.layers = [l if isinstance(l, QnnLayerSpec) else QnnLayerSpec(**l) for l in self.layers]
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "input_bits": self.input_bits, "tanh_clip": self.tanh_clip,
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls([QnnLayerSpec(**l) for l in d["layers"]], d.get("input_bits", 8),
                   d.get("tanh_clip", False), d.get("kind", "mlp"))

    @classmethod
    def mlp(cls, sizes, weight_bits=2, act_bits=2, mode=BALANCED_EXACT, input_bits=8,
            activation="sigmoid", tanh_clip=False) -> "ModelSpec":
        layers = [QnnLayerSpec(a, b, weight_bits, act_bits, mode, activation)
                  for a, b in zip(sizes, sizes[1:])]
        return cls(layers, input_bits, tanh_clip)


@dataclass
class FixedLayer:
    """A layer of the exported integer-only model."""

    codes: np.ndarray
    table: ThresholdTable | ArgmaxTable


@dataclass
class FixedModel:
    input_bits: int
    layers: list[FixedLayer] = field(default_factory=list)

    def predict(self, x_codes: np.ndarray) -> np.ndarray:
        a = np.asarray(x_codes)
        for layer in self.layers[:-1]:
            a = eval_layer_fixed(layer.codes, a, layer.table)
        return eval_argmax_fixed(self.layers[-1].codes, a, self.layers[-1].table)


class QuantMLP:
    """L-layer perceptron with quantized weights and activations.

    Hidden layers compute Q_A(sigma(X W^q + b)); the last layer emits logits
    without activation quantization.
    """

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None,
                 grad_bits: int | None = None):
        self.spec = spec
        self.grad_bits = grad_bits
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[Parameter] = []
        self.biases: list[Bias] = []
        for i, l in enumerate(spec.layers):
            limit = np.sqrt(6.0 / (l.n_in + l.n_out))
            self.weights.append(Parameter(rng.uniform(-limit, limit, size=(l.n_in, l.n_out)), f"W{i}"))
            self.biases.append(Bias(np.zeros(l.n_out), f"b{i}"))

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def input_codes(self, x: np.ndarray) -> np.ndarray:
        return q_k_codes(np.clip(x, 0.0, 1.0), self.spec.input_bits)

    def logits(self, x: np.ndarray) -> Tensor:
        """Training forward pass (autodiff graph with STE quantizers)."""
        a = Tensor(q_k(np.clip(x, 0.0, 1.0), self.spec.input_bits))
        self.quantized_nodes = []
        last = len(self.spec.layers) - 1
        for i, (l, w, b) in enumerate(zip(self.spec.layers, self.weights, self.biases)):
            wq = w.quantized(l.weight_bits, l.mode, self.spec.tanh_clip)
            self.quantized_nodes.append(wq)
            pre = grad_quant(T.add(T.matmul(a, wq), b.tensor()), self.grad_bits)
            if i == last:
                return pre
            if l.activation == "sigmoid":
                act = T.sigmoid(pre)
            else:
                act = T.custom_op(pre, lambda v: np.clip(v, 0.0, 1.0),
                                  lambda g, v: g * ((v > 0) & (v < 1)), "clip")
            a = T.ste(act, lambda v, k=l.act_bits: q_k(v, k), f"Q_A[{l.act_bits}]")
        raise AssertionError("unreachable")

    def loss(self, x: np.ndarray, y: np.ndarray):
        logits = self.logits(x)
        loss = T.softmax_cross_entropy(logits, y)
        correct = int((logits.data.argmax(axis=1) == y).sum())
        return loss, correct, len(y)

    def quantized_weights(self) -> list[QuantizedTensor]:
        return [w.frozen(l.weight_bits, l.mode, self.spec.tanh_clip)
                for l, w in zip(self.spec.layers, self.weights)]

    # inference paths

    def predict_float(self, x: np.ndarray, frozen: list[QuantizedTensor] | None = None) -> np.ndarray:
        """Float-reference inference on dequantized codes; returns logits."""
        frozen = frozen if frozen is not None else self.quantized_weights()
        a = self.input_codes(x)
        bits_in = self.spec.input_bits
        last = len(self.spec.layers) - 1
        for i, (l, q, b) in enumerate(zip(self.spec.layers, frozen, self.biases)):
            if i == last:
                # same product as the fixed path: alpha * X (2W - L_w), exact integers in float64
                signed = 2.0 * q.codes.astype(np.float64) - ((1 << l.weight_bits) - 1)
                alpha = layer_alpha(q.scale, l.weight_bits, bits_in)
                return alpha * (a.astype(np.float64) @ signed) + b.value
            a = eval_layer_float(q.codes, a, q.scale, b.value, l.weight_bits, bits_in,
                                 l.act_bits, l.activation)
            bits_in = l.act_bits
        raise AssertionError("unreachable")

    def export_fixed(self, frozen: list[QuantizedTensor] | None = None) -> FixedModel:
        frozen = frozen if frozen is not None else self.quantized_weights()
        fixed = FixedModel(self.spec.input_bits)
        bits_in = self.spec.input_bits
        last = len(self.spec.layers) - 1
        for i, (l, q, b) in enumerate(zip(self.spec.layers, frozen, self.biases)):
            alpha = layer_alpha(q.scale, l.weight_bits, bits_in)
            if i == last:
                table = precompute_argmax(alpha, b.value, l.weight_bits, bits_in)
            else:
                table = precompute_thresholds(alpha, b.value, l.activation, l.act_bits, 0,
                                              l.weight_bits, bits_in)
                bits_in = l.act_bits
            fixed.layers.append(FixedLayer(q.codes, table))
        return fixed


class SGD:
    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in params:
            g = p.leaf.grad if p.leaf is not None and p.leaf.grad is not None else np.zeros_like(p.value)
            if self.weight_decay and isinstance(p, Parameter):
                g = g + self.weight_decay * p.value
            p.update(p.value - lr * g)

    def state(self) -> dict:
        return {}


class Adam:
    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for p in params:
            g = p.leaf.grad if p.leaf is not None and p.leaf.grad is not None else np.zeros_like(p.value)
            if self.weight_decay and isinstance(p, Parameter):
                g = g + self.weight_decay * p.value
            m = self.m.get(p.name, np.zeros_like(g))
            v = self.v.get(p.name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p.update(p.value - lr * mhat / (np.sqrt(vhat) + self.eps))


def make_optimizer(name: str, lr: float, weight_decay: float = 0.0):
    if name == "sgd":
        return SGD(lr, weight_decay)
    if name == "adam":
        return Adam(lr, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")
