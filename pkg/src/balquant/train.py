"""Training loop, evaluation and checkpoint conversion.

Each step quantizes the floating-point weight copies (W^q = Q_W(W)), runs the
forward pass on W^q with quantized activations between layers, back-propagates
through straight-through quantizers, and hands the resulting gradient to the
optimizer, which alone writes the floating-point copies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, Container
from .data import Dataset
from .fixed import ArgmaxTable, ThresholdTable
from .metrics import effective_bitwidth
from .model import BALANCED_EXACT, FixedLayer, FixedModel, ModelSpec, QuantMLP, make_optimizer
from .rnn import QuantRNN

log = logging.getLogger("balquant")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    lr_decay: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    tanh_clip: bool = False
    grad_bits: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch


@dataclass
class TrainResult:
    model: QuantMLP | QuantRNN
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    rng_state: dict | None = None


def build_model(spec: dict, rng: np.random.Generator, config: TrainConfig | None = None):
    """Instantiate a model from its manifest dictionary."""
    kind = spec.get("kind", "mlp")
    tanh_clip = bool(config.tanh_clip) if config is not None else spec.get("tanh_clip", False)
    grad_bits = config.grad_bits if config is not None else None
    if kind == "mlp":
        mspec = ModelSpec.from_dict(spec)
        mspec.tanh_clip = tanh_clip or mspec.tanh_clip
        return QuantMLP(mspec, rng, grad_bits)
    if kind in ("gru", "lstm"):
        model = QuantRNN(kind, spec["n_in"], spec["hidden"], spec.get("bits", 2),
                         spec.get("weight_bits", 2), spec.get("mode", BALANCED_EXACT),
                         spec.get("input_bits", 1), tanh_clip or spec.get("tanh_clip", False), rng)
        model.grad_bits = grad_bits
        return model
    raise ValueError(f"unknown model kind {kind!r}")


def model_spec_dict(model) -> dict:
    if isinstance(model, QuantMLP):
        return model.spec.to_dict()
    return {"kind": model.cell, "n_in": model.n_in, "hidden": model.hidden, "bits": model.bits,
            "weight_bits": model.weight_bits, "mode": model.mode, "input_bits": model.input_bits,
            "tanh_clip": model.tanh_clip}


def layer_effective_bitwidths(model) -> list[float]:
    return [effective_bitwidth(q) for q in model.quantized_weights()]


def _finite_or_abort(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"loss became {value} at epoch {epoch} step {step}; weight magnitudes are growing - "
            "retry with --tanh-clip and/or --weight-decay")


def train(config: TrainConfig, model_spec: dict | ModelSpec, data: Dataset,
          test: Dataset | None = None) -> TrainResult:
    """Train a quantized model and return it with a per-epoch metrics log."""
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if isinstance(model_spec, ModelSpec):
        model_spec = model_spec.to_dict()
    rng = np.random.default_rng(config.seed)
    model = build_model(model_spec, rng, config)
    opt = make_optimizer(config.optimizer, config.lr, config.weight_decay)
    params = list(model.parameters())
    history = []
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(data))
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, c, n = model.loss(data.x[idx], data.y[idx])
                T.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at epoch {epoch} step {step} ({exc}); "
                                       "retry with --tanh-clip and/or --weight-decay") from exc
            _finite_or_abort(float(loss.data), epoch, step)
            opt.step(params, lr)
            if hasattr(model, "clip_weights"):
                model.clip_weights()
            total_loss += float(loss.data) * len(idx)
            correct += c
            seen += n
            step += 1
        record = {"epoch": epoch, "loss": total_loss / len(data), "accuracy": correct / seen,
                  "effective_bitwidth": layer_effective_bitwidths(model)}
        if test is not None and len(test):
            record["test_accuracy"] = evaluate_model(model, test)["accuracy"]
        log.info("epoch %d loss %.4f acc %.4f", epoch, record["loss"], record["accuracy"])
        history.append(record)
    return TrainResult(model, config, history, rng.bit_generator.state)


def perplexity(nll) -> float:
    """exp of the mean negative log-likelihood (natural log)."""
    nll = np.asarray(nll, dtype=np.float64)
    if nll.size == 0:
        raise ValueError("perplexity of an empty set is undefined")
    return float(np.exp(nll.mean()))


def _nll_softmax(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y]


def evaluate_model(model, data: Dataset, path: str = "float-reference") -> dict:
    if len(data) == 0:
        raise ValueError("evaluation dataset is empty")
    if isinstance(model, QuantRNN):
        if path != "float-reference":
            raise ValueError(f"layer 'W_{'z' if model.cell == 'gru' else 'f'}' of the {model.cell} "
                             "cell has no fixed-point path (gates are not quantized)")
        logits = model.predict_float(data.x)
        y = data.y
        nll = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        pred = (logits > 0).astype(int)
        acc = float((pred == y).mean())
        return {"accuracy": acc, "bit_error": 1.0 - acc, "loss": float(nll.mean()),
                "perplexity": perplexity(nll.ravel()), "predictions": pred}
    if path == "float-reference":
        logits = model.predict_float(data.x)
        pred = logits.argmax(axis=1)
        nll = _nll_softmax(logits, data.y)
        return {"accuracy": float((pred == data.y).mean()), "loss": float(nll.mean()),
                "perplexity": perplexity(nll), "predictions": pred}
    if path == "fixed-point":
        fixed = model.export_fixed()
        pred = fixed.predict(model.input_codes(data.x))
        return {"accuracy": float((pred == data.y).mean()), "predictions": pred}
    raise ValueError(f"unknown evaluation path {path!r}")


def evaluate(checkpoint: Container, data: Dataset, path: str = "float-reference") -> dict:
    return evaluate_model(model_from_checkpoint(checkpoint), data, path)


# checkpoints

def checkpoint_from_result(result: TrainResult) -> Container:
    return checkpoint_from_model(result.model, result.config, result.rng_state, result.history)


def checkpoint_from_model(model, config: TrainConfig | None = None, rng_state: dict | None = None,
                          history: list | None = None) -> Container:
    frozen = model.quantized_weights()
    weight_params = [p for p in model.parameters() if hasattr(p, "frozen")]
    manifest = {
        "kind": "checkpoint",
        "model": model_spec_dict(model),
        "train_config": asdict(config) if config is not None else None,
        "rng_state": rng_state,
        "history": history or [],
        "scales": [q.scale for q in frozen],
        "bits": [q.bits for q in frozen],
    }
    tensors = {}
    for p in model.parameters():
        tensors[p.name] = p.value
    for p, q in zip(weight_params, frozen):
        tensors[f"{p.name}.codes"] = q.codes
    return Container(manifest, tensors)


def model_from_checkpoint(ckpt: Container):
    if ckpt.manifest.get("kind") != "checkpoint":
        raise CheckpointError("file is not a training checkpoint")
    cfg = ckpt.manifest.get("train_config")
    config = TrainConfig(**cfg) if cfg else None
    model = build_model(ckpt.manifest["model"], np.random.default_rng(0), config)
    for p in model.parameters():
        if p.name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {p.name!r}")
        p.value = ckpt.tensors[p.name].astype(np.float64)
    return model


def export_fixed_container(model: QuantMLP) -> Container:
    """Self-contained integer inference file: weight codes plus comparison tables."""
    if not isinstance(model, QuantMLP):
        raise ValueError("fixed-point export supports MLP models only")
    frozen = model.quantized_weights()
    fixed = model.export_fixed(frozen)
    layers, tensors = [], {}
    for i, (layer, q) in enumerate(zip(fixed.layers, frozen)):
        tensors[f"layer{i}.codes"] = layer.codes
        t = layer.table
        if isinstance(t, ThresholdTable):
            tensors[f"layer{i}.thresholds"] = t.thresholds
            layers.append({"type": "threshold", "K": t.K, "direction": t.direction,
                           "weight_bits": t.weight_bits, "input_bits": t.input_bits,
                           "act_bits": t.act_bits, "activation": t.activation,
                           "alpha": t.alpha, "bias": [float(b) for b in t.bias], "scale": q.scale})
        else:
            tensors[f"layer{i}.margins"] = t.margins
            layers.append({"type": "argmax", "weight_bits": t.weight_bits, "input_bits": t.input_bits,
                           "alpha": t.alpha, "bias": [float(b) for b in t.bias], "scale": q.scale})
    manifest = {"kind": "fixed-inference", "input_bits": fixed.input_bits, "layers": layers}
    return Container(manifest, tensors)


def fixed_model_from_container(c: Container) -> FixedModel:
    if c.manifest.get("kind") != "fixed-inference":
        raise CheckpointError("file is not a fixed-point inference file")
    fm = FixedModel(c.manifest["input_bits"])
    for i, meta in enumerate(c.manifest["layers"]):
        codes = c.tensors[f"layer{i}.codes"]
        if meta["type"] == "threshold":
            table = ThresholdTable(meta["K"], c.tensors[f"layer{i}.thresholds"], meta["alpha"],
                                   np.asarray(meta["bias"]), meta["direction"], meta["weight_bits"],
                                   meta["input_bits"], meta["act_bits"], meta["activation"])
        else:
            table = ArgmaxTable(c.tensors[f"layer{i}.margins"], meta["alpha"], np.asarray(meta["bias"]),
                                meta["weight_bits"], meta["input_bits"])
        fm.layers.append(FixedLayer(codes, table))
    return fm
