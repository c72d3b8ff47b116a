"""Command-line interface: train, eval, quantize, inspect, bench, export-fixed.

Failures print a single ``error: <message>`` line on stderr. Exit status is 2
for usage errors and 1 for everything else. ``BALQUANT_LOG_LEVEL`` sets the
log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bitops import bench
from .checkpoint import Container
from .data import make_dataset, read_idx
from .metrics import (CodeHistogram, effective_bitwidth, histogram_rows, quantized_histogram_rows,
                      write_histogram_csv)
from .model import QUANTIZER_MODES, ModelSpec, quantize_weights
from .quant import QuantizedTensor
from .train import (TrainConfig, checkpoint_from_result, evaluate, export_fixed_container,
                    model_from_checkpoint, train)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_tensor(path: str) -> np.ndarray:
    p = Path(path)
    raw = p.read_bytes()[:4]
    if raw[:2] == b"\x00\x00":
        return read_idx(p).astype(np.float64)
    if p.suffix == ".npy" or raw[:1] == b"\x93":
        return np.load(p).astype(np.float64)
    return np.loadtxt(p, delimiter=",", ndmin=1)


def _read_config(path: str) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict) or "dataset" not in cfg:
        raise ValueError(f"{path}: config must be a JSON object with a 'dataset' entry")
    return cfg


def _model_spec(cfg: dict) -> dict:
    m = dict(cfg.get("model", {}))
    if m.get("kind", "mlp") != "mlp" or "layers" in m:
        return m
    sizes = m.pop("sizes", None)
    if sizes is None:
        raise ValueError("model config needs 'layers' or 'sizes'")
    return ModelSpec.mlp(sizes, **{k: v for k, v in m.items() if k != "kind"}).to_dict()


def _datasets(cfg: dict):
    data = make_dataset(cfg["dataset"])
    frac = cfg.get("test_fraction", 0.25)
    return data.split(frac, seed=cfg["dataset"].get("seed", 0)) if frac else (data, None)


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    tcfg = dict(cfg.get("train", {}))
    for key in ("seed", "epochs", "weight_decay", "grad_bits"):
        if getattr(args, key) is not None:
            tcfg[key] = getattr(args, key)
    if args.tanh_clip:
        tcfg["tanh_clip"] = True
    config = TrainConfig(**tcfg)
    tr, te = _datasets(cfg)
    result = train(config, _model_spec(cfg), tr, te)
    checkpoint_from_result(result).save(args.out)
    if args.metrics:
        with open(args.metrics, "w") as fh:
            json.dump(result.history, fh, indent=1)
    last = result.history[-1] if result.history else {}
    print(json.dumps({k: v for k, v in last.items() if k != "predictions"}))
    return 0


def cmd_eval(args) -> int:
    ckpt = Container.load(args.checkpoint)
    cfg = _read_config(args.config)
    _, te = _datasets(cfg)
    data = te if te is not None and len(te) else make_dataset(cfg["dataset"])
    metrics = evaluate(ckpt, data, args.path)
    metrics.pop("predictions", None)
    print(json.dumps(metrics))
    return 0


def cmd_quantize(args) -> int:
    w = _load_tensor(args.input)
    qt = quantize_weights(w, args.bits, args.mode)
    Container({"kind": "quantized-tensor", "mode": args.mode, "bits": qt.bits, "scale": qt.scale,
               "convention": qt.convention}, {"codes": qt.codes}).save(args.output)
    if args.histogram:
        with open(args.histogram, "w") as fh:
            write_histogram_csv(histogram_rows(w, bins=args.bins), fh)
    print(json.dumps({"bits": qt.bits, "scale": qt.scale, "effective_bitwidth": effective_bitwidth(qt)}))
    return 0


def _quantized_layers(c: Container) -> list[tuple[str, QuantizedTensor]]:
    kind = c.manifest.get("kind")
    if kind == "quantized-tensor":
        m = c.manifest
        return [("tensor", QuantizedTensor(c.tensors["codes"], m["bits"], m["scale"], m["convention"]))]
    if kind == "checkpoint":
        model = model_from_checkpoint(c)
        names = [p.name for p in model.parameters() if hasattr(p, "frozen")]
        return list(zip(names, model.quantized_weights()))
    if kind == "fixed-inference":
        return [(f"layer{i}", QuantizedTensor(c.tensors[f"layer{i}.codes"], m["weight_bits"], m["scale"]))
                for i, m in enumerate(c.manifest["layers"])]
    raise ValueError(f"cannot inspect a file of kind {kind!r}")


def cmd_inspect(args) -> int:
    layers = _quantized_layers(Container.load(args.file))
    ebs = []
    for name, qt in layers:
        eb = effective_bitwidth(qt)
        ebs.append(eb)
        hist = CodeHistogram.of(qt)
        print(f"{name}\tbits={qt.bits}\teffective_bitwidth={eb:.3f}\tcounts={list(map(int, hist.counts))}")
    print(f"mean_effective_bitwidth={np.mean(ebs):.3f}")
    if args.csv:
        with open(args.csv, "w") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["layer", "bin_left", "bin_right", "count"])
            for name, qt in layers:
                for row in quantized_histogram_rows(qt):
                    writer.writerow([name, repr(row[0]), repr(row[1]), row[2]])
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    pairs = []
    for item in args.bits.split(","):
        m, _, k = item.partition("x")
        pairs.append((int(m), int(k or m)))
    rows = bench(sizes, pairs, args.repeats)
    writer = csv.DictWriter(sys.stdout, ["size", "M", "K", "kernel_ns", "naive_ns"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return 0


def cmd_export_fixed(args) -> int:
    model = model_from_checkpoint(Container.load(args.checkpoint))
    export_fixed_container(model).save(args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="balquant", description="Balanced low-bitwidth quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a quantized model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="write the per-epoch log as JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--weight-decay", type=float, dest="weight_decay")
    t.add_argument("--grad-bits", type=int, dest="grad_bits", help="quantize gradients to G bits")
    t.add_argument("--tanh-clip", action="store_true", help="pass weights through tanh before quantizing")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="config whose dataset to evaluate on")
    e.add_argument("--path", choices=["float-reference", "fixed-point"], default="float-reference")
    e.set_defaults(fn=cmd_eval)

    q = sub.add_parser("quantize", help="quantize a tensor file (.npy, IDX or CSV)")
    q.add_argument("input")
    q.add_argument("output")
    q.add_argument("--bits", type=int, required=True)
    q.add_argument("--mode", choices=QUANTIZER_MODES, default="balanced-exact")
    q.add_argument("--histogram", help="write the input value histogram as CSV")
    q.add_argument("--bins", type=int, default=64)
    q.set_defaults(fn=cmd_quantize)

    i = sub.add_parser("inspect", help="report effective bitwidths of a quantized file")
    i.add_argument("file")
    i.add_argument("--csv", help="write per-layer code histograms as CSV")
    i.set_defaults(fn=cmd_inspect)

    b = sub.add_parser("bench", help="time bit-plane GEMM against int64 GEMM (CSV on stdout)")
    b.add_argument("--sizes", default="256,1024,4096")
    b.add_argument("--bits", default="1x1,2x2,4x4", help="comma list of MxK pairs")
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(fn=cmd_bench)

    x = sub.add_parser("export-fixed", help="write an integer-only inference file")
    x.add_argument("checkpoint")
    x.add_argument("output")
    x.set_defaults(fn=cmd_export_fixed)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BALQUANT_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
