"""Acceptance criteria 1-10.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line (shown even when pytest
captures output) before asserting. Run alone with::

    pytest tests/test_acceptance.py -v
"""

import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from balquant import tensor as T
from balquant.balanced import (EXACT, RECURSIVE_MEAN, RECURSIVE_MEDIAN, PartitionTrace,
                               balanced_quantize, equalize_backward, equalize_exact, equalize_op,
                               percentile_thresholds, recursive_equalize, verify_balance_bound)
from balquant.bitops import COL, ROW, gemm_multibit, pack
from balquant.checkpoint import Container
from balquant.data import blobs, copy_task
from balquant.fixed import CLIP, SIGMOID, eval_layer_fixed, eval_layer_float, layer_alpha, precompute_thresholds
from balquant.metrics import effective_bitwidth, layer_mean_effective_bitwidth
from balquant.model import BALANCED_EXACT, IMBALANCED, QUANTIZER_MODES, ModelSpec, QuantMLP, quantize_weights
from balquant.quant import q_k_ste, quant_k_ste, round_to_zero_ste
from balquant.rnn import gru_step, in_grid, lstm_step
from balquant.tensor import Tensor, backward
from balquant.train import TrainConfig, checkpoint_from_result, evaluate_model, train

from conftest import numeric_grad


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")


# 1

def loop_gemm(a, b):
    """Accumulate one rank-1 update per inner index; int64 throughout."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.int64)
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[None, t, :]
    return out


def triple_loop(a, b):
    return np.array([[sum(int(a[i, t]) * int(b[t, j]) for t in range(a.shape[1]))
                      for j in range(b.shape[1])] for i in range(a.shape[0])], dtype=np.int64)


def test_c1_bit_kernel_exactness(capsys):
    rng = np.random.default_rng(101)
    mismatches = 0
    for trial in range(10_000):
        r, inner, c = rng.integers(1, 65, size=3)
        m_bits, k_bits = rng.integers(1, 5, size=2)
        a = rng.integers(0, 1 << m_bits, size=(r, inner), dtype=np.int64)
        b = rng.integers(0, 1 << k_bits, size=(inner, c), dtype=np.int64)
        got = gemm_multibit(pack(a, m_bits, ROW), pack(b, k_bits, COL))
        oracle = triple_loop(a, b) if trial < 100 else loop_gemm(a, b)
        mismatches += not np.array_equal(got, oracle)
    ok = mismatches == 0
    report(capsys, 1, ok, f"gemm_multibit vs integer loop oracle, 10000 calls, {mismatches} mismatches")
    assert ok


# 2

def test_c2_fixed_point_equivalence(capsys):
    mismatched = checked = 0
    settings = [(SIGMOID, s, b) for s in (0.3, 1.0, 2.5) for b in (-0.7, 0.0, 0.4)]
    settings += [(CLIP, s, b) for s in (0.5, 1.0, 1.5) for b in (0.0, 0.25, 0.5)]
    for d in range(1, 5):
        xs = np.array(list(itertools.product(range(4), repeat=d)))
        ws = np.array(list(itertools.product(range(2), repeat=d))).T  # every weight column at once
        for act, scale, bias in settings:
            table = precompute_thresholds(layer_alpha(scale, 1, 2), bias, act, 2, weight_bits=1, input_bits=2)
            fixed = eval_layer_fixed(ws, xs, table)
            ref = eval_layer_float(ws, xs, scale, bias, 1, 2, 2, act)
            mismatched += int(np.sum(fixed != ref))
            checked += fixed.size
    rng = np.random.default_rng(202)
    for _ in range(1000):
        d, n_out, batch = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 9)
        w = rng.integers(0, 16, size=(d, n_out))
        x = rng.integers(0, 16, size=(batch, d))
        scale, bias = rng.uniform(0.01, 4.0), rng.normal(0, 2, size=n_out)
        table = precompute_thresholds(layer_alpha(scale, 4, 4), bias, SIGMOID, 4, weight_bits=4, input_bits=4)
        fixed = eval_layer_fixed(w, x, table)
        mismatched += int(np.sum(fixed != eval_layer_float(w, x, scale, bias, 4, 4, 4)))
        checked += fixed.size
    ok = mismatched == 0
    report(capsys, 2, ok, f"fixed vs float codes, exhaustive 1x2-bit + 1000 random 4-bit layers, "
                          f"{mismatched}/{checked} mismatched outputs")
    assert ok


# 3

def test_c3_exact_balance(capsys):
    rng = np.random.default_rng(303)
    w = rng.standard_normal(10_000)
    assert np.unique(w).size == w.size
    details, ok = [], True
    for k in (1, 2, 3, 4):
        q = balanced_quantize(w, k, EXACT)
        counts = np.bincount(q.codes, minlength=1 << k)
        eb = effective_bitwidth(q)
        spread = int(counts.max() - counts.min())
        ok &= spread <= 1 and eb >= k - 0.001
        details.append(f"k={k} spread={spread} EB={eb:.5f}")
    report(capsys, 3, ok, "; ".join(details))
    assert ok


# 4 and 5 share the randomized trials

def _sample(rng, kind, n):
    if kind == "gaussian":
        return rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), n)
    if kind == "exponential":
        return rng.exponential(rng.uniform(0.1, 3), n)
    heavy = rng.standard_t(2, n) * rng.uniform(0.5, 2)
    outliers = rng.random(n) < 0.1
    return np.where(outliers, rng.normal(0, 20, n), heavy)


def _independent_check(w, k, mode):
    """Recompute gamma, the count ratio and leaf distinctness from the partition trace."""
    trace = PartitionTrace()
    recursive_equalize(w, k, mode, trace=trace)
    sizes = [(s.n_left, s.n_right) for s in trace.splits]
    gamma = max((max(a, b) / min(a, b) if min(a, b) else np.inf) for a, b in sizes)
    codes = balanced_quantize(w, k, mode).codes
    counts = np.bincount(codes, minlength=1 << k)
    pop = counts[counts > 0]
    ratio = pop.max() / pop.min()
    leaf_codes = [set(codes[leaf.members].tolist()) for leaf in trace.leaves if leaf.members.size]
    distinct = all(len(c) == 1 for c in leaf_codes) and len(set().union(*leaf_codes)) == len(leaf_codes)
    gaps_ok = all(abs(s.mean - s.median) <= s.std * (1 + 1e-12) + 1e-15 for s in trace.splits)
    return gamma, ratio, distinct, gaps_ok


@pytest.fixture(scope="module")
def partition_trials():
    rng = np.random.default_rng(404)
    kinds = ("gaussian", "exponential", "heavy")
    trials = []
    for i in range(1000):
        kind = kinds[i % 3]
        w = _sample(rng, kind, int(rng.integers(1000, 5001)))
        row = {"kind": kind}
        for mode in (RECURSIVE_MEAN, RECURSIVE_MEDIAN):
            for k in (1, 2, 3):
                gamma, ratio, distinct, gaps_ok = _independent_check(w, k, mode)
                rep = verify_balance_bound(w, k, mode)
                row[mode, k] = {"gamma": gamma, "ratio": ratio, "holds": ratio <= gamma ** (2 * k),
                                "distinct": distinct, "gaps_ok": gaps_ok, "eb": rep.effective_bits,
                                "agrees": rep.holds == (ratio <= gamma ** (2 * k))
                                and rep.leaves_distinct == distinct and rep.mean_median_ok == gaps_ok}
        trials.append(row)
    return trials


def test_c4_balance_bound(capsys, partition_trials):
    cells = [row[key] for row in partition_trials for key in row if key != "kind"]
    bound_violations = sum(not c["holds"] for c in cells)
    leaf_violations = sum(not c["distinct"] for c in cells)
    disagreements = sum(not c["agrees"] for c in cells)
    worst = max(c["ratio"] / c["gamma"] ** (2 * k) for row in partition_trials
                for (key, c) in row.items() if key != "kind" for k in [key[1]])
    ok = bound_violations == 0 and leaf_violations == 0 and disagreements == 0
    report(capsys, 4, ok, f"1000 trials x 2 modes x k=1..3: bound violations {bound_violations}, "
                          f"leaf violations {leaf_violations}, report disagreements {disagreements}, "
                          f"max ratio/bound {worst:.3f}")
    assert ok


def test_c5_mean_median(capsys, partition_trials):
    gap_failures = sum(not row[key]["gaps_ok"] for row in partition_trials for key in row if key != "kind")
    gaussian = [row for row in partition_trials if row["kind"] == "gaussian"]
    worst = {k: max(abs(r[RECURSIVE_MEAN, k]["eb"] - r[RECURSIVE_MEDIAN, k]["eb"]) for r in gaussian)
             for k in (1, 2, 3)}
    eb_failures = sum(abs(r[RECURSIVE_MEAN, k]["eb"] - r[RECURSIVE_MEDIAN, k]["eb"]) > 0.05
                      for r in gaussian for k in (1, 2, 3))
    ok = gap_failures == 0 and eb_failures == 0
    report(capsys, 5, ok, f"|mean-median|>std splits: {gap_failures}; Gaussian EB gap >0.05: {eb_failures} "
                          f"(worst per k: " + ", ".join(f"{k}:{v:.4f}" for k, v in worst.items()) + ")")
    assert ok


# 6

def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def _op_cases(rng):
    """name -> (input shape, function of one tensor) with fresh constants."""
    m34, m42 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    labels = rng.integers(0, 3, size=4)
    targets = rng.integers(0, 2, size=(2, 3)).astype(float)
    return {
        "matmul": ((3, 4), lambda t: T.matmul(t, Tensor(m42))),
        "add": ((3, 4), lambda t: T.add(t, Tensor(m34))),
        "add_row": ((4,), lambda t: T.add(Tensor(m34), t)),
        "sub": ((3, 4), lambda t: T.sub(Tensor(m34), t)),
        "hadamard": ((3, 4), lambda t: T.hadamard(t, t)),
        "affine": ((3, 4), lambda t: T.affine(t, -1.7, 0.3)),
        "sigmoid": ((3, 4), T.sigmoid),
        "tanh": ((3, 4), T.tanh),
        "concat": ((3, 4), lambda t: T.concat([t, Tensor(m34)], axis=1)),
        "sum": ((3, 4), T.tensor_sum),
        "mean": ((3, 4), T.mean),
        "softmax_xent": ((4, 3), lambda t: T.softmax_cross_entropy(t, labels)),
        "sigmoid_xent": ((2, 3), lambda t: T.sigmoid_cross_entropy(t, targets)),
    }


def test_c6_gradients(capsys):
    rng = np.random.default_rng(606)
    # equalize_backward at 1000 generic points
    w = rng.standard_normal(5000)
    spec = percentile_thresholds(w, 3)
    pts = []
    while len(pts) < 1000:
        x = rng.uniform(w.min(), w.max())
        if np.min(np.abs(spec.thresholds - x)) >= 1e-3:
            pts.append(x)
    pts = np.array(pts)
    eps = 1e-6
    numeric = (equalize_exact(pts + eps, spec) - equalize_exact(pts - eps, spec)) / (2 * eps)
    eq_err = _rel_err(equalize_backward(np.ones_like(pts), spec, pts), numeric)

    # autodiff ops: 1000 generic points spread over every op, random linear head
    op_err = 0.0
    names = set()
    for trial in range(1000):
        cases = _op_cases(rng)
        name = sorted(cases)[trial % len(cases)]
        shape, fn = cases[name]
        x0 = rng.standard_normal(shape)
        probe = rng.standard_normal(fn(Tensor(x0)).shape)

        def head(t):
            return T.tensor_sum(T.hadamard(fn(t), Tensor(probe)))

        leaf = Tensor(x0, requires_grad=True)
        backward(head(leaf))
        num = numeric_grad(lambda v: float(head(Tensor(v)).data), x0)
        op_err = max(op_err, _rel_err(leaf.grad, num))
        names.add(name)

    # equalization node inside the graph
    leaf = Tensor(w[:200].copy(), requires_grad=True)
    backward(T.tensor_sum(equalize_op(leaf, 3)))
    node_spec = percentile_thresholds(w[:200], 3)
    node_ok = np.array_equal(leaf.grad, node_spec.slopes[node_spec.interval_index(w[:200])])

    # STE nodes hand back the upstream gradient bit for bit
    ste_ok = True
    for fn in (round_to_zero_ste, lambda t: q_k_ste(t, 3), lambda t: quant_k_ste(t, 2)):
        x = Tensor(rng.uniform(0, 1, (5, 7)), requires_grad=True)
        g = rng.standard_normal((5, 7))
        backward(T.tensor_sum(T.hadamard(fn(x), Tensor(g))))
        ste_ok &= np.array_equal(x.grad, g)
    model = QuantMLP(ModelSpec.mlp([3, 8, 4]), rng)
    loss, _, _ = model.loss(rng.uniform(size=(6, 3)), rng.integers(0, 4, 6))
    backward(loss)
    ste_ok &= all(np.array_equal(p.leaf.grad, q.grad) for p, q in zip(model.weights, model.quantized_nodes))

    ok = eq_err <= 1e-4 and op_err <= 1e-4 and node_ok and ste_ok
    report(capsys, 6, ok, f"equalize_backward max rel err {eq_err:.2e}; {len(names)} autodiff ops x 1000 "
                          f"points max rel err {op_err:.2e}; STE exact: {ste_ok and node_ok}")
    assert ok


# 7 and 8 share one grid of training runs on the same toy task

TASK_BITS = (1, 2, 4, 8)
TASK_MODES = (IMBALANCED, BALANCED_EXACT)
TASK_SEEDS = range(5)


@pytest.fixture(scope="module")
def trend_runs():
    data = blobs(2000, n_classes=8, spread=0.35, seed=11)
    tr, te = data.split(0.3, seed=0)
    runs = {}
    for bits in TASK_BITS:
        for mode in TASK_MODES:
            spec = ModelSpec.mlp([2, 128, 8], weight_bits=bits, act_bits=bits, mode=mode)
            for seed in TASK_SEEDS:
                cfg = TrainConfig(epochs=30, lr=0.02, lr_decay=0.93, optimizer="adam", seed=seed)
                result = train(cfg, spec, tr)
                runs[bits, mode, seed] = (layer_mean_effective_bitwidth(result.model),
                                          evaluate_model(result.model, te)["accuracy"])
    return runs


def test_c7_balanced_vs_imbalanced(capsys, trend_runs):
    def means(mode):
        v = np.array([trend_runs[2, mode, s] for s in TASK_SEEDS])
        return v.mean(axis=0)

    (eb_b, acc_b), (eb_i, acc_i) = means(BALANCED_EXACT), means(IMBALANCED)
    ok = eb_b >= eb_i and acc_b >= acc_i - 0.005
    report(capsys, 7, ok, f"2-bit, 5 seeds: balanced EB {eb_b:.4f} acc {acc_b:.4f}; "
                          f"imbalanced EB {eb_i:.4f} acc {acc_i:.4f}")
    assert ok


def test_c8_bitwidth_accuracy_trend(capsys, trend_runs):
    v = np.array(list(trend_runs.values()))
    rho = spearmanr(v[:, 0], v[:, 1]).statistic
    per_bits = ", ".join(f"{b}-bit acc {np.mean([trend_runs[b, m, s][1] for m in TASK_MODES for s in TASK_SEEDS]):.3f}"
                         for b in TASK_BITS)
    ok = rho >= 0
    report(capsys, 8, ok, f"Spearman(EB, test acc) over {len(v)} runs = {rho:.3f} ({per_bits})")
    assert ok


# 9

def test_c9_rnn_grid(capsys):
    rng = np.random.default_rng(909)
    violations = 0
    for trial in range(1000):
        k, wb, xb = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
        batch, hidden, n_in = rng.integers(1, 6), rng.integers(1, 9), rng.integers(1, 5)
        lk = (1 << k) - 1
        h = Tensor(rng.integers(0, lk + 1, size=(batch, hidden)) / lk)
        x = Tensor(rng.integers(0, (1 << xb), size=(batch, n_in)) / ((1 << xb) - 1))

        def weight():
            w = np.clip(rng.normal(0, rng.uniform(0.05, 1.0), size=(hidden + n_in, hidden)), -1, 1)
            mode = QUANTIZER_MODES[trial % 4] if w.size >= (1 << wb) else IMBALANCED
            return Tensor(quantize_weights(w, wb, mode).dequantize())

        def bias():
            return Tensor(rng.normal(0, 2, size=hidden))

        if trial % 2 == 0:
            trace = {}
            out = gru_step(h, x, weight(), weight(), weight(), k, wb, [bias(), bias(), bias()], xb, trace)
            pre = trace["pre"]
            violations += not in_grid(out.data, k)
            violations += bool(pre.min() < 0.0 or pre.max() > 1.0)
        else:
            C = Tensor(rng.normal(0, 3, size=(batch, hidden)))
            out, _ = lstm_step(h, C, x, weight(), weight(), weight(), weight(),
                               [bias(), bias(), bias(), bias()], k, wb, xb)
            violations += not in_grid(out.data, k)
    ok = violations == 0
    report(capsys, 9, ok, f"1000 random GRU/LSTM steps, {violations} grid or range violations")
    assert ok


# 10

def test_c10_determinism(capsys, tmp_path):
    data = blobs(600, seed=7)
    spec = ModelSpec.mlp([2, 16, 4], weight_bits=2, act_bits=2)
    cfg = TrainConfig(epochs=4, lr=0.05, optimizer="adam", seed=21)
    a = checkpoint_from_result(train(cfg, spec, data)).to_bytes()
    b = checkpoint_from_result(train(cfg, spec, data)).to_bytes()
    rnn_cfg = TrainConfig(epochs=2, lr=0.05, seed=3)
    rnn_spec = {"kind": "lstm", "n_in": 1, "hidden": 4}
    seq = copy_task(64, steps=4)
    c = checkpoint_from_result(train(rnn_cfg, rnn_spec, seq)).to_bytes()
    d = checkpoint_from_result(train(rnn_cfg, rnn_spec, seq)).to_bytes()
    path = tmp_path / "m.ckpt"
    path.write_bytes(a)
    resaved = Container.load(path).to_bytes()
    ok = a == b and c == d and resaved == a
    report(capsys, 10, ok, f"repeat runs identical: mlp {a == b}, lstm {c == d}; save-load-save identical: {resaved == a}")
    assert ok
