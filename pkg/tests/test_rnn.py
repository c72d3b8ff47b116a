import numpy as np
import pytest

from balquant import tensor as T
from balquant.data import copy_task
from balquant.model import IMBALANCED, quantize_weights
from balquant.quant import q_k
from balquant.rnn import QuantRNN, gru_step, in_grid, lstm_step
from balquant.tensor import Tensor, backward
from balquant.train import TrainConfig, evaluate_model, train

from conftest import assert_grad_close, numeric_grad

K = 2


def grid_weight(rng, shape, bits=K):
    return quantize_weights(np.clip(rng.normal(0, 0.5, size=shape), -1, 1), bits, IMBALANCED).dequantize()


def grid_state(rng, shape, bits=K):
    return rng.integers(0, 1 << bits, size=shape) / ((1 << bits) - 1)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestGRU:
    def test_gate_closed_keeps_state(self, rng):
        h = grid_state(rng, (4, 3))
        x = grid_state(rng, (4, 2), 1)
        ws = [Tensor(grid_weight(rng, (5, 3))) for _ in range(3)]
        biases = [Tensor(np.full(3, -60.0)), Tensor(np.zeros(3)), Tensor(np.zeros(3))]
        out = gru_step(Tensor(h), Tensor(x), *ws, K, biases=biases)
        np.testing.assert_array_equal(out.data, h)

    def test_zero_weights(self, rng):
        h = grid_state(rng, (6, 4))
        x = grid_state(rng, (6, 2), 1)
        zeros = [Tensor(np.zeros((6, 4))) for _ in range(3)]
        out = gru_step(Tensor(h), Tensor(x), *zeros, K)
        np.testing.assert_array_equal(out.data, q_k(0.5 * h + 0.25, K))

    def test_grid_and_convexity_over_steps(self, rng):
        h = Tensor(np.zeros((8, 5)))
        ws = [Tensor(grid_weight(rng, (7, 5))) for _ in range(3)]
        for _ in range(20):
            trace = {}
            h = gru_step(h, Tensor(grid_state(rng, (8, 2), 1)), *ws, K, trace=trace)
            assert in_grid(h.data, K)
            assert trace["pre"].min() >= 0.0 and trace["pre"].max() <= 1.0

    def test_ste_gradient(self, rng):
        h = grid_state(rng, (3, 4))
        x = grid_state(rng, (3, 2), 1)
        wz, wr, w = (grid_weight(rng, (6, 4)) for _ in range(3))
        g = rng.standard_normal((3, 4))

        # numpy oracle with each Q_k replaced by u + (Q_k(u0) - u0), frozen at the base point
        def parts(wz, wr, w):
            hx = np.hstack([h, x])
            z, r = sig(hx @ wz), sig(hx @ wr)
            return z, r, r * h

        _, _, rh0 = parts(wz, wr, w)
        off1 = q_k(rh0, K) - rh0

        def mix(wz, wr, w):
            z, r, rh = parts(wz, wr, w)
            cand = sig(np.hstack([rh + off1, x]) @ w)
            return (1 - z) * h + z * cand

        m0 = mix(wz, wr, w)
        off2 = q_k(m0, K) - m0

        def loss(wz, wr, w):
            return float(np.sum(g * (mix(wz, wr, w) + off2)))

        params = [Tensor(v, requires_grad=True) for v in (wz, wr, w)]
        out = gru_step(Tensor(h), Tensor(x), *params, K)
        np.testing.assert_allclose(out.data, m0 + off2, atol=1e-12)
        backward(T.tensor_sum(T.hadamard(out, Tensor(g))))
        vals = [wz, wr, w]
        for i, p in enumerate(params):
            def f(v, i=i):
                args = list(vals)
                args[i] = v
                return loss(*args)
            assert_grad_close(p.grad, numeric_grad(f, vals[i]))

    def test_contract_errors(self, rng):
        h = Tensor(grid_state(rng, (2, 3)))
        x = Tensor(grid_state(rng, (2, 1), 1))
        good = Tensor(grid_weight(rng, (4, 3)))
        with pytest.raises(ValueError, match="quantized"):
            gru_step(h, x, Tensor(rng.uniform(-0.9, 0.9, (4, 3))), good, good, K)
        with pytest.raises(ValueError):
            gru_step(h, x, Tensor(2.0 * good.data + 0.01), good, good, K)
        with pytest.raises(ValueError):
            gru_step(Tensor(h.data * 0.9 + 0.01), x, good, good, good, K)
        with pytest.raises(ValueError):
            gru_step(h, Tensor(x.data + 2.0), good, good, good, K)


class TestLSTM:
    def test_memory_passthrough(self, rng):
        h = grid_state(rng, (3, 4))
        C = rng.standard_normal((3, 4))
        x = grid_state(rng, (3, 1), 1)
        ws = [Tensor(grid_weight(rng, (5, 4))) for _ in range(4)]
        biases = [Tensor(np.full(4, 60.0)), Tensor(np.full(4, -60.0)), Tensor(np.zeros(4)), Tensor(np.zeros(4))]
        _, C1 = lstm_step(Tensor(h), Tensor(C), Tensor(x), *ws, biases, K)
        np.testing.assert_allclose(C1.data, C, atol=1e-12)

    def test_zero_weights(self, rng):
        h = grid_state(rng, (3, 4))
        C = rng.standard_normal((3, 4))
        x = grid_state(rng, (3, 1), 1)
        zeros = [Tensor(np.zeros((5, 4))) for _ in range(4)]
        biases = [Tensor(np.zeros(4)) for _ in range(4)]
        h1, C1 = lstm_step(Tensor(h), Tensor(C), Tensor(x), *zeros, biases, K)
        np.testing.assert_allclose(C1.data, 0.5 * C, atol=1e-15)
        np.testing.assert_array_equal(h1.data, q_k(0.5 * sig(0.5 * C), K))

    def test_grid_over_steps(self, rng):
        h, C = Tensor(np.zeros((8, 5))), Tensor(np.zeros((8, 5)))
        ws = [Tensor(grid_weight(rng, (7, 5))) for _ in range(4)]
        biases = [Tensor(rng.standard_normal(5)) for _ in range(4)]
        for _ in range(20):
            h, C = lstm_step(h, C, Tensor(grid_state(rng, (8, 2), 1)), *ws, biases, K)
            assert in_grid(h.data, K)

    def test_unquantized_weight(self, rng):
        h, C = Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))
        good = Tensor(grid_weight(rng, (3, 2)))
        bad = Tensor(rng.uniform(-0.9, 0.9, (3, 2)))
        biases = [Tensor(np.zeros(2)) for _ in range(4)]
        with pytest.raises(ValueError):
            lstm_step(h, C, Tensor(np.ones((1, 1))), good, good, bad, good, biases, K)


class TestSequenceModel:
    @pytest.mark.parametrize("cell", ["gru", "lstm"])
    def test_copy_task(self, cell):
        # pilot (seeds 0-2, 40 epochs, hidden 16, Adam lr 0.02): held-out bit error 0.000-0.039
        data = copy_task(512, steps=8, delay=1, seed=0)
        held_out = copy_task(256, steps=8, delay=1, seed=100)
        spec = {"kind": cell, "n_in": 1, "hidden": 16, "bits": 2, "weight_bits": 2}
        result = train(TrainConfig(epochs=20, lr=0.02, optimizer="adam", seed=0), spec, data)
        metrics = evaluate_model(result.model, held_out)
        assert metrics["bit_error"] < 0.1
        assert metrics["perplexity"] == pytest.approx(np.exp(metrics["loss"]))

    def test_weights_stay_in_unit_box(self, rng):
        model = QuantRNN("gru", 1, 4, rng=rng)
        for p in model.weights:
            p.value = p.value * 10
        model.clip_weights()
        assert all(np.abs(p.value).max() <= 1.0 for p in model.weights)

    def test_fixed_path_rejected(self):
        model = QuantRNN("lstm", 1, 4)
        with pytest.raises(ValueError, match="W_f"):
            evaluate_model(model, copy_task(4), "fixed-point")
