"""
Tests for reverse-mode differentiation, Adam and checkpoints
"""

import os
import shutil
import tempfile

import numpy as np
import pytest

from app.errors import EmptyDataError, NonFiniteLossError, ShapeError, StaleTapeError
from app.nn import diffnet as dn
from app.nn.diffnet import (DenseNet, ParamStore, Tensor, TrainConfig, adam_step, backpropagate, backward,
                            clip_gradients, load_checkpoint, net_forward, save_checkpoint, train_loop)

OPS = {
    "polynomial": lambda t: t * t + 3.0 * t,
    "quotient": lambda t: t / (t + 5.0),
    "reflected": lambda t: 2.0 - 1.0 / t,
    "power": lambda t: dn.power(t, 1.5),
    "exp": dn.exp,
    "log": dn.log,
    "sqrt": dn.sqrt,
    "tanh": dn.tanh,
    "softplus": dn.softplus,
    "softmax": lambda t: dn.softmax(t, axis=1),
    "cumsum": lambda t: dn.cumsum(t, axis=1),
    "mean": lambda t: dn.reduce_mean(t, axis=0),
    "sum_keepdims": lambda t: dn.reduce_sum(t, axis=1, keepdims=True) * t,
    "concat": lambda t: dn.concat([t, t * 2.0], axis=1),
    "slice": lambda t: t[:, 1:3],
    "take_rows": lambda t: dn.take_rows(t, np.array([0, 3, 1])),
    "where": lambda t: dn.where(t.data > 1.0, t, -t),
    "matmul": lambda t: t @ Tensor(np.arange(8.0).reshape(4, 2) / 8.0),
    "reshape": lambda t: dn.reshape(t, (4, 3)),
    "clip": lambda t: dn.clip(t, 0.8, 1.5),
    "broadcast": lambda t: t * dn.reduce_sum(t, axis=0, keepdims=True),
}


def numeric_gradient(fn, x: np.ndarray, weights: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (np.sum(weights * fn(Tensor(up)).data) - np.sum(weights * fn(Tensor(down)).data)) / (2 * h)
    return grad


class TestGradients:
    """Test cases for analytic gradients against central differences"""

    @pytest.mark.parametrize("name", sorted(OPS))
    def test_op_gradient(self, name):
        """Test each differentiable op"""
        fn = OPS[name]
        rng = np.random.default_rng(0)
        x = rng.uniform(0.5, 2.0, size=(3, 4))
        store = ParamStore()
        store.add("x", x)
        out = fn(store.tensor("x"))
        weights = rng.normal(size=out.shape)
        backpropagate(out, weights)

        assert np.allclose(store.grads["x"], numeric_gradient(fn, x, weights), rtol=1e-5, atol=1e-7)

    def test_dense_net_gradient(self):
        """Test parameter gradients of a small network"""
        rng = np.random.default_rng(1)
        store = ParamStore()
        net = DenseNet([3, 5, 2], store, "net", hidden_activation="tanh", output_activation="softplus", rng=rng)
        inputs = rng.normal(size=(6, 3))
        weights = rng.normal(size=(6, 2))
        _, tape = net_forward(net, inputs)
        backward(tape, weights)

        h = 1e-6
        for name in store.names():
            value = store.params[name]
            numeric = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                original = value[idx]
                value[idx] = original + h
                up = np.sum(weights * net.forward(inputs).data)
                value[idx] = original - h
                down = np.sum(weights * net.forward(inputs).data)
                value[idx] = original
                numeric[idx] = (up - down) / (2 * h)
            assert np.allclose(store.grads[name], numeric, rtol=1e-5, atol=1e-7), name

    def test_gradients_accumulate(self):
        """Test two backward calls add up"""
        store = ParamStore()
        net = DenseNet([2, 2], store, "net")
        _, tape = net_forward(net, np.ones((1, 2)))
        backward(tape, np.ones((1, 2)))
        once = store.grads["net.w0"].copy()
        backward(tape, np.ones((1, 2)))
        assert np.allclose(store.grads["net.w0"], 2 * once)

    def test_stale_tape(self):
        """Test backward after a parameter update"""
        store = ParamStore()
        net = DenseNet([2, 2], store, "net")
        _, tape = net_forward(net, np.ones((1, 2)))
        adam_step(store, TrainConfig())
        with pytest.raises(StaleTapeError):
            backward(tape, np.ones((1, 2)))

    def test_loss_gradient_shape(self):
        """Test a mismatching loss gradient"""
        store = ParamStore()
        net = DenseNet([2, 2], store, "net")
        _, tape = net_forward(net, np.ones((3, 2)))
        with pytest.raises(ShapeError):
            backward(tape, np.ones((3, 1)))

    def test_input_width(self):
        """Test a batch of the wrong width"""
        net = DenseNet([2, 2], ParamStore(), "net")
        with pytest.raises(ShapeError):
            net.forward(np.ones((3, 4)))

    def test_matmul_shapes(self):
        """Test incompatible matrix product"""
        with pytest.raises(ShapeError):
            dn.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestOptimizer:
    """Test cases for Adam, clipping and the training loop"""

    def setup_method(self):
        """Set up test with temporary directory"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up temporary files"""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_first_adam_step_moves_by_learning_rate(self):
        """Test the bias-corrected first step"""
        store = ParamStore()
        store.add("p", np.array([1.0, -2.0]))
        store.grads["p"][:] = [0.5, -3.0]
        adam_step(store, TrainConfig(learning_rate=0.1))
        assert np.allclose(store.params["p"], [0.9, -1.9], atol=1e-6)
        assert store.step == 1

    def test_clip_gradients(self):
        """Test global-norm clipping"""
        store = ParamStore()
        store.add("p", np.zeros(2))
        store.grads["p"][:] = [3.0, 4.0]
        assert clip_gradients(store, 1.0) == pytest.approx(5.0)
        assert np.allclose(store.grads["p"], [0.6, 0.8])

    def regression(self, seed: int):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(256, 2))
        data = np.column_stack([x, x @ np.array([1.5, -0.5]) + 0.3])
        store = ParamStore()
        net = DenseNet([2, 1], store, "lin", rng=np.random.default_rng(seed))

        def objective(batch, epoch, batch_index):
            out, tape = net_forward(net, batch[:, :2])
            diff = out - batch[:, 2:]
            backward(tape, 2.0 * diff / len(batch))
            return float(np.mean(diff * diff))

        config = TrainConfig(learning_rate=0.05, batch_size=32, epochs=30, seed=seed)
        return train_loop(objective, data, config, store), store

    def test_training_reduces_loss(self):
        """Test linear regression converges"""
        history, _ = self.regression(0)
        assert len(history) == 30
        assert history[-1] < history[0] / 10

    def test_training_is_deterministic(self):
        """Test identical seeds give identical parameters"""
        history_a, store_a = self.regression(2)
        history_b, store_b = self.regression(2)
        assert history_a == history_b
        for name in store_a.names():
            assert np.array_equal(store_a.params[name], store_b.params[name])

    def test_non_finite_loss_aborts(self):
        """Test NaN losses stop training with the batch position"""
        store = ParamStore()
        store.add("p", np.zeros(1))
        with pytest.raises(NonFiniteLossError) as excinfo:
            train_loop(lambda batch, epoch, index: float("nan"), np.ones((4, 1)), TrainConfig(), store)
        assert excinfo.value.epoch == 0
        assert excinfo.value.batch_index == 0
        assert excinfo.value.exit_code == 4

    def test_empty_data(self):
        """Test training on zero rows"""
        with pytest.raises(EmptyDataError):
            train_loop(lambda batch, epoch, index: 0.0, np.zeros((0, 1)), TrainConfig(), ParamStore())

    def test_checkpoint_is_bit_exact(self):
        """Test checkpoint persistence"""
        _, store = self.regression(1)
        path = os.path.join(self.temp_dir, "ckpt.json")
        save_checkpoint(store, {"kind": "linear"}, path)
        loaded, metadata = load_checkpoint(path)

        assert metadata == {"kind": "linear"}
        for name in store.names():
            assert np.array_equal(loaded.params[name], store.params[name])


if __name__ == "__main__":
    pytest.main([__file__])
