"""
Minimal reverse-mode differentiation for dense networks
Tensors remember their parents; backward walks the graph in reverse
topological order and accumulates gradients into a ParamStore.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.errors import ConfigError, EmptyDataError, NonFiniteLossError, ShapeError, StaleTapeError

logger = logging.getLogger(__name__)


class Tensor:
    """
    Float64 array node of a computation graph

    Leaves bound to a ParamStore carry ``param = (store, name)``; constants
    have no parents and do not take part in backward.
    """

    __array_ufunc__ = None

    def __init__(self, data, parents: Tuple['Tensor', ...] = (), backward_fn: Optional[Callable] = None, param=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.param = param
        self.requires_grad = param is not None or any(p.requires_grad for p in parents)
        if self.requires_grad:
            self.parents = parents
            self.backward_fn = backward_fn
        else:
            self.parents = ()
            self.backward_fn = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Elementwise and linear ops ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data / b.data, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data ** exponent, (a,),
                  lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply {a.shape} by {b.shape}")
    return Tensor(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (0.5 * g / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def clip(a, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    passed = (a.data >= low) & (a.data <= high)
    return Tensor(np.clip(a.data, low, high), (a,), lambda g: (g * passed,))


def where(condition: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)
    return Tensor(np.where(condition, a.data, b.data), (a, b),
                  lambda g: (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                             _unbroadcast(np.where(condition, 0.0, g), b.shape)))


# --- Reductions and shape ops ------------------------------------------------

def reduce_sum(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward_fn)


def reduce_mean(a, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    out = shifted / np.sum(shifted, axis=axis, keepdims=True)
    return Tensor(out, (a,),
                  lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def cumsum(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.cumsum(a.data, axis=axis), (a,),
                  lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, key, g)
        return (full,)

    return Tensor(a.data[key], (a,), backward_fn)


def take_rows(a, index: np.ndarray) -> Tensor:
    """out[i] = a[i, index[i]] for a 2-D tensor"""
    a = as_tensor(a)
    rows = np.arange(a.shape[0])
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        full = np.zeros(a.shape)
        np.add.at(full, (rows, index), g)
        return (full,)

    return Tensor(a.data[rows, index], (a,), backward_fn)


# --- Parameters, tapes and backward -----------------------------------------

class ParamStore:
    """
    Named parameter arrays with gradient and Adam moment buffers

    ``version`` increases with every parameter mutation so tapes recorded
    before an update can be detected.
    """

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.first_moments: Dict[str, np.ndarray] = {}
        self.second_moments: Dict[str, np.ndarray] = {}
        self.step = 0
        self.version = 0

    def names(self) -> List[str]:
        return list(self.params)

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ConfigError(f"Duplicate parameter name: {name}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.first_moments[name] = np.zeros_like(value)
        self.second_moments[name] = np.zeros_like(value)

    def set(self, name: str, value: np.ndarray):
        value = np.array(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise ShapeError(f"{name}: expected shape {self.params[name].shape}, got {value.shape}")
        self.params[name] = value
        self.version += 1

    def tensor(self, name: str) -> Tensor:
        """Leaf tensor bound to a parameter"""
        return Tensor(self.params[name], param=(self, name))

    def zero_grads(self):
        for name in self.grads:
            self.grads[name].fill(0.0)

    def grad_norm(self) -> float:
        return math.sqrt(float(np_sum_of_squares(self.grads.values())))

    def to_dict(self) -> Dict:
        """Parameters as hex floats (bit-exact JSON)"""
        return {
            name: {"shape": list(value.shape), "data": [float.hex(float(v)) for v in value.ravel()]}
            for name, value in self.params.items()
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ParamStore':
        store = cls()
        for name, entry in data.items():
            values = np.array([float.fromhex(v) for v in entry["data"]], dtype=np.float64)
            store.add(name, values.reshape(entry["shape"]))
        return store


def np_sum_of_squares(arrays) -> float:
    return float(np.sum([np.sum(a * a) for a in arrays])) if arrays else 0.0


class Tape:
    """Output of a forward pass plus the parameter version it was recorded at"""

    def __init__(self, output: Tensor, store: ParamStore):
        self.output = output
        self.store = store
        self.version = store.version


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backpropagate(root: Tensor, grad):
    """Push ``grad`` (d loss / d root) down the graph into the parameter stores"""
    if not root.requires_grad:
        return
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != root.shape:
        grad = np.broadcast_to(grad, root.shape)
    grads = {id(root): grad}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            store, name = node.param
            store.grads[name] += g
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad


def backward(tape: Tape, loss_gradient) -> None:
    """
    Accumulate gradients of a recorded forward pass into its ParamStore

    Repeated calls add up.

    Raises:
        StaleTapeError: Parameters changed since the tape was recorded
        ShapeError: loss_gradient does not match the output shape
    """
    if tape.store.version != tape.version:
        raise StaleTapeError("Tape was recorded before the last parameter update")
    loss_gradient = np.asarray(loss_gradient, dtype=np.float64)
    if loss_gradient.shape != tape.output.shape:
        raise ShapeError(f"Loss gradient shape {loss_gradient.shape} does not match output {tape.output.shape}")
    backpropagate(tape.output, loss_gradient)


# --- Dense networks -----------------------------------------------------------

HIDDEN_ACTIVATIONS = {"relu": relu, "tanh": tanh}
OUTPUT_ACTIVATIONS = {"identity": lambda h: h, "softplus": softplus}


class DenseNet:
    """
    Multilayer perceptron whose weights live in a ParamStore

    Weights are drawn uniformly in +-sqrt(6 / (fan_in + fan_out)); biases
    start at zero.
    """

    def __init__(self, widths: Sequence[int], store: ParamStore, prefix: str,
                 hidden_activation: str = "relu", output_activation: str = "identity",
                 rng: Optional[np.random.Generator] = None, initialize: bool = True):
        if len(widths) < 2 or any(int(w) < 1 for w in widths):
            raise ConfigError(f"Invalid layer widths: {list(widths)}")
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"Unknown hidden activation: {hidden_activation}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"Unknown output activation: {output_activation}")
        self.widths = [int(w) for w in widths]
        self.store = store
        self.prefix = prefix
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        if initialize:
            rng = rng if rng is not None else np.random.default_rng(0)
            for i, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                store.add(self.weight_name(i), rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                store.add(self.bias_name(i), np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def weight_name(self, layer: int) -> str:
        return f"{self.prefix}.w{layer}"

    def bias_name(self, layer: int) -> str:
        return f"{self.prefix}.b{layer}"

    def forward(self, inputs) -> Tensor:
        h = as_tensor(inputs)
        if h.ndim != 2 or h.shape[1] != self.widths[0]:
            raise ShapeError(f"{self.prefix}: expected input width {self.widths[0]}, got shape {h.shape}")
        hidden = HIDDEN_ACTIVATIONS[self.hidden_activation]
        for i in range(self.n_layers):
            h = h @ self.store.tensor(self.weight_name(i)) + self.store.tensor(self.bias_name(i))
            h = hidden(h) if i < self.n_layers - 1 else OUTPUT_ACTIVATIONS[self.output_activation](h)
        return h

    def to_dict(self) -> Dict:
        return {
            "widths": self.widths,
            "prefix": self.prefix,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, data: Dict, store: ParamStore) -> 'DenseNet':
        return cls(data["widths"], store, data["prefix"], data["hidden_activation"],
                   data["output_activation"], initialize=False)


def net_forward(net: DenseNet, inputs: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """Batched forward pass; returns the B x d_out output and its tape"""
    output = net.forward(np.asarray(inputs, dtype=np.float64))
    return output.data, Tape(output, net.store)


# --- Optimization -------------------------------------------------------------

@dataclass
class TrainConfig:
    """Adam and mini-batch settings"""
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 40
    seed: int = 0
    clip_norm: Optional[float] = 5.0
    betas: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when given")


def adam_step(store: ParamStore, config: TrainConfig):
    """
    One bias-corrected Adam update from the current gradient buffers

    Gradients are left in place; callers zero them.
    """
    beta1, beta2 = config.betas
    store.step += 1
    correction1 = 1.0 - beta1 ** store.step
    correction2 = 1.0 - beta2 ** store.step
    for name, value in store.params.items():
        grad = store.grads[name]
        m = store.first_moments[name]
        v = store.second_moments[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        value -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)
    store.version += 1


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global norm is at most max_norm; returns the norm before"""
    norm = store.grad_norm()
    if norm > max_norm:
        scale = max_norm / norm
        for grad in store.grads.values():
            grad *= scale
    return norm


def train_loop(objective: Callable[[np.ndarray, int, int], float], data: np.ndarray,
               config: TrainConfig, store: ParamStore) -> List[float]:
    """
    Seeded mini-batch Adam training

    Args:
        objective: Called as objective(batch, epoch, batch_index); must
            return the batch loss and accumulate its gradients into ``store``
        data: N x d matrix, rows reshuffled every epoch
        config: Optimizer and batching settings
        store: Parameters being trained

    Returns:
        Per-epoch mean loss (weighted by batch size)

    Raises:
        NonFiniteLossError: A loss or gradient became NaN/inf
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise EmptyDataError("Cannot train on an empty matrix")
    rng = np.random.default_rng(config.seed)
    history: List[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(data.shape[0])
        total, count = 0.0, 0
        for batch_index, start in enumerate(range(0, data.shape[0], config.batch_size)):
            rows = order[start:start + config.batch_size]
            store.zero_grads()
            loss = float(objective(data[rows], epoch, batch_index))
            norm = store.grad_norm()
            if not (math.isfinite(loss) and math.isfinite(norm)):
                raise NonFiniteLossError(
                    f"Non-finite loss at epoch {epoch}, batch {batch_index} (loss={loss}, grad norm={norm})",
                    epoch=epoch, batch_index=batch_index,
                )
            if config.clip_norm is not None:
                clip_gradients(store, config.clip_norm)
            adam_step(store, config)
            total += loss * len(rows)
            count += len(rows)
        history.append(total / count)
        logger.debug("epoch %d: mean loss %.6f", epoch, history[-1])
    logger.info("Trained %d epochs, loss %.6f -> %.6f", config.epochs, history[0], history[-1])
    return history


# --- Checkpoints ----------------------------------------------------------------

def save_checkpoint(store: ParamStore, metadata: Dict, path: str):
    """Write parameters (hex floats) and architecture metadata as one JSON document"""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({"metadata": metadata, "params": store.to_dict()}, f, indent=1, sort_keys=True)


def load_checkpoint(path: str) -> Tuple[ParamStore, Dict]:
    """Read a checkpoint written by save_checkpoint; parameters are bit-exact"""
    with open(path, 'r', encoding='utf-8') as f:
        data = json.load(f)
    return ParamStore.from_dict(data["params"]), data["metadata"]
