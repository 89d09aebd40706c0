"""Layers, models and plain SGD.

Every GBN layer sits directly before a ReLU. Weights are drawn from
U(-1/sqrt(fan_in), 1/sqrt(fan_in)) using a generator seeded by the model
seed; the draw order does not depend on the deviation spec, so models built
from the same seed start from bit-identical parameters whatever
normalization they use.
"""
from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .gbn import GbnState
from .tensor import (
    Tensor,
    add_bias,
    conv2d,
    flatten,
    matmul,
    maxpool2d,
    relu,
)

__all__ = [
    "Dense",
    "Conv2d",
    "ReLU",
    "Flatten",
    "MaxPool2d",
    "GbnState",
    "Model",
    "build_mlp",
    "build_mlp_small",
    "build_lenet_small",
    "sgd_step",
    "predict",
    "evaluate_error_rate",
]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Dense:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, fan_in, (fan_in, fan_out))
        self.bias = _uniform(rng, fan_in, (fan_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __repr__(self):
        return f"Dense({self.weight.shape[0]}, {self.weight.shape[1]})"


class Conv2d:
    def __init__(self, in_channels: int, filters: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_channels * kernel * kernel
        self.weight = _uniform(rng, fan_in, (filters, in_channels, kernel, kernel))
        self.bias = _uniform(rng, fan_in, (filters,))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(conv2d(x, self.weight, self.stride, self.padding), self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __repr__(self):
        f, c, k, _ = self.weight.shape
        return f"Conv2d({c}, {f}, kernel={k})"


class ReLU:
    def __call__(self, x: Tensor) -> Tensor:
        return relu(x)

    def __repr__(self):
        return "ReLU()"


class Flatten:
    def __call__(self, x: Tensor) -> Tensor:
        return flatten(x) if x.ndim > 2 else x

    def __repr__(self):
        return "Flatten()"


class MaxPool2d:
    def __init__(self, size: int = 2):
        self.size = size

    def __call__(self, x: Tensor) -> Tensor:
        return maxpool2d(x, self.size)

    def __repr__(self):
        return f"MaxPool2d({self.size})"


class Model:
    """An ordered stack of layers with a flat ``index.name`` parameter registry."""

    def __init__(self, layers: Iterable, seed: Optional[int] = None):
        self.layers = list(layers)
        self.seed = seed

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for layer in self.layers:
            x = layer(x)
        return x

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Model([{inner}])"

    def parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "parameters"):
                for name, p in layer.parameters().items():
                    params[f"{i}.{name}"] = p
        return params

    def gbn_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, GbnState)]

    def train(self):
        for l in self.gbn_layers():
            l.train()
        return self

    def eval(self):
        for l in self.gbn_layers():
            l.eval()
        return self

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict:
        """Parameters plus GBN running statistics, as float64 array copies."""
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GbnState):
                state[f"{i}.running_s"] = layer.running_s.copy()
                state[f"{i}.running_d"] = layer.running_d.copy()
                state[f"{i}.batches_seen"] = np.array([float(layer.batches_seen)])
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        for k, p in params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            arr = np.asarray(state[k], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, GbnState):
                layer.running_s = np.asarray(state[f"{i}.running_s"], dtype=np.float64).copy()
                layer.running_d = np.asarray(state[f"{i}.running_d"], dtype=np.float64).copy()
                seen = state.get(f"{i}.batches_seen")
                layer.batches_seen = int(np.asarray(seen).reshape(-1)[0]) if seen is not None else 1


def build_mlp(sizes, spec="sd", seed: int = 0, epsilon: float = 1e-5, momentum: float = 0.1) -> Model:
    """Flatten → [Dense → GBN → ReLU] per hidden size → Dense."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = [Flatten()]
    for fan_in, fan_out in zip(sizes[:-2], sizes[1:-1]):
        layers += [Dense(fan_in, fan_out, rng), GbnState(fan_out, spec, epsilon, momentum), ReLU()]
    layers.append(Dense(sizes[-2], sizes[-1], rng))
    return Model(layers, seed)


def build_mlp_small(spec="sd", seed: int = 0, inputs: int = 784, hidden: int = 128, classes: int = 10,
                    epsilon: float = 1e-5, momentum: float = 0.1) -> Model:
    return build_mlp([inputs, hidden, classes], spec, seed, epsilon, momentum)


def build_lenet_small(classes: int = 10, spec="sd", seed: int = 0, epsilon: float = 1e-5,
                      momentum: float = 0.1, dense: int = 500) -> Model:
    """LeNet for 1×28×28 input: two 5×5 convs (20, 50 filters), each followed by GBN, ReLU and 2×2 max-pool."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    layers = [
        Conv2d(1, 20, 5, rng),
        GbnState(20, spec, epsilon, momentum),
        ReLU(),
        MaxPool2d(2),
        Conv2d(20, 50, 5, rng),
        GbnState(50, spec, epsilon, momentum),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        Dense(50 * 4 * 4, dense, rng),
        ReLU(),
        Dense(dense, classes, rng),
    ]
    return Model(layers, seed)


def sgd_step(model: Model, lr: float) -> None:
    """p <- p - lr * grad for every parameter, then clear the gradients."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    params = model.parameters()
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"no gradient for parameter(s) {', '.join(missing)}; run backward first")
    for p in params.values():
        p.data = (p.data - lr * p.grad).astype(p.dtype, copy=False)
        p.grad = None


def predict(model: Model, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Argmax class per example (first index wins ties)."""
    out = []
    for start in range(0, len(images), batch_size):
        logits = model(Tensor(images[start : start + batch_size])).data
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def evaluate_error_rate(model: Model, dataset, batch_size: int = 1000) -> float:
    """Test error in percent with GBN layers in inference mode."""
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("empty dataset")
    modes = [l.mode for l in model.gbn_layers()]
    model.eval()
    try:
        pred = predict(model, images, batch_size)
    finally:
        for l, m in zip(model.gbn_layers(), modes):
            l.mode = m
    return 100.0 * float(np.mean(pred != np.asarray(labels)))
