"""Parameter containers and the dense layers the model is assembled from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Owns tensors and sub-modules; attribute order defines parameter names.

    Tensor attributes with ``requires_grad`` are trainable parameters, other
    tensor attributes are frozen buffers.  Both are part of the state dict.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Tensor, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            else:
                yield from val.named_tensors(name + ".")

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, t) for n, t in self.named_tensors(prefix) if t.requires_grad)

    def named_buffers(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, t) for n, t in self.named_tensors(prefix) if not t.requires_grad)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self.named_tensors())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ad.DimensionError(f"{name}: stored shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else xavier_uniform(n_in, n_out, rng)
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(Module):
    """Two dense layers, ReLU and inverted dropout on the hidden layer."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator, dropout: float = 0.0):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)
        self.dropout = dropout
        self._rng = rng

    def set_rng(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def __call__(self, x) -> Tensor:
        h = ad.relu(self.fc1(x))
        h = ad.dropout(h, self.dropout, self._rng, self.training)
        return self.fc2(h)
