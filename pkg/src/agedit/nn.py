"""Small module system and the Adam optimizer on top of :mod:`agedit.tensor`."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(array, dtype=None) -> Tensor:
    return Tensor(np.asarray(array, dtype=dtype or T.get_default_dtype()), requires_grad=True)


class Module:
    """Container whose tensor attributes (and sub-modules, lists of modules) are parameters."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{key}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{key}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data[...] = value.astype(p.data.dtype, copy=False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float | None = None, zero: bool = False):
        std = (1.0 / np.sqrt(n_in)) if init_scale is None else init_scale
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, std, size=(n_in, n_out))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = param(np.ones(width))
        self.bias = param(np.zeros(width))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


class Embedding(Module):
    def __init__(self, count: int, width: int, rng: np.random.Generator, std: float = 0.02):
        self.table = param(rng.normal(0.0, std, size=(count, width)))

    def __call__(self, index) -> Tensor:
        return T.take_rows(self.table, index)


class MLP(Module):
    """Two-layer perceptron with SiLU."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator,
                 zero_out: bool = False):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class Adam:
    """Adaptive-moment gradient descent.

    Parameter arrays are re-homed as views into one flat buffer so that the
    update is a handful of vectorised operations regardless of how many
    tensors the model has.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        dtype = np.result_type(*[p.data.dtype for p in self.params])
        self._sizes = [p.size for p in self.params]
        self._flat = np.concatenate([p.data.ravel() for p in self.params]).astype(dtype)
        offset = 0
        for p, n in zip(self.params, self._sizes):
            p.data = self._flat[offset:offset + n].reshape(p.shape)
            offset += n
        self.m = np.zeros_like(self._flat)
        self.v = np.zeros_like(self._flat)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _flat_grad(self) -> np.ndarray:
        return np.concatenate([np.zeros(n, self._flat.dtype) if p.grad is None else p.grad.ravel()
                               for p, n in zip(self.params, self._sizes)])

    def step(self) -> None:
        g = self._flat_grad()
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient; step aborted")
        if self.grad_clip is not None:
            norm = float(np.sqrt(g @ g))
            if norm > self.grad_clip:
                g *= self.grad_clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        self.m *= self.b1
        self.m += (1.0 - self.b1) * g
        self.v *= self.b2
        self.v += (1.0 - self.b2) * (g * g)
        step = self.lr * np.sqrt(c2) / c1
        self._flat -= (step * self.m / (np.sqrt(self.v) + self.eps)).astype(self._flat.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m.copy(), "v": self.v.copy()}
