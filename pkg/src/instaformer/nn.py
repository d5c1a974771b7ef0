"""Parameter containers and the small set of layers the model uses."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import engine as E
from .engine import Tensor

INIT_STD = 0.02
NORM_EPS = 1e-5


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=E.get_default_dtype()), requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes.

    Attribute order defines the dotted parameter names used by checkpoints,
    e.g. ``encoder.conv1.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 pad_mode: str = "zeros", rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, INIT_STD, (cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))
        self.stride, self.padding, self.pad_mode = stride, padding, pad_mode

    def forward(self, x: Tensor) -> Tensor:
        return E.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode)

    def out_shape(self, shape):
        c, h, w = shape
        k = self.weight.shape[2]
        f = lambda n: (n + 2 * self.padding - k) // self.stride + 1  # noqa: E731
        return (self.weight.shape[0], f(h), f(w))


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, INIT_STD, (cin, cout, k, k)))
        self.bias = _param(np.zeros(cout))
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return E.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_shape(self, shape):
        c, h, w = shape
        k = self.weight.shape[2]
        f = lambda n: (n - 1) * self.stride - 2 * self.padding + k  # noqa: E731
        return (self.weight.shape[1], f(h), f(w))


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None,
                 zero: bool = False):
        rng = rng or np.random.default_rng(0)
        w = np.zeros((cin, cout)) if zero else rng.normal(0.0, INIT_STD, (cin, cout))
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        return E.matmul(x, self.weight) + self.bias


def normalize(x: Tensor, axes, eps: float = NORM_EPS) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes`` (population variance)."""
    mu = E.mean(x, axes, keepdims=True)
    var = E.var(x, axes, keepdims=True)
    return (x - mu) / E.sqrt(var + eps)


class InstanceNorm2d(Module):
    """Per-sample, per-channel spatial normalisation with an affine (1, 0) init."""

    def __init__(self, channels: int):
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        y = normalize(x, (2, 3))
        return y * E.reshape(self.weight, (1, -1, 1, 1)) + E.reshape(self.bias, (1, -1, 1, 1))
