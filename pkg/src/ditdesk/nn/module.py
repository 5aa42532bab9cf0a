"""Lightweight parameter containers for building models."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, matmul


class Parameter(Tensor):
    """A tensor registered as trainable state of a module."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Base class tracking parameters and sub-modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (prefix + name if prefix else name), p
        for name, mod in self._modules.items():
            sub = prefix + name + "." if prefix else name + "."
            yield from mod.named_parameters(sub)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Module":
        object.__setattr__(self, "training", True)
        for mod in self._modules.values():
            mod.train()
        return self

    def eval(self) -> "Module":
        object.__setattr__(self, "training", False)
        for mod in self._modules.values():
            mod.eval()
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if name in state:
                if state[name].shape != p.data.shape:
                    raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model {p.data.shape}")
                p.data = np.ascontiguousarray(state[name], dtype=p.data.dtype)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for mod in modules:
            self.append(mod)

    def append(self, mod: Module) -> None:
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(normal_init(rng, (in_dim, out_dim), std))
        self.bias = Parameter(np.zeros(out_dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        kernel: int,
        stride: int = 1,
        pad: int = 0,
    ):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(normal_init(rng, (out_ch, in_ch, kernel, kernel), std=(1.0 / fan_in) ** 0.5))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """Stride-two 2x2 transposed convolution (exact 2x upsampler)."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, stride: int = 2):
        super().__init__()
        fan_in = in_ch
        self.weight = Parameter(normal_init(rng, (in_ch, out_ch, stride, stride), std=(1.0 / fan_in) ** 0.5))
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, self.bias, stride=self.stride)
