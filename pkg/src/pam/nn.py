"""Module containers and the parameterized layers built on the tensor primitives."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ConvSpec, Tensor


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0,
                   dtype=np.float64) -> np.ndarray:
    """Zero-mean uniform draw with variance ``gain**2 / fan_in``."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container tracking parameters, buffers and child modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
            if isinstance(m, BatchNorm):
                m.state.mode = "train" if mode else "eval"
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._modules)), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return self._modules[str(i)]


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: Optional[np.random.Generator] = None,
                 gain: float = 1.0, dtype=np.float64):
        super().__init__()
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel_size ** 2
        w = (uniform_fan_in(rng, spec.weight_shape, fan_in, gain, dtype) if rng is not None
             else np.zeros(spec.weight_shape, dtype=dtype))
        self.weight = Tensor(w, requires_grad=True)
        if spec.has_bias:
            self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.spec)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float64):
        super().__init__()
        self.state = BatchNormState.create(channels, dtype=dtype)
        self.gamma = self.state.gamma
        self.beta = self.state.beta

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.state.running_mean
        yield prefix + "running_var", self.state.running_var

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.state)


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, dtype=np.float64):
        super().__init__()
        self.slopes = Tensor(np.full(channels, init, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slopes)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, gain: float = 1.0, dtype=np.float64):
        super().__init__()
        shape = (out_features, in_features)
        w = (uniform_fan_in(rng, shape, in_features, gain, dtype) if rng is not None
             else np.zeros(shape, dtype=dtype))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)
