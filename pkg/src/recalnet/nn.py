"""Layers, parameter registry and weight census."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from recalnet import ops
from recalnet.tensor import ConfigError, Tensor, default_dtype

# parameter kinds; only "weight" enters the census used for the module-complexity claims
WEIGHT, BIAS, NORM = "weight", "bias", "norm"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    groups: int = 1
    padding: tuple[int, int] = (0, 0)
    stride: tuple[int, int] = (1, 1)
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups:
            raise ConfigError(f"in_channels={self.in_channels} not divisible by groups={self.groups}")
        if self.out_channels % self.groups:
            raise ConfigError(f"out_channels={self.out_channels} not divisible by groups={self.groups}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def weight_count(self) -> int:
        m, n = self.kernel
        return m * n * self.in_channels * self.out_channels // self.groups


class Parameter(Tensor):
    __slots__ = ("kind",)

    def __init__(self, data, kind: str = WEIGHT):
        super().__init__(data, requires_grad=True)
        self.kind = kind


class Module:
    """Minimal container: attributes that are Parameters or Modules are registered."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, mod in self.named_modules():
            for key, buf in getattr(mod, "buffers", dict)().items():
                yield (f"{name}.{key}" if name else key), buf

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> Module:
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None):
        # rng=None leaves weights at zero; used for census-only builds at full width
        self.spec = spec
        if rng is None:
            w = np.zeros(spec.weight_shape, dtype=default_dtype())
        else:
            fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), spec.weight_shape).astype(default_dtype())
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=default_dtype()), BIAS) if spec.has_bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ConfigError(f"conv expects C={self.spec.in_channels}, input has C={x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, stride=self.spec.stride,
                          padding=self.spec.padding, groups=self.spec.groups)


def conv1x1(cin: int, cout: int, rng: np.random.Generator) -> Conv2d:
    return Conv2d(ConvSpec(cin, cout), rng)


def conv3x3(cin: int, cout: int, rng: np.random.Generator, groups: int = 1) -> Conv2d:
    return Conv2d(ConvSpec(cin, cout, kernel=(3, 3), groups=groups, padding=(1, 1)), rng)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        dt = default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt), NORM)
        self.beta = Parameter(np.zeros(channels, dtype=dt), NORM)
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum = momentum

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum)


class LayerNorm(Module):
    def __init__(self, channels: int):
        dt = default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt), NORM)
        self.beta = Parameter(np.zeros(channels, dtype=dt), NORM)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = conv3x3(cin, cout, rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class ParamStore:
    """Named view over a module's learnable arrays.

    Every parameter is registered exactly once; registering the same array
    under two names is an error so the census cannot double count.
    """

    def __init__(self, module: Module | None = None):
        self._slots: dict[str, Parameter] = {}
        if module is not None:
            for name, p in module.named_parameters():
                self.register(name, p)

    def register(self, name: str, param: Parameter) -> None:
        if name in self._slots:
            raise ConfigError(f"parameter slot {name!r} registered twice")
        if any(p is param for p in self._slots.values()):
            raise ConfigError(f"array behind {name!r} already registered under another name")
        self._slots[name] = param

    def __getitem__(self, name: str) -> Parameter:
        return self._slots[name]

    def __iter__(self):
        return iter(self._slots.items())

    def __len__(self) -> int:
        return len(self._slots)

    def names(self) -> list[str]:
        return list(self._slots)

    def census(self, prefix: str = "", kinds=(WEIGHT,)) -> int:
        """Count scalars in slots whose name starts with ``prefix`` and whose kind is in ``kinds``."""
        return sum(p.size for n, p in self._slots.items() if n.startswith(prefix) and p.kind in kinds)


def conv_census(module: Module, prefix: str = "") -> int:
    """Recount conv weights from the layer specs alone (no arrays touched)."""
    return sum(m.spec.weight_count for name, m in module.named_modules()
               if isinstance(m, Conv2d) and name.startswith(prefix))
