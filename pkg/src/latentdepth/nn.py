"""Parameters, modules, layers, and the Adam step.

Parameter names are dotted paths assigned by ``initialize_parameters`` after
the module tree is built (e.g. "unet.enc0.block0.conv1.weight"); the init
stream for each parameter is keyed on that name, so weights are reproducible
regardless of construction order.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import ConfigError, UsageError


class Parameter:
    """Trainable tensor plus its Adam moments and init recipe."""

    def __init__(self, shape: tuple, init: str, fan_in: int = 0):
        self.name = ""
        self.tensor = ad.Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
        self.init = init  # "kaiming_uniform" | "zeros" | "ones"
        self.fan_in = fan_in
        self.adam_m = np.zeros(self.tensor.size, dtype=np.float32)
        self.adam_v = np.zeros(self.tensor.size, dtype=np.float32)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def set_data(self, values: np.ndarray) -> None:
        if values.shape != self.tensor.shape:
            raise ConfigError(
                f"parameter '{self.name}': stored shape {values.shape} != model shape {self.tensor.shape}"
            )
        self.tensor.data = values.astype(self.tensor.dtype)

    def materialize(self, seed: int, dtype) -> None:
        shape = self.tensor.shape
        if self.init == "zeros":
            values = np.zeros(shape, dtype=dtype)
        elif self.init == "ones":
            values = np.ones(shape, dtype=dtype)
        elif self.init == "kaiming_uniform":
            bound = math.sqrt(6.0 / max(self.fan_in, 1))
            gen = rng.stream(seed, f"init/{self.name}")
            values = gen.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            raise ConfigError(f"unknown init kind '{self.init}'")
        self.tensor.data = values
        # moments track the training dtype so f64 runs stay f64 end to end
        self.adam_m = np.zeros(self.tensor.size, dtype=dtype)
        self.adam_v = np.zeros(self.tensor.size, dtype=dtype)
        self.step_count = 0


class Module:
    """Tiny container: tracks Parameter and Module attributes in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, m in self._modules.items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from m.named_parameters(sub)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.tensor.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state dict mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            p.set_data(state[name])


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


def initialize_parameters(module: Module, root: str, seed: int, dtype=np.float32) -> None:
    """Assign dotted names under ``root`` and fill values deterministically."""
    names = set()
    for name, p in module.named_parameters(root):
        if name in names:
            raise ConfigError(f"duplicate parameter name '{name}'")
        names.add(name)
        p.name = name
        p.materialize(seed, dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, init: str = "kaiming_uniform"):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter((out_ch, in_ch, kernel, kernel), init, fan_in=in_ch * kernel * kernel)
        self.bias = Parameter((out_ch,), "zeros")

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        return ad.conv2d(x, self.weight.tensor, self.bias.tensor, self.stride, self.padding)

    __call__ = forward


class Downsample(Module):
    """Exact spatial halving: asymmetric (1,0) zero-pad + stride-2 3x3 conv.

    The asymmetric pad keeps the conv's output-size precondition integral on
    even inputs (symmetric padding cannot).
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, stride=2, padding=0)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ConfigError(f"Downsample needs even spatial dims, got {x.shape[2:]}")
        return self.conv(ad.pad2d(x, 1, 0, 1, 0))

    __call__ = forward


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, init: str = "kaiming_uniform"):
        super().__init__()
        self.weight = Parameter((out_features, in_features), init, fan_in=in_features)
        self.bias = Parameter((out_features,), "zeros")

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        return ad.linear(x, self.weight.tensor, self.bias.tensor)

    __call__ = forward


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"GroupNorm: channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter((channels,), "ones")
        self.beta = Parameter((channels,), "zeros")

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        return ad.group_norm(x, self.groups, self.gamma.tensor, self.beta.tensor, self.eps)

    __call__ = forward


def adam_step(params: list[Parameter], lr: float = 5e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update. Grads are left intact; the caller zeroes."""
    for p in params:
        if p.tensor.grad is None:
            raise UsageError(f"adam_step: parameter '{p.name}' has no gradient")
    for p in params:
        g = p.tensor.grad.reshape(-1)
        p.step_count += 1
        t = p.step_count
        p.adam_m += (1.0 - beta1) * (g - p.adam_m)
        p.adam_v += (1.0 - beta2) * (g * g - p.adam_v)
        mhat = p.adam_m / (1.0 - beta1**t)
        vhat = p.adam_v / (1.0 - beta2**t)
        update = (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.tensor.dtype)
        p.tensor.data = p.tensor.data - update.reshape(p.tensor.shape)
