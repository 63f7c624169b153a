from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as F
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor registered as trainable state of a :class:`Module`."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; registration follows attribute assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            value = np.asarray(value)
            if value.shape != own[name].shape:
                raise ValueError(
                    f"shape mismatch for parameter {name!r}: "
                    f"checkpoint {value.shape} vs model {own[name].shape}"
                )
            own[name].data = value.astype(own[name].dtype, copy=True)


class Linear(Module):
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else uniform_fan_in(rng, n_in, (n_in, n_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = F.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, zero_output: bool = False):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, zero=zero_output)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))
