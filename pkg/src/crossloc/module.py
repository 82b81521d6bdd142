"""Minimal parameter-container system for building models on the tensor engine."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A learnable tensor; always requires gradients."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Buffer:
    """Non-learnable state saved with checkpoints (e.g. BN running stats)."""

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)


class Module:
    """Base class: children are discovered by attribute walking."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in vars(self).items():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(child, Parameter):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, child in vars(self).items():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(child, Buffer):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_buffers(f"{full}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in vars(self).values():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param.{k}": p.data for k, p in self.named_parameters()}
        state.update({f"buffer.{k}": b.data for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = {f"param.{k}" for k in params} | {f"buffer.{k}" for k in buffers}
        if expected != set(state):
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for key, arr in state.items():
            kind, name = key.split(".", 1)
            target = params[name] if kind == "param" else buffers[name]
            if target.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {key}: {target.data.shape} vs {arr.shape}")
            target.data = np.ascontiguousarray(arr, dtype=np.float64)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = list(modules)

    def append(self, m: Module) -> None:
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_buffers(f"{prefix}{i}.")

    def train(self, mode: bool = True):
        self.training = mode
        for m in self._items:
            m.train(mode)
        return self


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped at two standard deviations."""
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


class Linear(Module):
    """y = x @ w + b, with the usual truncated-normal weight init."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.w = Parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.b = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import linear

        return linear(x, self.w, self.b)


def conv_init(rng: np.random.Generator, out_ch: int, in_ch: int, kh: int, kw: int) -> np.ndarray:
    """Kaiming-uniform fan-in init for conv kernels."""
    fan_in = in_ch * kh * kw
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw))
