"""Adam optimizer, gradient clipping, and the warmup+cosine LR schedule."""

from __future__ import annotations

import math

import numpy as np

from .module import Parameter


class Adam:
    def __init__(
        self,
        named_params: list[tuple[str, Parameter]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.named_params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {"t": np.array([self.t], dtype=np.float64)}
        for name in self.m:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for name in self.m:
            self.m[name] = np.ascontiguousarray(state[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.ascontiguousarray(state[f"v.{name}"], dtype=np.float64)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm; returns the raw norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def warmup_cosine_lr(step: int, total_steps: int, warmup_steps: int, lr_max: float) -> float:
    """Linear ramp to lr_max over warmup_steps, then cosine decay to 0 at total_steps."""
    if total_steps <= 0:
        return lr_max
    if warmup_steps > 0 and step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))
