"""Optimizers and the warmup/constant/linear-decay learning-rate law.

The reconstruction schedule spends 10% of the run warming the multiplier
up from 0.005 to 1, holds it at 1 for 30% of the remainder, then decays
linearly to 0.01 by the final step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class ScheduleConfig:
    base_lr: float
    total_steps: int
    warmup_frac: float = 0.1
    constant_frac: float = 0.27
    decay_frac: float = 0.63
    warmup_start_mult: float = 0.005
    final_mult: float = 0.01
    decay_shape: str = "linear"  # or "cosine"

    def __post_init__(self):
        fracs = (self.warmup_frac, self.constant_frac, self.decay_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"phase fractions must be >= 0 and sum to 1, got {fracs}")
        if not 0 < self.final_mult <= 1:
            raise ValueError("final_mult must be in (0, 1]")
        if self.warmup_start_mult <= 0:
            raise ValueError("warmup_start_mult must be positive")
        if self.decay_shape not in ("linear", "cosine"):
            raise ValueError(f"unknown decay shape {self.decay_shape!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @classmethod
    def reconstruction(cls, base_lr: float, total_steps: int) -> "ScheduleConfig":
        return cls(base_lr=base_lr, total_steps=total_steps)

    @classmethod
    def generation(cls, base_lr: float, total_steps: int) -> "ScheduleConfig":
        # no warmup, 5% constant, 95% linear decay
        return cls(base_lr=base_lr, total_steps=total_steps, warmup_frac=0.0,
                   constant_frac=0.05, decay_frac=0.95)

    @classmethod
    def constant(cls, base_lr: float, total_steps: int,
                 warmup_frac: float = 0.1) -> "ScheduleConfig":
        """Warmup then flat: the no-annealing comparison arm."""
        return cls(base_lr=base_lr, total_steps=total_steps,
                   warmup_frac=warmup_frac, constant_frac=1.0 - warmup_frac,
                   decay_frac=0.0, final_mult=1.0)


def lr_at(cfg: ScheduleConfig, step: int) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    t = float(cfg.total_steps)
    warm_end = cfg.warmup_frac * t
    const_end = warm_end + cfg.constant_frac * t
    if step < warm_end:
        mult = cfg.warmup_start_mult + (1.0 - cfg.warmup_start_mult) * (step / warm_end)
    elif step <= const_end or cfg.decay_frac == 0.0:
        mult = 1.0
    else:
        frac = (step - const_end) / (t - const_end)
        if cfg.decay_shape == "cosine":
            mult = cfg.final_mult + (1.0 - cfg.final_mult) * 0.5 * (1.0 + np.cos(np.pi * frac))
        else:
            mult = 1.0 + (cfg.final_mult - 1.0) * frac
    return cfg.base_lr * mult


def scaled_base_lr(batch_size: int, base_batch_size: int, base_lr: float) -> float:
    """Linear batch-size scaling of the base learning rate."""
    if batch_size < 1 or base_batch_size < 1:
        raise ValueError("batch sizes must be positive")
    return (batch_size / base_batch_size) * base_lr


class Sgd:
    """Plain gradient descent over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("lr must be non-negative")
        for p in self.params.values():
            if p.grad is None:
                continue
            if p.grad.shape != p.values.shape:
                raise ValueError(f"grad shape {p.grad.shape} != param {p.values.shape}")
            p.values = p.values - lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.95, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.values.shape:
                raise ValueError(f"grad shape {g.shape} != param {p.values.shape}")
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            p.values = p.values - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["adam.t"][0])
        for name in self.params:
            self.m[name] = tensors[f"adam.m.{name}"].copy()
            self.v[name] = tensors[f"adam.v.{name}"].copy()
