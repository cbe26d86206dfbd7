"""AdamW with decoupled weight decay, plus the warmup/decay LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    decay: str = "cosine"  # "linear" or "cosine"
    min_lr: float = 0.0

    def __post_init__(self):
        if self.decay not in ("linear", "cosine"):
            raise ConfigError(f"lr decay must be 'linear' or 'cosine', got {self.decay!r}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]")
        if self.min_lr > self.peak_lr:
            raise ConfigError(f"min_lr {self.min_lr} exceeds peak_lr {self.peak_lr}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup to peak, then linear or cosine decay to min_lr."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    s = schedule
    if s.warmup_steps and step <= s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if s.total_steps == s.warmup_steps:
        return s.peak_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    progress = min(progress, 1.0)
    if s.decay == "linear":
        return s.peak_lr + (s.min_lr - s.peak_lr) * progress
    return s.min_lr + (s.peak_lr - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Standard AdamW with bias correction.

    ``no_decay`` names parameters exempt from weight decay (LayerNorm
    gains/biases and the embeddings, by convention).
    """

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=0.0, no_decay=()):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named_params}

    def step(self, lr: float | None = None):
        """One update from the gradients currently held by the parameters."""
        if lr is None:
            lr = self.lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.named_params:
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            elif not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter {name!r}; step aborted")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * t.data
            t.data -= (lr * update).astype(t.data.dtype, copy=False)

    def zero_grads(self):
        for _, t in self.named_params:
            t.grad = None

    # -- checkpoint support ----------------------------------------------------

    def moments_flat(self) -> np.ndarray:
        parts = [self.m[name].reshape(-1) for name, _ in self.named_params]
        parts += [self.v[name].reshape(-1) for name, _ in self.named_params]
        return np.concatenate(parts)

    def set_moments_flat(self, flat: np.ndarray):
        total = sum(t.data.size for _, t in self.named_params)
        if flat.size != 2 * total:
            raise ConfigError(f"moment payload has {flat.size} floats, expected {2 * total}")
        off = 0
        for store in (self.m, self.v):
            for name, t in self.named_params:
                n = t.data.size
                store[name][...] = flat[off:off + n].reshape(t.data.shape)
                off += n


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for t in params:
        if t.grad is not None:
            g = t.grad.astype(np.float64, copy=False)
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for t in params:
            if t.grad is not None:
                t.grad *= factor
    return norm
