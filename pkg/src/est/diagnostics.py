"""Training-dynamics probes: curvature, stage-transition drops, loss slopes.

The Hessian trace uses Hutchinson's estimator with Rademacher probes;
Hessian-vector products come from central finite differences of
gradients, so the first-order engine never needs nested tapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .data import eval_windows
from .errors import NumericalError
from .sampler import STREAM_PROBES, SamplerSeed, step_rng
from .train import LossLog


@dataclass(frozen=True)
class HessianTraceEstimate:
    value: float
    n_probes: int
    std_error: float  # 0 when a single probe gives no spread estimate
    fd_epsilon: float


@dataclass(frozen=True)
class TransitionReport:
    transition_step: int
    pre_mean: float
    post_mean: float
    drop: float  # pre - post; negative means the loss rose
    window: int


def hutchinson_trace(grad_fn, theta: np.ndarray, n_probes: int, fd_epsilon: float = 1e-3,
                     seed: int = 0) -> HessianTraceEstimate:
    """Estimate trace(H) at ``theta`` where H is the Jacobian of ``grad_fn``.

    grad_fn(theta) must be deterministic. Each probe costs two gradient
    evaluations: Hv ~ (g(theta + eps*v) - g(theta - eps*v)) / (2*eps)
    with v a Rademacher vector. ``fd_epsilon`` is scaled by
    max(1, |theta|) so the relative step is size-independent.
    """
    if n_probes < 1:
        raise ValueError(f"n_probes must be >= 1, got {n_probes}")
    theta = np.asarray(theta, dtype=np.float64)
    eps = fd_epsilon * max(1.0, float(np.linalg.norm(theta)))
    rng = step_rng(SamplerSeed(seed, STREAM_PROBES), 0)
    samples = np.empty(n_probes)
    for i in range(n_probes):
        v = rng.integers(0, 2, size=theta.size).astype(np.float64) * 2.0 - 1.0
        g_plus = np.asarray(grad_fn(theta + eps * v), dtype=np.float64)
        g_minus = np.asarray(grad_fn(theta - eps * v), dtype=np.float64)
        if not (np.isfinite(g_plus).all() and np.isfinite(g_minus).all()):
            raise NumericalError(f"non-finite gradient during probe {i}")
        hv = (g_plus - g_minus) / (2.0 * eps)
        samples[i] = float(v @ hv)
    value = float(samples.mean())
    std_error = float(samples.std(ddof=1) / math.sqrt(n_probes)) if n_probes > 1 else 0.0
    return HessianTraceEstimate(value, n_probes, std_error, eps)


def model_grad_fn(model, corpus, n_batches: int = 8, batch_size: int = 4):
    """Loss-gradient closure over a fixed deterministic batch set.

    Returns (grad_fn, theta0): grad_fn maps a flat parameter vector to
    the flat gradient of the mean full-model loss over the batches.
    """
    inputs, targets = eval_windows(corpus, n_batches * batch_size, model.config.seq_len)
    theta0 = model.get_flat().copy()

    def grad_fn(theta):
        model.set_flat(theta)
        model.zero_grads()
        total = None
        for i in range(n_batches):
            sl = slice(i * batch_size, (i + 1) * batch_size)
            with core.Tape():
                loss = core.scale(model.loss(inputs[sl], targets[sl]), 1.0 / n_batches)
            core.backward(loss)
        grads = []
        for t in model.parameters():
            grads.append((t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1))
        model.zero_grads()
        return np.concatenate(grads).astype(np.float64)

    return grad_fn, theta0


def transition_drop(log: LossLog, scheduler, window: int) -> list[TransitionReport]:
    """Mean-loss change across each internal stage transition.

    Measures only; a negative drop is reported, not judged. Windows must
    fit inside their adjacent stages and inside the log.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    steps = log.steps()
    losses = log.losses()
    bounds = [0, *scheduler.transition_steps(), scheduler.total_steps]
    reports = []
    for t, s in enumerate(scheduler.transition_steps(), start=1):
        if s - window < bounds[t - 1] or s + window > bounds[t + 1]:
            raise ValueError(f"window {window} straddles another transition around step {s}")
        pre = losses[(steps > s - window) & (steps <= s)]
        post = losses[(steps > s) & (steps <= s + window)]
        if pre.size < window or post.size < window:
            raise ValueError(f"log does not cover {window} steps on both sides of step {s}")
        reports.append(TransitionReport(s, float(pre.mean()), float(post.mean()), float(pre.mean() - post.mean()), window))
    return reports


def _trailing_mean(x: np.ndarray, span: int) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x, dtype=np.float64)])
    for i in range(len(x)):
        lo = max(0, i + 1 - span)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def _slope_at_level(log: LossLog, level: float, span: int, width: int) -> float:
    steps = log.steps().astype(np.float64)
    losses = log.losses()
    smoothed = _trailing_mean(losses, span)
    below = np.flatnonzero(smoothed <= level)
    if below.size == 0:
        raise ValueError(f"smoothed loss never reaches level {level}")
    center = int(below[0])
    half = width // 2
    lo = max(0, center - half)
    hi = min(len(steps), center + half + 1)
    coeffs = np.polyfit(steps[lo:hi], losses[lo:hi], deg=1)
    return float(coeffs[0])


def slope_compare(log_a: LossLog, log_b: LossLog, loss_level: float,
                  span: int = 50, width: int = 200) -> tuple[float, float]:
    """Loss-vs-step slopes of two runs where each first reaches ``loss_level``.

    The crossing is located on a trailing-mean smoothing (span steps);
    the slope is a least-squares fit over a ``width``-step window
    centered there. More negative means faster descent.
    """
    return (_slope_at_level(log_a, loss_level, span, width),
            _slope_at_level(log_b, loss_level, span, width))
