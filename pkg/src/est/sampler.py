"""Per-step random index-set generation for subnetwork training.

Masks are derived from a counter-based Philox stream keyed on
(seed, stream_id) with the step number as counter, so the mask for any
step is reproducible in isolation: checkpoint resume and the
asynchronous producer need no shared RNG state.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidMaskError, StreamTerminatedError

RNG_ALGORITHM = "philox4x64"

# Stream ids keep the engine's independent randomness sources apart.
STREAM_SAMPLER = 0
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_PROBES = 3


@dataclass(frozen=True)
class SamplerSeed:
    """Root seed plus a stream id separating randomness sources."""

    seed: int
    stream_id: int = STREAM_SAMPLER

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= v < 2 ** 64:
                raise ConfigError(f"{name} must be an unsigned 64-bit integer, got {v}")


def step_rng(seed: SamplerSeed, step: int) -> np.random.Generator:
    """Generator for one step: Philox keyed on (seed, stream), counter = step."""
    bitgen = np.random.Philox(
        key=np.array([seed.seed, seed.stream_id], dtype=np.uint64),
        counter=np.array([step, 0, 0, 0], dtype=np.uint64),
    )
    return np.random.Generator(bitgen)


def round_to_count(p: float, n: int) -> int:
    """Number of indices to sample: round-half-up(p * n), clamped to [1, n]."""
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"sampling rate must be in (0, 1], got {p}")
    if n < 1:
        raise ConfigError(f"population size must be >= 1, got {n}")
    k = int(p * n + 0.5)
    return min(max(k, 1), n)


def sample_subset(n: int, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Uniform size-k subset of {0..n-1} via partial Fisher-Yates, sorted."""
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if k == n:
        return tuple(range(n))
    pool = np.arange(n)
    for i in range(k):
        j = i + int(rng.integers(0, n - i))
        pool[i], pool[j] = pool[j], pool[i]
    return tuple(sorted(int(v) for v in pool[:k]))


@dataclass(frozen=True)
class SubnetworkMask:
    """One training step's sampled index sets and the rates that produced them.

    ``dims`` records the full (n_layers, n_heads, n_mlp) sizes so the mask
    is self-validating and FLOPs-accountable without the model config.
    Index sets are sorted, duplicate-free, 0-based.
    """

    layer_set: tuple[int, ...]
    head_sets: dict[int, tuple[int, ...]]
    mlp_sets: dict[int, tuple[int, ...]]
    rates: tuple[float, float, float]  # (p_heads, p_mlp, p_layers)
    dims: tuple[int, int, int]  # (n_layers, n_heads, n_mlp)

    def validate(self):
        n_layers, n_heads, n_mlp = self.dims
        p_h, p_m, p_l = self.rates
        _check_set("layer_set", self.layer_set, n_layers, round_to_count(p_l, n_layers))
        if set(self.head_sets) != set(self.layer_set) or set(self.mlp_sets) != set(self.layer_set):
            raise InvalidMaskError("head/mlp sets must cover exactly the sampled layers")
        for layer in self.layer_set:
            _check_set(f"head_sets[{layer}]", self.head_sets[layer], n_heads, round_to_count(p_h, n_heads))
            _check_set(f"mlp_sets[{layer}]", self.mlp_sets[layer], n_mlp, round_to_count(p_m, n_mlp))

    def is_full(self) -> bool:
        n_layers, n_heads, n_mlp = self.dims
        return (
            len(self.layer_set) == n_layers
            and all(len(s) == n_heads for s in self.head_sets.values())
            and all(len(s) == n_mlp for s in self.mlp_sets.values())
        )


def _check_set(name, idx, n, expected):
    if len(idx) == 0:
        raise InvalidMaskError(f"{name} is empty")
    if len(idx) != expected:
        raise InvalidMaskError(f"{name} has {len(idx)} indices, expected {expected}")
    if list(idx) != sorted(set(idx)):
        raise InvalidMaskError(f"{name} must be sorted and duplicate-free")
    if idx[0] < 0 or idx[-1] >= n:
        raise InvalidMaskError(f"{name} contains indices outside [0, {n})")


def full_mask(config) -> SubnetworkMask:
    """The mask selecting everything (all rates 1)."""
    n_layers, n_heads, n_mlp = config.n_layers, config.n_heads, config.mlp_inner
    all_layers = tuple(range(n_layers))
    return SubnetworkMask(
        layer_set=all_layers,
        head_sets={l: tuple(range(n_heads)) for l in all_layers},
        mlp_sets={l: tuple(range(n_mlp)) for l in all_layers},
        rates=(1.0, 1.0, 1.0),
        dims=(n_layers, n_heads, n_mlp),
    )


def sample_mask(config, rates, rng: np.random.Generator) -> SubnetworkMask:
    """Draw one step's mask: one layer set, fresh head/column sets per layer."""
    p_h, p_m, p_l = rates
    n_layers, n_heads, n_mlp = config.n_layers, config.n_heads, config.mlp_inner
    k_l = round_to_count(p_l, n_layers)
    k_h = round_to_count(p_h, n_heads)
    k_m = round_to_count(p_m, n_mlp)
    layer_set = sample_subset(n_layers, k_l, rng)
    head_sets = {l: sample_subset(n_heads, k_h, rng) for l in layer_set}
    mlp_sets = {l: sample_subset(n_mlp, k_m, rng) for l in layer_set}
    return SubnetworkMask(layer_set, head_sets, mlp_sets, (p_h, p_m, p_l), (n_layers, n_heads, n_mlp))


def mask_for_step(scheduler, config, seed: SamplerSeed, step: int) -> SubnetworkMask:
    """The deterministic mask for a given global step."""
    return sample_mask(config, scheduler.rates_at(step), step_rng(seed, step))


class MaskStream:
    """Bounded-queue producer of per-step masks, filled by a worker thread.

    Exactly one consumer; masks arrive in step order. Because each mask
    is derived from a per-step counter, the sequence is identical to
    synchronous generation regardless of queue capacity or timing.
    """

    _DONE = object()

    def __init__(self, scheduler, config, seed: SamplerSeed, start_step=1, capacity=4):
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self._queue = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._next_step = start_step
        self._last_step = scheduler.total_steps
        self._thread = threading.Thread(
            target=self._produce,
            args=(scheduler, config, seed, start_step),
            name="mask-stream",
            daemon=True,
        )
        self._thread.start()

    def _produce(self, scheduler, config, seed, start_step):
        try:
            for step in range(start_step, self._last_step + 1):
                mask = mask_for_step(scheduler, config, seed, step)
                while not self._stop.is_set():
                    try:
                        self._queue.put(mask, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
            self._put_forever(self._DONE)
        except Exception as exc:  # surfaces on the consumer's next get
            self._put_forever(exc)

    def _put_forever(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def get(self) -> SubnetworkMask:
        """Next mask in step order; blocks while the producer catches up."""
        item = self._queue.get()
        if item is self._DONE:
            raise StreamTerminatedError(f"mask stream exhausted after step {self._last_step}")
        if isinstance(item, Exception):
            raise StreamTerminatedError("mask producer failed") from item
        self._next_step += 1
        return item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def start_mask_stream(scheduler, config, seed: SamplerSeed, start_step=1, capacity=4) -> MaskStream:
    """Launch the asynchronous index generator feeding a bounded queue."""
    return MaskStream(scheduler, config, seed, start_step=start_step, capacity=capacity)
