"""Staged sampling scheduler: maps a global step to its stage's rate triple.

A scheduler is an ordered list of stages, each an (end_step, rates)
pair with rates = (p_heads, p_mlp, p_layers). Stage intervals are
right-inclusive: step s belongs to the stage whose end_step is the
first one >= s.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

Rates = tuple[float, float, float]


@dataclass(frozen=True)
class Stage:
    end_step: int
    rates: Rates


@dataclass(frozen=True)
class SamplingScheduler:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("scheduler needs at least one stage")
        prev = 0
        for i, st in enumerate(self.stages):
            if st.end_step <= prev:
                raise ConfigError(
                    f"stages[{i}].end_step={st.end_step} must exceed the previous end step {prev}"
                )
            prev = st.end_step
            if len(st.rates) != 3:
                raise ConfigError(f"stages[{i}].rates must be a (p_heads, p_mlp, p_layers) triple")
            for j, p in enumerate(st.rates):
                if not 0.0 < p <= 1.0:
                    raise ConfigError(f"stages[{i}].rates[{j}]={p} outside (0, 1]")

    @property
    def total_steps(self) -> int:
        return self.stages[-1].end_step

    def stage_index_at(self, step: int) -> int:
        """1-based stage index owning ``step``; boundaries are right-inclusive."""
        if not 1 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [1, {self.total_steps}]")
        for i, st in enumerate(self.stages):
            if step <= st.end_step:
                return i + 1
        raise AssertionError("unreachable")

    def rates_at(self, step: int) -> Rates:
        return self.stages[self.stage_index_at(step) - 1].rates

    def stage_lengths(self) -> tuple[int, ...]:
        """Steps spent in each stage."""
        prev = 0
        out = []
        for st in self.stages:
            out.append(st.end_step - prev)
            prev = st.end_step
        return tuple(out)

    def transition_steps(self) -> tuple[int, ...]:
        """Internal stage-boundary steps (excludes the final end step)."""
        return tuple(st.end_step for st in self.stages[:-1])


def make_scheduler(end_steps, rates_list) -> SamplingScheduler:
    if len(end_steps) != len(rates_list):
        raise ConfigError(
            f"got {len(end_steps)} end steps but {len(rates_list)} rate triples"
        )
    return SamplingScheduler(tuple(Stage(int(e), tuple(float(p) for p in r)) for e, r in zip(end_steps, rates_list)))


def validate(sched: SamplingScheduler, total_steps: int | None = None) -> list[str]:
    """Check soft conventions; hard invariants already raise at construction.

    Returns human-readable warnings, e.g. a final stage that never
    trains the complete model (legitimate, but worth flagging).
    """
    warnings = []
    if total_steps is not None and sched.total_steps != total_steps:
        raise ConfigError(
            f"scheduler ends at step {sched.total_steps} but the run is configured for {total_steps} steps"
        )
    if sched.stages[-1].rates != (1.0, 1.0, 1.0):
        warnings.append(
            f"final stage rates {sched.stages[-1].rates} never train the complete model"
        )
    return warnings


# Named schedules. The gpt2/tinyllama presets are the staged schedules used
# for those model scales; the rest are ablation variants. `equal-stages` is
# the textbook illustration: three equal stages at half rates, 41.7% saving.
_PRESETS = {
    "practical-gpt2": (
        (20_000, 70_000, 150_000),
        [(0.5, 0.5, 0.5), (0.5, 0.5, 1.0), (1.0, 1.0, 1.0)],
    ),
    "practical-tinyllama": (
        (10_000, 25_000, 60_000),
        [(0.5, 0.5, 0.5), (0.5, 0.5, 1.0), (1.0, 1.0, 1.0)],
    ),
    "one-stage": (
        (150_000,),
        [(0.5, 0.5, 1.0)],
    ),
    "two-stage-a": (
        (50_000, 150_000),
        [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)],
    ),
    "two-stage-b": (
        (70_000, 150_000),
        [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)],
    ),
    "two-stage-c": (
        (90_000, 150_000),
        [(0.5, 0.5, 1.0), (1.0, 1.0, 1.0)],
    ),
    "three-stage-alt": (
        (20_000, 70_000, 150_000),
        [(0.5, 0.5, 0.5), (1.0, 1.0, 0.5), (1.0, 1.0, 1.0)],
    ),
    "equal-stages": (
        (50_000, 100_000, 150_000),
        [(0.5, 0.5, 0.5), (0.5, 0.5, 1.0), (1.0, 1.0, 1.0)],
    ),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, scale: float = 1.0) -> SamplingScheduler:
    """A named schedule, with end steps optionally rescaled for short runs."""
    try:
        end_steps, rates_list = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown scheduler preset {name!r}; known: {', '.join(PRESET_NAMES)}") from None
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    if scale != 1.0:
        end_steps = tuple(int(scale * e + 0.5) for e in end_steps)
        if any(b <= a for a, b in zip(end_steps, end_steps[1:])) or end_steps[0] < 1:
            raise ConfigError(f"scale {scale} collapses stage boundaries to {end_steps}")
    return make_scheduler(end_steps, rates_list)
