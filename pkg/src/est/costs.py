"""FLOPs accounting for staged subnetwork training.

All arithmetic is exact (integers and fractions), so the online
per-step ledger can be compared to the closed-form schedule total with
``==`` rather than a tolerance. Values coerce to int whenever they are
integral.

Attention and MLP matmul FLOPs per layer per step, with T tokens per
step, sequence length N, and a backward pass costed at
``backward_multiplier`` times the forward pass:

    c_mha = (1 + bm) * (8*T*d*heads*head_dim + 4*T*N*heads*head_dim)
    c_mlp = (1 + bm) * (4*T*d*mlp_inner)

These formulas are documented constants of this engine (projections +
attention scores/mixing, and the two MLP matmuls, at 2 FLOPs per
multiply-add). Embeddings, LayerNorm, and the LM head are computed
during training but excluded from the cost model; their cost is small
next to the matmuls above.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError
from .sampler import SubnetworkMask
from .scheduler import SamplingScheduler


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


def _as_int(x: Fraction):
    return int(x) if x.denominator == 1 else x


@dataclass(frozen=True)
class ModuleCosts:
    """FLOPs per layer per training step for the two sampled modules."""

    c_mha: int | Fraction
    c_mlp: int | Fraction
    n_heads: int
    n_mlp: int

    def __post_init__(self):
        if self.c_mha <= 0 or self.c_mlp <= 0:
            raise ConfigError("module costs must be positive")
        if self.n_heads < 1 or self.n_mlp < 1:
            raise ConfigError("module unit counts must be >= 1")

    @property
    def per_head(self):
        return _as_int(_exact(self.c_mha) / self.n_heads)

    @property
    def per_column(self):
        return _as_int(_exact(self.c_mlp) / self.n_mlp)


@dataclass(frozen=True)
class StageCost:
    stage: int  # 1-based
    steps: int
    rates: tuple[float, float, float]
    step_cost: int | Fraction
    total: int | Fraction


@dataclass(frozen=True)
class CostReport:
    per_stage: tuple[StageCost, ...]
    est_total: int | Fraction
    baseline_total: int | Fraction
    savings_fraction: Fraction

    def __post_init__(self):
        assert sum(s.total for s in self.per_stage) == self.est_total
        assert 0 <= self.savings_fraction < 1


def module_costs(config, tokens_per_step: int, backward_multiplier=2) -> ModuleCosts:
    """Per-layer per-step FLOPs for MHA and MLP at the given token throughput."""
    if tokens_per_step < 1:
        raise ConfigError(f"tokens_per_step must be >= 1, got {tokens_per_step}")
    t = int(tokens_per_step)
    factor = 1 + _exact(backward_multiplier)
    if factor <= 0:
        raise ConfigError(f"backward_multiplier must exceed -1, got {backward_multiplier}")
    width = config.n_heads * config.head_dim
    c_mha = factor * (8 * t * config.hidden * width + 4 * t * config.seq_len * width)
    c_mlp = factor * (4 * t * config.hidden * config.mlp_inner)
    return ModuleCosts(_as_int(c_mha), _as_int(c_mlp), config.n_heads, config.mlp_inner)


def stage_step_cost(rates, costs: ModuleCosts, n_layers: int):
    """FLOPs of a single training step at the given sampling rates."""
    p_h, p_m, p_l = rates
    for p in rates:
        if not 0.0 < p <= 1.0:
            raise ConfigError(f"rate {p} outside (0, 1]")
    v = n_layers * _exact(p_l) * (_exact(p_h) * _exact(costs.c_mha) + _exact(p_m) * _exact(costs.c_mlp))
    return _as_int(v)


def total_cost(sched: SamplingScheduler, costs: ModuleCosts, n_layers: int) -> CostReport:
    """Per-stage and total training FLOPs, and the saving vs the full model."""
    per_stage = []
    est_total = Fraction(0)
    for i, (stage, steps) in enumerate(zip(sched.stages, sched.stage_lengths())):
        step_cost = stage_step_cost(stage.rates, costs, n_layers)
        stage_total = _as_int(_exact(step_cost) * steps)
        per_stage.append(StageCost(i + 1, steps, stage.rates, step_cost, stage_total))
        est_total += stage_total
    full_step = n_layers * (_exact(costs.c_mha) + _exact(costs.c_mlp))
    baseline = _as_int(full_step * sched.total_steps)
    savings = 1 - est_total / baseline
    return CostReport(tuple(per_stage), _as_int(est_total), baseline, savings)


def measured_flops(mask: SubnetworkMask, costs: ModuleCosts):
    """FLOPs actually spent by one step under ``mask``; skipped layers cost 0.

    Summed over a run this equals ``total_cost``'s schedule total exactly
    whenever every rate*count is integral.
    """
    n_layers, n_heads, n_mlp = mask.dims
    if n_heads != costs.n_heads or n_mlp != costs.n_mlp:
        raise ConfigError(
            f"mask dims ({n_heads} heads, {n_mlp} columns) do not match "
            f"costs ({costs.n_heads}, {costs.n_mlp})"
        )
    total = Fraction(0)
    for layer in mask.layer_set:
        total += len(mask.head_sets[layer]) * _exact(costs.per_head)
        total += len(mask.mlp_sets[layer]) * _exact(costs.per_column)
    return _as_int(total)


def format_cost_report(report: CostReport) -> str:
    """Human-readable cost table; percentages with one decimal."""
    lines = []
    lines.append(f"{'stage':>5}  {'steps':>9}  {'rates (H,M,L)':>16}  {'step FLOPs':>14}  {'stage FLOPs':>14}")
    for s in report.per_stage:
        rates = ",".join(f"{p:g}" for p in s.rates)
        lines.append(
            f"{s.stage:>5}  {s.steps:>9}  {rates:>16}  {float(s.step_cost):>14.4e}  {float(s.total):>14.4e}"
        )
    lines.append(f"total:    {float(report.est_total):.4e} FLOPs")
    lines.append(f"baseline: {float(report.baseline_total):.4e} FLOPs")
    lines.append(f"savings: {float(report.savings_fraction) * 100:.1f}%")
    return "\n".join(lines)
