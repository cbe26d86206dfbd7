"""Evolving subnetwork training for small decoder-only transformers.

Trains a transformer by sampling a random subnetwork (attention heads,
MLP columns, whole layers) each step, growing the sampled fraction over
a staged schedule, with exact FLOPs accounting and training-dynamics
diagnostics.
"""

from .config import TrainConfig, load_config, parse_config_text
from .core import Tape, Tensor, backward, set_dtype, using_dtype
from .costs import CostReport, ModuleCosts, measured_flops, module_costs, stage_step_cost, total_cost
from .model import Model, ModelConfig
from .sampler import SamplerSeed, SubnetworkMask, full_mask, round_to_count, sample_mask, sample_subset, start_mask_stream
from .scheduler import SamplingScheduler, make_scheduler, preset, validate
from .train import LossLog, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CostReport", "LossLog", "Model", "ModelConfig", "ModuleCosts",
    "SamplerSeed", "SamplingScheduler", "SubnetworkMask", "Tape", "Tensor",
    "TrainConfig", "backward", "evaluate", "full_mask", "load_config",
    "make_scheduler", "measured_flops", "module_costs", "parse_config_text",
    "preset", "round_to_count", "sample_mask", "sample_subset", "set_dtype",
    "stage_step_cost", "start_mask_stream", "total_cost", "train", "using_dtype",
    "validate",
]
