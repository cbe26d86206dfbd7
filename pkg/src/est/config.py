"""Run configuration: flat ``section.key = value`` text files.

Unknown keys are errors (with line numbers), so typos cannot silently
fall back to defaults. The canonical serialization fixes the scheduler
to explicit stage lists and data paths to absolute form; its hash
identifies a run for checkpoint/resume compatibility.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .optim import LrSchedule
from .sampler import SamplerSeed
from .scheduler import SamplingScheduler, make_scheduler, preset


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    scheduler: SamplingScheduler
    batch_size: int
    sampling: bool  # False = plain training, masks ignored
    peak_lr: float
    betas: tuple[float, float]
    eps: float
    weight_decay: float
    warmup_steps: int
    decay: str
    min_lr: float
    seed: int
    train_data: str
    val_data: str | None
    checkpoint_interval: int  # 0 = final checkpoint only
    eval_interval: int  # 0 = no periodic eval
    eval_batches: int
    grad_clip: float  # 0 = no clipping

    @property
    def total_steps(self) -> int:
        return self.scheduler.total_steps

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.model.seq_len

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.peak_lr, self.warmup_steps, self.total_steps, self.decay, self.min_lr)

    def sampler_seed(self, stream_id: int) -> SamplerSeed:
        return SamplerSeed(self.seed, stream_id)


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {s!r}")


def _parse_int_list(s):
    return [int(x) for x in s.split(",") if x.strip()]


def _parse_rates_list(s):
    out = []
    for triple in s.split(","):
        triple = triple.strip()
        if not triple:
            continue
        parts = triple.split(":")
        if len(parts) != 3:
            raise ValueError(f"rate triple must be pH:pM:pL, got {triple!r}")
        out.append(tuple(float(p) for p in parts))
    return out


def _parse_float_pair(s):
    parts = [float(x) for x in s.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated floats, got {s!r}")
    return tuple(parts)


_KEYS = {
    "model.n_layers": int,
    "model.n_heads": int,
    "model.head_dim": int,
    "model.hidden": int,
    "model.mlp_inner": int,
    "model.vocab": int,
    "model.seq_len": int,
    "scheduler.preset": str,
    "scheduler.scale": float,
    "scheduler.end_steps": _parse_int_list,
    "scheduler.rates": _parse_rates_list,
    "train.batch_size": int,
    "train.sampling": _parse_bool,
    "train.checkpoint_interval": int,
    "train.eval_interval": int,
    "train.eval_batches": int,
    "train.grad_clip": float,
    "optimizer.peak_lr": float,
    "optimizer.betas": _parse_float_pair,
    "optimizer.eps": float,
    "optimizer.weight_decay": float,
    "lr.warmup_steps": int,
    "lr.decay": str,
    "lr.min_lr": float,
    "seed.seed": int,
    "data.train": str,
    "data.val": str,
}

_REQUIRED = (
    "model.n_layers", "model.n_heads", "model.head_dim", "model.hidden",
    "model.mlp_inner", "model.vocab", "model.seq_len",
    "train.batch_size", "optimizer.peak_lr", "data.train",
)


def parse_config_text(text: str, base_dir=".") -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _KEYS[key](val)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None

    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    model = ModelConfig(
        n_layers=values["model.n_layers"],
        n_heads=values["model.n_heads"],
        head_dim=values["model.head_dim"],
        hidden=values["model.hidden"],
        mlp_inner=values["model.mlp_inner"],
        vocab=values["model.vocab"],
        seq_len=values["model.seq_len"],
    )

    has_preset = "scheduler.preset" in values
    has_stages = "scheduler.end_steps" in values or "scheduler.rates" in values
    if has_preset and has_stages:
        raise ConfigError("give scheduler.preset or scheduler.end_steps/rates, not both")
    if has_preset:
        sched = preset(values["scheduler.preset"], values.get("scheduler.scale", 1.0))
    elif "scheduler.end_steps" in values and "scheduler.rates" in values:
        if "scheduler.scale" in values:
            raise ConfigError("scheduler.scale only applies to presets")
        sched = make_scheduler(values["scheduler.end_steps"], values["scheduler.rates"])
    else:
        raise ConfigError("scheduler needs either a preset or both end_steps and rates")

    base = Path(base_dir)

    def resolve(p):
        return str((base / p).resolve()) if p is not None else None

    if values["train.batch_size"] < 1:
        raise ConfigError(f"train.batch_size must be >= 1, got {values['train.batch_size']}")
    if values["optimizer.peak_lr"] <= 0:
        raise ConfigError(f"optimizer.peak_lr must be positive, got {values['optimizer.peak_lr']}")
    for key in ("train.checkpoint_interval", "train.eval_interval"):
        if values.get(key, 0) < 0:
            raise ConfigError(f"{key} must be >= 0, got {values[key]}")
    if values.get("train.eval_batches", 8) < 1:
        raise ConfigError("train.eval_batches must be >= 1")
    if values.get("train.grad_clip", 1.0) < 0:
        raise ConfigError("train.grad_clip must be >= 0 (0 disables clipping)")

    return TrainConfig(
        model=model,
        scheduler=sched,
        batch_size=values["train.batch_size"],
        sampling=values.get("train.sampling", True),
        peak_lr=values["optimizer.peak_lr"],
        betas=values.get("optimizer.betas", (0.9, 0.95)),
        eps=values.get("optimizer.eps", 1e-8),
        weight_decay=values.get("optimizer.weight_decay", 0.0),
        warmup_steps=values.get("lr.warmup_steps", 0),
        decay=values.get("lr.decay", "cosine"),
        min_lr=values.get("lr.min_lr", 0.0),
        seed=values.get("seed.seed", 0),
        train_data=resolve(values["data.train"]),
        val_data=resolve(values.get("data.val")),
        checkpoint_interval=values.get("train.checkpoint_interval", 0),
        eval_interval=values.get("train.eval_interval", 0),
        eval_batches=values.get("train.eval_batches", 8),
        grad_clip=values.get("train.grad_clip", 1.0),
    )


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base_dir=path.parent)


def canonical_text(cfg: TrainConfig) -> str:
    """Resolved, sorted key=value form; the basis of the config hash."""
    m = cfg.model
    lines = {
        "model.n_layers": m.n_layers,
        "model.n_heads": m.n_heads,
        "model.head_dim": m.head_dim,
        "model.hidden": m.hidden,
        "model.mlp_inner": m.mlp_inner,
        "model.vocab": m.vocab,
        "model.seq_len": m.seq_len,
        "scheduler.end_steps": ", ".join(str(s.end_step) for s in cfg.scheduler.stages),
        "scheduler.rates": ", ".join(":".join(repr(p) for p in s.rates) for s in cfg.scheduler.stages),
        "train.batch_size": cfg.batch_size,
        "train.sampling": "on" if cfg.sampling else "off",
        "train.checkpoint_interval": cfg.checkpoint_interval,
        "train.eval_interval": cfg.eval_interval,
        "train.eval_batches": cfg.eval_batches,
        "train.grad_clip": repr(cfg.grad_clip),
        "optimizer.peak_lr": repr(cfg.peak_lr),
        "optimizer.betas": f"{cfg.betas[0]!r}, {cfg.betas[1]!r}",
        "optimizer.eps": repr(cfg.eps),
        "optimizer.weight_decay": repr(cfg.weight_decay),
        "lr.warmup_steps": cfg.warmup_steps,
        "lr.decay": cfg.decay,
        "lr.min_lr": repr(cfg.min_lr),
        "seed.seed": cfg.seed,
        "data.train": cfg.train_data,
    }
    if cfg.val_data is not None:
        lines["data.val"] = cfg.val_data
    return "\n".join(f"{k} = {lines[k]}" for k in sorted(lines)) + "\n"


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()
