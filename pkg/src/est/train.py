"""The training loop: batches in, masks applied, losses and FLOPs logged.

A run directory is self-describing: canonical config copy, per-step
loss log, checkpoints, and a summary. Checkpoints restore parameters,
optimizer moments, and the per-step counter-based RNG derivation, so a
resumed run reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import core
from .config import TrainConfig, canonical_text, config_hash
from .costs import ModuleCosts, measured_flops, module_costs
from .data import eval_windows, load_corpus, next_batch
from .errors import ConfigError, NumericalError
from .model import Model
from .optim import AdamW, clip_grad_norm, lr_at
from .sampler import (
    RNG_ALGORITHM,
    STREAM_DATA,
    STREAM_INIT,
    STREAM_SAMPLER,
    start_mask_stream,
    step_rng,
)

CHECKPOINT_FORMAT = "est-checkpoint-1"


@dataclass(frozen=True)
class LogRecord:
    step: int
    stage: int
    loss: float
    lr: float
    cum_flops: int | float


class LossLog:
    """Append-only per-step records with strictly increasing steps."""

    HEADER = "step,stage,loss,lr,cum_flops"

    def __init__(self, records=()):
        self.records = list(records)

    def append(self, step, stage, loss, lr, cum_flops):
        if self.records and step <= self.records[-1].step:
            raise ValueError(f"step {step} not after {self.records[-1].step}")
        if self.records and cum_flops < self.records[-1].cum_flops:
            raise ValueError("cumulative FLOPs must be non-decreasing")
        self.records.append(LogRecord(step, stage, loss, lr, cum_flops))

    def __len__(self):
        return len(self.records)

    def final_loss(self):
        return self.records[-1].loss if self.records else math.nan

    def steps(self):
        return np.array([r.step for r in self.records])

    def losses(self):
        return np.array([r.loss for r in self.records])

    def to_csv(self, path):
        lines = [self.HEADER]
        for r in self.records:
            flops = str(r.cum_flops) if isinstance(r.cum_flops, int) else repr(float(r.cum_flops))
            lines.append(f"{r.step},{r.stage},{r.loss!r},{r.lr!r},{flops}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        text = Path(path).read_text().strip().splitlines()
        if not text or text[0] != cls.HEADER:
            raise ValueError(f"{path} is not a loss log (bad header)")
        log = cls()
        for line in text[1:]:
            step, stage, loss, lr, flops = line.split(",")
            flops_val = int(flops) if "." not in flops and "e" not in flops else float(flops)
            log.append(int(step), int(stage), float(loss), float(lr), flops_val)
        return log


# ---------------------------------------------------------------------------
# Checkpoints


def _no_decay_names(model: Model):
    return {name for name, _ in model.named_parameters()
            if "ln" in name.split(".")[-1] or name in ("wte", "wpe")}


def _float_code(dtype):
    return "<f4" if np.dtype(dtype) == np.float32 else "<f8"


def save_checkpoint(ckpt_dir, cfg: TrainConfig, model: Model, opt: AdamW, step: int, cum_flops):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    code = _float_code(model.dtype)
    params = model.get_flat().astype(code)
    params.tofile(ckpt_dir / "params.bin")
    opt.moments_flat().astype(code).tofile(ckpt_dir / "moments.bin")
    (ckpt_dir / "config.est").write_text(canonical_text(cfg))
    flops_field = str(cum_flops) if isinstance(cum_flops, int) else repr(float(cum_flops))
    manifest = [
        f"format = {CHECKPOINT_FORMAT}",
        f"config_hash = {config_hash(cfg)}",
        f"step = {step}",
        f"cum_flops = {flops_field}",
        f"adam_steps = {opt.step_count}",
        f"dtype = {code}",
        f"n_params = {params.size}",
        f"rng.algorithm = {RNG_ALGORITHM}",
        f"rng.sampler.key = {cfg.seed}:{STREAM_SAMPLER}",
        f"rng.sampler.counter = {step + 1}",
        f"rng.data.key = {cfg.seed}:{STREAM_DATA}",
        f"rng.data.counter = {step + 1}",
    ]
    (ckpt_dir / "manifest").write_text("\n".join(manifest) + "\n")
    return ckpt_dir


def read_manifest(ckpt_dir):
    path = Path(ckpt_dir) / "manifest"
    if not path.is_file():
        raise ConfigError(f"no checkpoint manifest at {path}")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    if out.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} has unsupported format {out.get('format')!r}")
    return out


def load_checkpoint(ckpt_dir, cfg: TrainConfig, model: Model, opt: AdamW | None = None):
    """Restore model (and optionally optimizer) state; returns the manifest."""
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    if manifest["config_hash"] != config_hash(cfg):
        raise ConfigError(
            f"checkpoint {ckpt_dir} was written by a different configuration "
            f"(hash {manifest['config_hash'][:12]}... vs {config_hash(cfg)[:12]}...)"
        )
    code = manifest["dtype"]
    params = np.fromfile(ckpt_dir / "params.bin", dtype=code)
    model.set_flat(params)
    if opt is not None:
        opt.set_moments_flat(np.fromfile(ckpt_dir / "moments.bin", dtype=code))
        opt.step_count = int(manifest["adam_steps"])
    return manifest


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(model: Model, corpus: np.ndarray, n_batches: int, batch_size: int = 8) -> float:
    """Mean full-model cross entropy over fixed evenly spaced windows.

    Evaluation never samples: the rate normalization keeps sampled and
    complete outputs matched in expectation, and the complete model is
    the artifact being trained.
    """
    inputs, targets = eval_windows(corpus, n_batches * batch_size, model.config.seq_len)
    total = 0.0
    for i in range(n_batches):
        sl = slice(i * batch_size, (i + 1) * batch_size)
        loss = model.loss(inputs[sl], targets[sl])  # no tape: values only
        total += float(loss.data)
    return total / n_batches


# ---------------------------------------------------------------------------
# Training


def full_step_flops(costs: ModuleCosts, n_layers: int):
    v = n_layers * (Fraction(costs.c_mha) + Fraction(costs.c_mlp))
    return int(v) if v.denominator == 1 else v


def train(cfg: TrainConfig, out_dir, resume=None, echo=None):
    """Run the configured training; returns (LossLog, final checkpoint path).

    ``resume`` points at a checkpoint directory from the same config.
    ``echo``, if given, receives progress strings (no timestamps).
    """
    out_dir = Path(out_dir)
    ckpt_root = out_dir / "checkpoints"
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_root.mkdir(exist_ok=True)
    (out_dir / "config.est").write_text(canonical_text(cfg))
    log_path = out_dir / "log.csv"

    corpus = load_corpus(cfg.train_data, cfg.model.vocab)
    val_corpus = load_corpus(cfg.val_data, cfg.model.vocab) if cfg.val_data else None
    model = Model(cfg.model, init_rng=step_rng(cfg.sampler_seed(STREAM_INIT), 0))
    opt = AdamW(
        model.named_parameters(),
        lr=cfg.peak_lr,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        no_decay=_no_decay_names(model),
    )
    costs = module_costs(cfg.model, cfg.tokens_per_step)
    schedule = cfg.lr_schedule()
    sched = cfg.scheduler

    start_step = 1
    cum_flops: int | Fraction = 0
    log = LossLog()
    if resume is not None:
        manifest = load_checkpoint(resume, cfg, model, opt)
        start_step = int(manifest["step"]) + 1
        raw = manifest["cum_flops"]
        cum_flops = int(raw) if "." not in raw and "e" not in raw else float(raw)
        prior = Path(resume).parent.parent / "log.csv" if (Path(resume).parent.parent / "log.csv").is_file() else None
        if prior:
            for r in LossLog.from_csv(prior).records:
                if r.step < start_step:
                    log.records.append(r)

    if echo:
        from .scheduler import validate
        for warning in validate(sched, cfg.total_steps):
            echo(f"warning: {warning}")

    full_flops = full_step_flops(costs, cfg.model.n_layers)
    echo_every = max(1, cfg.total_steps // 20)
    data_seed = cfg.sampler_seed(STREAM_DATA)
    stream = None
    if cfg.sampling:
        stream = start_mask_stream(sched, cfg.model, cfg.sampler_seed(STREAM_SAMPLER), start_step=start_step)
    try:
        for step in range(start_step, cfg.total_steps + 1):
            mask = stream.get() if stream is not None else None
            inputs, targets = next_batch(corpus, cfg.batch_size, cfg.model.seq_len, step_rng(data_seed, step))
            try:
                with core.Tape():
                    loss_t = model.loss(inputs, targets, mask)
                loss = float(loss_t.data)
                if not math.isfinite(loss):
                    raise NumericalError(f"non-finite loss {loss}")
                core.backward(loss_t)
                if cfg.grad_clip > 0:
                    clip_grad_norm(model.parameters(), cfg.grad_clip)
                lr = lr_at(schedule, step)
                opt.step(lr)
            except NumericalError as exc:
                log.to_csv(log_path)  # abort: keep the log and last checkpoint
                raise NumericalError(f"aborted at step {step}: {exc}") from exc
            finally:
                opt.zero_grads()

            step_flops = measured_flops(mask, costs) if mask is not None else full_flops
            cum_flops = cum_flops + step_flops
            stage = sched.stage_index_at(step)
            log.append(step, stage, loss, lr, cum_flops)

            if echo and (step % echo_every == 0 or step == cfg.total_steps):
                echo(f"step {step}/{cfg.total_steps} stage {stage} loss {loss:.4f}")
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0 and step < cfg.total_steps:
                save_checkpoint(ckpt_root / f"step{step:08d}", cfg, model, opt, step, cum_flops)
                log.to_csv(log_path)
            if cfg.eval_interval and val_corpus is not None and step % cfg.eval_interval == 0 and echo:
                echo(f"eval step {step} loss {evaluate(model, val_corpus, cfg.eval_batches, cfg.batch_size):.4f}")
    finally:
        if stream is not None:
            stream.close()

    final_dir = save_checkpoint(ckpt_root / "final", cfg, model, opt, cfg.total_steps, cum_flops)
    log.to_csv(log_path)

    baseline = full_flops * cfg.total_steps
    savings = 1 - Fraction(cum_flops) / Fraction(baseline)
    eval_loss = evaluate(model, val_corpus, cfg.eval_batches, cfg.batch_size) if val_corpus is not None else None
    summary = [
        f"final_train_loss = {log.final_loss()!r}",
        f"total_flops = {cum_flops}",
        f"baseline_flops = {baseline}",
        f"savings_fraction = {float(savings)!r}",
    ]
    if eval_loss is not None:
        summary.append(f"final_eval_loss = {eval_loss!r}")
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")
    return log, final_dir


def load_model_from_checkpoint(ckpt_dir):
    """Rebuild a model from a checkpoint's embedded canonical config."""
    from .config import parse_config_text

    ckpt_dir = Path(ckpt_dir)
    cfg_path = ckpt_dir / "config.est"
    if not cfg_path.is_file():
        raise ConfigError(f"checkpoint {ckpt_dir} has no embedded config")
    cfg = parse_config_text(cfg_path.read_text(), base_dir=ckpt_dir)
    model = Model(cfg.model)
    load_checkpoint(ckpt_dir, cfg, model)
    return model, cfg
