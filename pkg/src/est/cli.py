"""Command-line front end: train, plan, eval, hessian-trace, curves.

Exit codes: 0 success, 1 usage/config error, 2 numerical abort.
Every command is deterministic given identical inputs and seeds; no
output carries timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .costs import format_cost_report, module_costs, total_cost
from .data import load_corpus
from .diagnostics import hutchinson_trace, model_grad_fn, slope_compare, transition_drop
from .errors import ConfigError, CorpusError, NumericalError
from .model import ModelConfig
from .scheduler import PRESET_NAMES, make_scheduler, preset
from .train import LossLog, evaluate, load_model_from_checkpoint, train

# Reference architecture used by `plan --preset` for absolute FLOPs
# (the savings fraction is architecture-independent when the per-stage
# head and column rates match).
_PLAN_ARCH = ModelConfig(n_layers=12, n_heads=12, head_dim=64, hidden=768,
                         mlp_inner=3072, vocab=50257, seq_len=1024)
_PLAN_TOKENS_PER_STEP = 512 * 1024


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser():
    p = _Parser(prog="est", description="Evolving subnetwork training engine")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run training from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    t.add_argument("--quiet", action="store_true")

    pl = sub.add_parser("plan", help="FLOPs cost report for a schedule")
    src = pl.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--preset", choices=PRESET_NAMES)
    pl.add_argument("--scale", type=float, default=1.0, help="rescale preset end steps")
    pl.add_argument("--csv", default=None, help="also write the per-stage table as CSV")

    ev = sub.add_parser("eval", help="full-model loss of a checkpoint on a corpus")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--batches", type=int, default=8)

    ht = sub.add_parser("hessian-trace", help="Hutchinson trace estimate at a checkpoint")
    ht.add_argument("--ckpt", required=True)
    ht.add_argument("--data", required=True)
    ht.add_argument("--probes", type=int, default=64)
    ht.add_argument("--epsilon", type=float, default=1e-3)
    ht.add_argument("--seed", type=int, default=0)
    ht.add_argument("--batches", type=int, default=8)
    ht.add_argument("--out", default=None, help="write the estimate as CSV")

    cv = sub.add_parser("curves", help="stage-transition drops and slope comparison")
    cv.add_argument("--log", required=True)
    cv.add_argument("--log2", default=None, help="second log for slope comparison")
    cv.add_argument("--out", required=True, help="transitions CSV path")
    cv.add_argument("--window", type=int, default=50)
    cv.add_argument("--level", type=float, default=None, help="loss level for slope comparison")
    return p


def _cmd_train(args):
    cfg = load_config(args.config)
    out_dir = Path(args.out)
    echo = None if args.quiet else print
    log, final_ckpt = train(cfg, out_dir, resume=args.resume, echo=echo)
    print(f"run complete: {len(log)} steps, final loss {log.final_loss():.6f}")
    print(f"final checkpoint: {final_ckpt}")
    return 0


def _cmd_plan(args):
    if args.config:
        cfg = load_config(args.config)
        arch, sched, tokens = cfg.model, cfg.scheduler, cfg.tokens_per_step
    else:
        arch, tokens = _PLAN_ARCH, _PLAN_TOKENS_PER_STEP
        sched = preset(args.preset, args.scale)
    costs = module_costs(arch, tokens)
    report = total_cost(sched, costs, arch.n_layers)
    print(format_cost_report(report))
    if args.csv:
        lines = ["stage,steps,p_heads,p_mlp,p_layers,step_flops,stage_flops"]
        for s in report.per_stage:
            lines.append(f"{s.stage},{s.steps},{s.rates[0]!r},{s.rates[1]!r},{s.rates[2]!r},"
                         f"{float(s.step_cost)!r},{float(s.total)!r}")
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return 0


def _cmd_eval(args):
    model, cfg = load_model_from_checkpoint(args.ckpt)
    corpus = load_corpus(args.data, cfg.model.vocab)
    loss = evaluate(model, corpus, args.batches, cfg.batch_size)
    print(f"eval loss: {loss!r}")
    return 0


def _cmd_hessian_trace(args):
    model, cfg = load_model_from_checkpoint(args.ckpt)
    corpus = load_corpus(args.data, cfg.model.vocab)
    grad_fn, theta0 = model_grad_fn(model, corpus, n_batches=args.batches, batch_size=cfg.batch_size)
    est = hutchinson_trace(grad_fn, theta0, args.probes, args.epsilon, args.seed)
    print(f"hessian trace estimate: {est.value!r}")
    print(f"n_probes: {est.n_probes}")
    print(f"std_error: {est.std_error!r}")
    print(f"fd_epsilon: {est.fd_epsilon!r}")
    if args.out:
        Path(args.out).write_text(
            "value,n_probes,std_error,fd_epsilon\n"
            f"{est.value!r},{est.n_probes},{est.std_error!r},{est.fd_epsilon!r}\n"
        )
    return 0


def _transitions_scheduler(log: LossLog):
    """Rebuild stage boundaries from a log's stage column."""
    ends = []
    for prev, cur in zip(log.records, log.records[1:]):
        if cur.stage != prev.stage:
            ends.append(prev.step)
    ends.append(log.records[-1].step)
    return make_scheduler(ends, [(1.0, 1.0, 1.0)] * len(ends))


def _cmd_curves(args):
    log = LossLog.from_csv(args.log)
    sched = _transitions_scheduler(log)
    reports = transition_drop(log, sched, args.window) if len(sched.stages) > 1 else []
    lines = ["transition_step,pre_mean,post_mean,drop,window"]
    for r in reports:
        print(f"transition at step {r.transition_step}: pre {r.pre_mean:.6f} post {r.post_mean:.6f} drop {r.drop:.6f}")
        lines.append(f"{r.transition_step},{r.pre_mean!r},{r.post_mean!r},{r.drop!r},{r.window}")
    if not reports:
        print("no internal stage transitions in log")
    Path(args.out).write_text("\n".join(lines) + "\n")
    if args.log2:
        if args.level is None:
            raise ConfigError("--level is required when comparing two logs")
        log2 = LossLog.from_csv(args.log2)
        slope_a, slope_b = slope_compare(log, log2, args.level)
        print(f"slope at level {args.level}: log {slope_a!r} log2 {slope_b!r}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "plan": _cmd_plan,
    "eval": _cmd_eval,
    "hessian-trace": _cmd_hessian_trace,
    "curves": _cmd_curves,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return _COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"est: numerical abort: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CorpusError, OSError, ValueError) as exc:
        print(f"est: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
