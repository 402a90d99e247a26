"""Command-line entry point: ``mpnet-lab <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import mask_closure, probe_dependencies
from .corpora import toy_corpus
from .masks import masks_for, render
from .model import ModelConfig
from .objectives import format_info
from .permute import MODES, PermutationPlan, build_layout, sample_plan, symbolic_tokens
from .tokenizer import NUM_SPECIAL, read_corpus
from .trainer import (
    FinetuneConfig,
    TrainConfig,
    finetune,
    pretrain,
    read_config,
    read_tsv,
    split_config,
)

SEED_ENV = "MPNET_LAB_SEED"
# keys a config file may carry besides TrainConfig/ModelConfig fields
RUN_KEYS = ("corpus", "out", "log")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


def _load_run_config(args) -> tuple[TrainConfig, ModelConfig, dict]:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"--config: no such file: {path}")
    values = read_config(path)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    run = {k: values.pop(k) for k in RUN_KEYS if k in values}
    if getattr(args, "mode", None):
        values["mode"] = args.mode
    if getattr(args, "steps", None):
        values["total_steps"] = str(args.steps)
    seed = _seed(args)
    if seed is not None:
        values["seed"] = str(seed)
    try:
        cfg, model_vals = split_config(values)
        model_cfg = ModelConfig.from_dict(model_vals)
    except ValueError as exc:
        raise UsageError(f"--config {path}: {exc}") from None
    if getattr(args, "out", None):
        run["out"] = args.out
    if getattr(args, "log", None):
        run["log"] = args.log
    if "corpus" in run and not Path(run["corpus"]).is_absolute():
        run["corpus"] = str(path.parent / run["corpus"])
    return cfg, model_cfg, run


def _corpus(run: dict) -> list[str]:
    src = run.get("corpus", "toy")
    if src == "toy":
        return toy_corpus(64)
    try:
        return read_corpus(src)
    except OSError as exc:
        raise RuntimeError(f"cannot read corpus {src}: {exc}") from exc


def cmd_pretrain(args) -> int:
    cfg, model_cfg, run = _load_run_config(args)
    corpus = _corpus(run)

    def show(m):
        if m.step % args.print_every == 0 or m.step == cfg.total_steps:
            print(m.line(), flush=True)

    res = pretrain(cfg, corpus, model_cfg, out_dir=run.get("out"), resume=args.resume,
                   log_path=run.get("log"), on_step=show)
    for path in res.checkpoints[-1:]:
        print(f"checkpoint: {path}")
    return 0


def cmd_finetune(args) -> int:
    try:
        ck = ckpt_io.load(args.ckpt)
    except ckpt_io.CheckpointError as exc:
        raise RuntimeError(f"--ckpt: {exc}") from exc
    if ck.vocab is None:
        raise RuntimeError(f"--ckpt {args.ckpt}: checkpoint has no vocabulary")
    try:
        rows = read_tsv(args.data)
        dev = read_tsv(args.dev) if args.dev else None
    except OSError as exc:
        raise RuntimeError(f"cannot read data: {exc}") from exc
    seed = _seed(args) or 0
    if dev is None:
        order = np.random.default_rng(seed).permutation(len(rows))
        cut = max(1, int(round(len(rows) * (1 - args.dev_fraction))))
        train, dev = [rows[i] for i in order[:cut]], [rows[i] for i in order[cut:]]
    else:
        train = rows
    cfg = FinetuneConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=seed)
    res = finetune(ck.params, ck.model_cfg, ck.vocab, train, dev, cfg)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"labels: {' '.join(res.labels)}")
    print(f"train examples: {len(train)} dev examples: {len(dev)}")
    print(f"dev accuracy: {res.accuracy:.4f}")
    return 0


ABLATION_ROWS = (
    ("mpnet", "mpnet"),
    ("plm", "  no position compensation (plm)"),
    ("mlm_od", "  no permutation (mlm_od)"),
    ("mlm", "  no permutation, no output dependency (mlm)"),
)


def cmd_ablate(args) -> int:
    cfg, model_cfg, run = _load_run_config(args)
    corpus = _corpus(run)
    tail = max(1, cfg.total_steps // 10)
    rows = []
    for mode, label in ABLATION_ROWS:
        res = pretrain(dataclasses.replace(cfg, mode=mode), corpus, model_cfg)
        losses = [m.loss for m in res.metrics]
        rows.append((label, losses[0], float(np.mean(losses[-tail:])), format_info(mode, cfg.predict_ratio)))
    width = max(len(r[0]) for r in rows)
    print(f"{'objective'.ljust(width)}  first loss  final loss  information")
    for label, first, final, info in rows:
        print(f"{label.ljust(width)}  {first:10.4f}  {final:10.4f}  {info}")
    print(f"final loss = mean over the last {tail} steps; V = {res.model_cfg.vocab}, "
          f"ln V = {math.log(res.model_cfg.vocab):.4f}")
    return 0


def _parse_perm(text: str, n: int) -> list[int]:
    try:
        order = [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--perm must be comma-separated integers, got {text!r}") from None
    if sorted(order) != list(range(1, n + 1)):
        raise UsageError(f"--perm must be a permutation of 1..{n}, got {text!r}")
    return order


def cmd_mask_dump(args) -> int:
    n, c = args.n, args.c
    if n < 2:
        raise UsageError("--n must be at least 2")
    if not 1 <= c < n:
        raise UsageError(f"--c must be in 1..{n - 1}")
    order = _parse_perm(args.perm, n) if args.perm else list(range(1, n + 1))
    if args.mode in ("mlm", "mlm_od") and (order[:c] != sorted(order[:c]) or order[c:] != sorted(order[c:])):
        raise UsageError(f"--perm: mode {args.mode} keeps the original order, "
                         "so kept and predicted positions must each be ascending")
    plan = PermutationPlan.from_order(order, c, args.mode)
    lay = build_layout(plan, np.arange(n) + NUM_SPECIAL)
    sym = symbolic_tokens(lay)
    print("tokens: " + " ".join(sym))
    print("positions: " + " ".join(f"p{p + 1}" for p in lay.input_positions))
    print()
    print("slot  token  position  role")
    for s, (tok, pos, role) in enumerate(zip(sym, lay.input_positions, lay.roles())):
        print(f"{s:<4}  {tok:<5}  p{pos + 1:<7}  {role}")
    print()
    print(render(masks_for(plan)))
    return 0


def cmd_info(args) -> int:
    if not 0 < args.ratio < 1:
        raise UsageError("--ratio must be in (0, 1)")
    if args.n is not None and args.n < 2:
        raise UsageError("--n must be at least 2")
    print(format_info(args.mode, args.ratio, args.n))
    return 0


def cmd_probe(args) -> int:
    try:
        ck = ckpt_io.load(args.ckpt)
    except ckpt_io.CheckpointError as exc:
        raise RuntimeError(f"--ckpt: {exc}") from exc
    n = args.n
    if not 2 <= n < ck.model_cfg.max_pos:
        raise UsageError(f"--n must be in 2..{ck.model_cfg.max_pos - 1}")
    seed = _seed(args) or 0
    rng = np.random.default_rng(seed)
    ids = rng.integers(NUM_SPECIAL, ck.model_cfg.vocab, size=n)
    if args.perm:
        if args.c is None or not 1 <= args.c < n:
            raise UsageError(f"--perm needs --c in 1..{n - 1}")
        plan = PermutationPlan.from_order(_parse_perm(args.perm, n), args.c, args.mode)
    else:
        plan = sample_plan(n, [True] * n, args.ratio, args.mode, seed)
    lay = build_layout(plan, ids)
    m = masks_for(plan)
    cfg = dataclasses.replace(ck.model_cfg, dropout=0.0)
    rep = probe_dependencies(ck.params, cfg, lay, m)
    closure = mask_closure(lay, m, cfg.layers)
    print(f"mode {plan.mode}, order {','.join(str(p + 1) for p in plan.z)}, c={plan.c}")
    print(rep.to_tsv() if args.tsv else rep.render())
    same = rep == closure
    print(f"matches mask closure: {'yes' if same else 'no'}")
    return 0 if same else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpnet-lab", description="Desk-scale masked and permuted LM pre-training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed_flag(sp):
        sp.add_argument("--seed", type=int, help=f"random seed (falls back to ${SEED_ENV})")

    sp = sub.add_parser("pretrain", help="pre-train one objective")
    sp.add_argument("--config", required=True, help="key = value config file")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--steps", type=int, help="override total_steps")
    sp.add_argument("--out", help="checkpoint directory")
    sp.add_argument("--log", help="append metrics here, one line per step")
    sp.add_argument("--resume", help="continue from this checkpoint")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    sp.add_argument("--print-every", type=int, default=100)
    seed_flag(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="train a classifier head on a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="label<TAB>text rows")
    sp.add_argument("--dev", help="separate dev split; default holds out --dev-fraction of --data")
    sp.add_argument("--dev-fraction", type=float, default=0.2)
    sp.add_argument("--epochs", type=int, default=FinetuneConfig.epochs)
    sp.add_argument("--lr", type=float, default=FinetuneConfig.lr)
    sp.add_argument("--batch-size", type=int, default=FinetuneConfig.batch_size)
    seed_flag(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("ablate", help="pre-train all four objectives and compare")
    sp.add_argument("--config", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    seed_flag(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("mask-dump", help="print a layout and its attention masks")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--c", type=int, required=True, help="number of kept (non-predicted) tokens")
    sp.add_argument("--perm", help="1-based order, e.g. 1,3,5,4,6,2")
    sp.add_argument("--mode", choices=MODES, default="mpnet")
    sp.set_defaults(func=cmd_mask_dump)

    sp = sub.add_parser("info", help="share of tokens and positions each prediction sees")
    sp.add_argument("--mode", choices=MODES, required=True)
    sp.add_argument("--ratio", type=float, default=0.15)
    sp.add_argument("--n", type=int, help="sequence length (default: large-n limit)")
    sp.set_defaults(func=cmd_info)

    sp = sub.add_parser("probe", help="perturbation dependency probe on a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--mode", choices=MODES, default="mpnet")
    sp.add_argument("--ratio", type=float, default=0.5)
    sp.add_argument("--perm", help="1-based order; needs --c")
    sp.add_argument("--c", type=int)
    sp.add_argument("--tsv", action="store_true", help="tab-separated output")
    seed_flag(sp)
    sp.set_defaults(func=cmd_probe)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        msg = str(exc)
        if "usage:" not in msg:
            msg = f"{parser.format_usage()}mpnet-lab: error: {msg}"
        print(msg, file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"mpnet-lab: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
