"""Command-line interface: data generation, both training stages, restore,
evaluation, and the analytic selfcheck.

Exit codes: 0 success, 1 usage error, 2 runtime/data error, 3 invariant
failure. Every run prints its resolved configuration and seed first.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "CLEARSKY_DATA_ROOT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_INVARIANT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _print_config(command: str, args: dict) -> None:
    print(f"[{command}] resolved config: " + json.dumps(args, sort_keys=True, default=str))


def _resolve_data(path: str | None) -> str:
    if path:
        return path
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return env
    raise ValueError(f"no data directory given (flag --data or ${DATA_ROOT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clearsky", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired weather dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=0.8)

    p = sub.add_parser("train-prompts", help="stage 1: align weather prompts")
    p.add_argument("--data")
    p.add_argument("--iters", type=int, default=8000)
    p.add_argument("--lr", type=float, default=5e-6)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--encoder-seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--image-size", type=int, default=0, help="resize images; 0 keeps native size")
    p.add_argument("--augment", type=int, default=4, help="augmented variants per image")

    p = sub.add_parser("train", help="stage 2: train the diffusion restorer")
    p.add_argument("--data")
    p.add_argument("--prompts", required=True)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=8e-5)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--lambda", dest="lambda_balance", type=float, default=0.01)
    p.add_argument("--n-experts", type=int, default=4)
    p.add_argument("--p", dest="route_threshold", type=float, default=0.4)
    p.add_argument("--ema", type=float, default=0.995)
    p.add_argument("--ablate", default="", help="comma list from {wpg,desm,balance} to disable")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--steps", dest="total_steps", type=int, default=100)

    p = sub.add_parser("restore", help="restore one degraded image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")

    p = sub.add_parser("eval", help="score a checkpoint over a manifest split")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--report", default="")
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw-weights", action="store_true")

    sub.add_parser("selfcheck", help="run the analytic invariant suite")
    return parser


def cmd_gen_data(args) -> int:
    from .weathergen import make_dataset

    manifest = make_dataset(args.out, per_class=args.per_class, size=args.size,
                            seed=args.seed, split_ratio=args.split_ratio)
    print(f"wrote {len(manifest.records)} pairs under {args.out}")
    return EXIT_OK


def cmd_train_prompts(args) -> int:
    from .embedding import FrozenEncoders, init_prompts, save_prompt_bank
    from .prompts import Stage1Config, train_prompts
    from .weathergen import DatasetManifest

    manifest = DatasetManifest.load(_resolve_data(args.data))
    dataset = []
    for rec in manifest.split("train"):
        _, degraded, label = manifest.load_pair(rec)
        dataset.append((degraded, label))
    cfg = Stage1Config(
        iterations=args.iters, lr=args.lr, batch_size=args.batch,
        image_size=args.image_size or None, temperature=args.temperature,
        n_augment=args.augment, seed=args.seed,
    )
    enc = FrozenEncoders(seed=args.encoder_seed)
    bank = init_prompts(seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trained, history = train_prompts(cfg, enc, bank, dataset, log_path=str(out) + ".log")
    save_prompt_bank(out, trained, extra_meta={"encoder_seed": args.encoder_seed})
    final = history[-1]["loss"] if history else float("nan")
    print(f"saved prompt bank to {out} (final loss {final:.4f})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .embedding import FrozenEncoders, load_prompt_bank
    from .pipeline import Stage2Config, Stage2Trainer
    from .weathergen import DatasetManifest

    ablate = {token.strip() for token in args.ablate.split(",") if token.strip()}
    unknown = ablate - {"wpg", "desm", "balance"}
    if unknown:
        raise ValueError(f"unknown ablation targets: {sorted(unknown)}")
    manifest = DatasetManifest.load(_resolve_data(args.data))
    bank = load_prompt_bank(args.prompts)
    cfg = Stage2Config(
        iterations=args.iters, lr=args.lr, batch_size=args.batch,
        lambda_balance=args.lambda_balance, ema_decay=args.ema,
        crop_size=args.crop, seed=args.seed, total_steps=args.total_steps,
        n_experts=args.n_experts, route_threshold=args.route_threshold,
        wpg_on="wpg" not in ablate, desm_on="desm" not in ablate,
        balance_on="balance" not in ablate,
    )
    enc = FrozenEncoders(seed=cfg.encoder_seed)
    trainer = Stage2Trainer(cfg, manifest, bank, enc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_file(out / "config.txt")
    print(f"model parameters: {trainer.model.parameter_count}")
    history = trainer.train(log_path=out / "train.log")
    trainer.save_checkpoint(out / "checkpoint.npz")
    final = history[-1]["total"] if history else float("nan")
    print(f"saved checkpoint to {out / 'checkpoint.npz'} (final loss {final:.4f})")
    return EXIT_OK


def cmd_restore(args) -> int:
    import torch

    from .evalkit import restore_image
    from .pipeline import load_model_for_eval
    from .weathergen import load_image, save_image

    model, ema, bank, enc, schedule, cfg = load_model_for_eval(args.model)
    if not args.raw_weights:
        ema.copy_to(model)
    model.eval()
    try:
        degraded = load_image(args.input)
    except Exception as exc:
        raise ValueError(f"cannot read image {args.input}: {exc}") from exc
    with torch.no_grad():
        restored = restore_image(model, schedule, bank, enc, degraded,
                                 steps=args.steps, seed=args.seed)
    save_image(args.output, np.clip(restored, 0.0, 1.0))
    print(f"restored {args.input} -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate
    from .pipeline import load_model_for_eval
    from .weathergen import DatasetManifest

    model, ema, bank, enc, schedule, cfg = load_model_for_eval(args.model)
    manifest = DatasetManifest.load(_resolve_data(args.data))
    report = evaluate(
        model, ema, schedule, manifest, split=args.split, steps=args.steps,
        strategy=cfg.sample_strategy, use_ema=not args.raw_weights, seed=args.seed,
        bank=bank, enc=enc, report_path=args.report or None,
        config_digest_src=cfg.to_dict(),
    )
    print(report.to_json())
    return EXIT_OK


def cmd_selfcheck(_args) -> int:
    from .selfcheck import run_selfcheck

    return EXIT_OK if run_selfcheck() else EXIT_INVARIANT


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-prompts": cmd_train_prompts,
    "train": cmd_train,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _print_config(args.command, {k: v for k, v in vars(args).items() if k != "command"})
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
