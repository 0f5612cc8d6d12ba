"""Command-line surface tying the pipeline together.

Subcommands: pretrain-ar, pretrain-mt, finetune, eval, gradcheck,
gen-data, dump-mask.  All subcommands exit 0 on success and nonzero with
the diagnostic class name on a library error; none of them ever mutates an
input dataset.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .data import gen_synthetic
from .errors import ConfigError, MalError
from .masking import causal_content_mask, cluster_block_mask
from .tensor import save_tensor
from .train import evaluate, run_stage


def _load_run(args) -> RunConfig:
    if not args.config:
        raise ConfigError(["--config is required for this subcommand"])
    run = parse_config(args.config)
    if args.seed is not None:
        run.seed = args.seed
    if args.out is not None:
        run.out = args.out
    return run


def _stage_named(run: RunConfig, kind: str, override: str | None) -> str:
    if override:
        if override not in run.stages:
            raise ConfigError([f"no stage named {override!r} in config"])
        return override
    matches = [name for name, st in run.stages.items() if st.kind == kind]
    if not matches:
        raise ConfigError([f"config defines no {kind} stage"])
    return matches[0]


def _cmd_stage(args, kind: str) -> int:
    run = _load_run(args)
    name = _stage_named(run, kind, args.stage)
    result = run_stage(run, name, ckpt_in=args.ckpt, out_dir=args.out,
                       log_every=args.log_every)
    first = result.metrics[0]["loss"]
    last = result.metrics[-1]["loss"]
    print(f"stage {name} done: {len(result.metrics)} steps, "
          f"loss {next(iter(first.values())):.5f} -> "
          f"{next(iter(last.values())):.5f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    run = _load_run(args)
    if not args.ckpt:
        raise ConfigError(["--ckpt is required for eval"])
    if not args.data:
        raise ConfigError(["--data is required for eval"])
    metrics = evaluate(run, args.ckpt, args.data, split=args.split,
                       use_ema=args.ema)
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            print(f"{key}: {value:.4f}")
        else:
            print(f"{key}: {value}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .verify import full_model_gradcheck

    report = full_model_gradcheck(seed=args.seed or 0, tol=args.tol)
    print(report.summary())
    return 0 if report.passed else 3


def _cmd_gen_data(args) -> int:
    if args.out is None:
        raise ConfigError(["--out is required for gen-data"])
    manifest = gen_synthetic(args.task, args.n, args.size,
                             args.seed if args.seed is not None else 0,
                             args.out, n_test=args.n_test,
                             channels=args.channels)
    print(f"manifest: {manifest}")
    return 0


def _cmd_dump_mask(args) -> int:
    if args.out is None:
        raise ConfigError(["--out is required for dump-mask"])
    if args.n is not None:
        mask = causal_content_mask(args.n)
    else:
        run = _load_run(args)
        mask = cluster_block_mask(run.model.build_plan())
    out = Path(args.out)
    if out.is_dir():
        out = out / "mask.tnsr"
    save_tensor(out, mask.m.astype(np.float32))
    print(f"wrote {mask.n}x{mask.n} mask to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="malvision",
        description="Cluster-masked autoregressive pretraining pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, help="run configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="output directory")

    for cmd, kind in (("pretrain-ar", "ar_pretrain"),
                      ("pretrain-mt", "multitask_pretrain"),
                      ("finetune", "finetune")):
        p = sub.add_parser(cmd, help=f"run the {kind} stage")
        common(p)
        p.add_argument("--ckpt", type=str, default=None,
                       help="checkpoint to start from")
        p.add_argument("--stage", type=str, default=None,
                       help="stage section name (defaults by kind)")
        p.add_argument("--log-every", type=int, default=0)
        p.set_defaults(func=lambda a, k=kind: _cmd_stage(a, k))

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True,
                   help="dataset manifest path")
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--ema", action="store_true",
                   help="evaluate the EMA shadow parameters")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full model")
    common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--task", choices=("ar", "depth", "seg", "classify"),
                   required=True)
    p.add_argument("--n", type=int, required=True, help="train samples")
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("dump-mask", help="write an attention mask as MALTNSR1")
    common(p)
    p.add_argument("--n", type=int, default=None,
                   help="dump a causal mask of this size instead of the "
                        "config's cluster mask")
    p.set_defaults(func=_cmd_dump_mask)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration invalid:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        return 2
    except MalError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
