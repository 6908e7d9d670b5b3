"""``capsseg`` command line."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from typing import List, Optional

from ..data.io import FormatError
from ..data.rotate import AXES, STANDARD_ANGLES
from .checkpoint import ConfigMismatch, ManifestMismatch
from .commands import (UnsupportedModel, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_pretrain, cmd_robustness,
                       cmd_sensitivity, cmd_train, config_for_checkpoint, eval_rows)
from .config import ConfigError, TrainConfig, load_config

COMMON = ("seed", "out", "deterministic")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", help="random seed (unsigned integer)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--deterministic", help="true/false: single-threaded, bitwise reproducible")


def _config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per config field, overriding the file."""
    g = p.add_argument_group("config overrides")
    for f in fields(TrainConfig):
        if f.name in COMMON:
            continue
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar=type(f.default).__name__.upper())


def _overrides(args) -> dict:
    names = [f.name for f in fields(TrainConfig)]
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _config(args) -> TrainConfig:
    return load_config(args.config, _overrides(args))


def _angles(text: str) -> List[float]:
    return [float(a) for a in text.split(",") if a.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsseg", description="capsule-network segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--kind", choices=("shapes2d", "blobs3d"), default="shapes2d")
    p.add_argument("--count", type=int, default=250)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--channels", type=int, default=1)

    for name, text in (("pretrain", "self-supervised pretraining of the feature extractor"),
                       ("train", "supervised training")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _config_flags(p)
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        else:
            p.add_argument("--transforms", default="all",
                           help="comma-separated transform kinds, or 'all'")

    for name, text in (("eval", "per-class metrics"), ("robustness", "rotation robustness sweep"),
                       ("sensitivity", "one-pixel shift sensitivity")):
        p = sub.add_parser(name, help=text)
        _common(p)
        _config_flags(p)
        p.add_argument("--checkpoint", required=True)
        if name == "robustness":
            p.add_argument("--angles", default=",".join(str(a) for a in STANDARD_ANGLES))
            p.add_argument("--axes", default=",".join(AXES))

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny capsule network")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, ConfigMismatch, ManifestMismatch, FormatError, UnsupportedModel, ValueError,
            OSError) as e:
        print(f"capsseg {args.command}: error: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen-data":
        seed = int(args.seed or 0)
        ds = cmd_gen_data(args.kind, args.out or "data", seed, args.count, args.size, args.classes, args.channels)
        print(f"wrote {len(ds)} samples to {args.out or 'data'}")
        return 0
    if cmd == "gradcheck":
        rep = cmd_gradcheck(int(args.seed or 0), args.out, args.tolerance)
        print(rep.table())
        print(f"max relative error {rep.max_rel_error:.3e} over {rep.checked} elements: "
              f"{'PASS' if rep.passed else 'FAIL'}")
        return 0 if rep.passed else 1
    if cmd == "train":
        run = cmd_train(_config(args), resume=args.resume, echo=True)
        ev = run.result.last_eval
        if ev is not None:
            print(f"final validation mean dice {ev.metrics.mean_dice:.4f} "
                  f"(background baseline {run.baseline.mean_dice:.4f})")
        return 0
    if cmd == "pretrain":
        res = cmd_pretrain(_config(args), args.transforms, echo=True)
        print(f"wrote {res['checkpoint']}")
        return 0
    cfg = config_for_checkpoint(args.checkpoint, args.config, _overrides(args))
    dataset = cfg.val_dataset or cfg.dataset
    if cmd == "eval":
        m = cmd_eval(args.checkpoint, dataset, cfg)
        print("\n".join(eval_rows(m)))
    elif cmd == "robustness":
        rows = cmd_robustness(args.checkpoint, dataset, cfg, _angles(args.angles),
                              [a.strip() for a in args.axes.split(",") if a.strip()])
        print("\n".join(rows))
    else:
        print("\n".join(cmd_sensitivity(args.checkpoint, dataset, cfg)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
