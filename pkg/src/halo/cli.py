"""``halo`` command line.

Every command prints one JSON document on stdout when it succeeds. On
failure it prints a single-line JSON error on stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from halo import runner
from halo.config import load_config


def _threads():
    n = os.environ.get("HALO_NUM_THREADS")
    if n:
        torch.set_num_threads(int(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="halo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run config (default: built-in desk profile)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if out:
            sp.add_argument("--out", required=True, help="run directory")

    sp = sub.add_parser("tune-freq", help="pick the low-frequency encoding by cross-view spectral gap")
    common(sp)

    sp = sub.add_parser("train", help="run pipeline stages")
    common(sp)
    sp.add_argument("--stage", default="all", choices=["lo", "ray", "hi", "vanilla", "joint", "all"])
    sp.add_argument("--resume", action="store_true", help="continue from existing stage checkpoints")

    sp = sub.add_parser("render", help="render colour and depth for a set of cameras")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--ray-checkpoint", help="ray field for depth-guided sampling")
    sp.add_argument("--poses", help="transforms-style JSON (default: the config scene's test cameras)")
    sp.add_argument("--height", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--samples", type=int)

    sp = sub.add_parser("eval", help="PSNR and SSIM of rendered PNGs against ground truth")
    sp.add_argument("--renders", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", help="run directory whose report.json receives the result")

    sp = sub.add_parser("toy2d", help="2D interpolation and extrapolation experiments")
    common(sp)
    return p


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()
    if args.command == "eval":
        return runner.cmd_eval(args.renders, args.gt, args.out)
    cfg = load_config(args.config, args.seed)
    if args.command == "tune-freq":
        return runner.cmd_tune_freq(cfg, args.out)
    if args.command == "train":
        return runner.cmd_train(cfg, args.out, args.stage, args.resume)
    if args.command == "render":
        return runner.cmd_render(args.checkpoint, args.out, args.poses, cfg if args.config or not args.poses else None,
                                 args.ray_checkpoint, args.height, args.width, args.samples)
    return runner.cmd_toy2d(cfg, args.out)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": str(exc).replace("\n", " "), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(runner._json_safe(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
