"""Command-line entry point: ``cyclevae <train|eval|generate|gradcheck|make-toy-data>``.

Diagnostics go to stderr; reports and tables to files or stdout.
``CYCLEVAE_THREADS`` caps the BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointFormatError, load_checkpoint
from .config import load_dataset, load_run_config, parse_dataset, read_json
from .data import IDXFormatError, SamplingError, export_toy_sprites, generate_toy_sprites
from .evaluation import evaluate
from .generation import conditional_sample, grid_filename, interpolation_grid, swap_grid, write_image
from .tensor import ShapeError
from .training import ConfigError, fit

logger = logging.getLogger("cyclevae")

MODES = ("swap", "interp", "sample")
EXPECTED_ERRORS = (ConfigError, CheckpointFormatError, IDXFormatError, SamplingError, ShapeError, OSError,
                   FloatingPointError)


class CommandError(Exception):
    """A failure that should end the command with a one-line message."""


def _thread_limit():
    value = os.environ.get("CYCLEVAE_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        threads = int(value)
        if threads < 1:
            raise ValueError
    except ValueError:
        raise CommandError(f"CYCLEVAE_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _load_params(checkpoint, config):
    params, _, _ = load_checkpoint(checkpoint, dtype=np.dtype(config.train.dtype))
    if params.config != config.model:
        raise CommandError(f"checkpoint {checkpoint} was trained with a different model config")
    return params


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out or config.output_dir)
    dataset = load_dataset(config.dataset)
    out.mkdir(parents=True, exist_ok=True)
    fit(dataset, config.model, config.train, out_dir=out, resume_from=args.resume)
    print(out / "final.cvae")
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    params = _load_params(args.checkpoint, config)
    dataset = load_dataset(config.dataset)
    report = evaluate(params, dataset, config.probe)
    out = Path(args.out or config.output_dir)
    report.write(out)
    sys.stdout.write(report.table())
    return 0


def cmd_generate(args) -> int:
    config = load_run_config(args.config)
    params = _load_params(args.checkpoint, config)
    dataset = load_dataset(config.dataset)
    test = dataset.indices("test")
    if len(test) == 0:
        raise CommandError("the dataset has no test split to draw source images from")
    rng = np.random.default_rng(args.seed)
    images = dataset.images.astype(params.dtype)
    if args.mode == "swap":
        pick = rng.choice(test, size=2 * args.count, replace=len(test) < 2 * args.count)
        grid = swap_grid(images[pick[: args.count]], images[pick[args.count :]], params)
    elif args.mode == "interp":
        a, b = rng.choice(test, size=2, replace=False)
        grid = interpolation_grid(images[a], images[b], args.steps, params)
    else:
        pick = rng.choice(test, size=args.count, replace=len(test) < args.count)
        grid, _ = conditional_sample(images[pick], args.count, params, rng)
    fmt = "pgm" if config.model.image_channels == 1 else "png"
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = write_image(grid, out / grid_filename(args.mode, args.seed, grid, fmt))
    print(path)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<22} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e}")
    worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
    failed = [r.name for r in results if not r.passed]
    print(f"worst offender: {worst.name} ({worst.max_rel_error:.3e})")
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_make_toy_data(args) -> int:
    data = read_json(args.config)
    if isinstance(data, dict) and "dataset" in data:
        data = data["dataset"]
    if isinstance(data, dict):
        data = {"kind": "toy", **data}
    spec = parse_dataset(data, where="toy config")
    if spec.kind != "toy":
        raise ConfigError("make-toy-data needs a toy dataset config")
    sprites = generate_toy_sprites(spec.toy, spec.seed)
    manifest = export_toy_sprites(sprites.dataset, args.out)
    logger.info("wrote %d sprites (%d translations clamped)", len(sprites.dataset), int(np.sum(sprites.clamped)))
    print(manifest)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclevae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: the config's output_dir)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="probe z- and s-space embeddings of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="write a swap, interpolation or sampling grid")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--count", type=int, default=10, help="source images per grid axis (swap, sample)")
    p.add_argument("--steps", type=int, default=8, help="interpolation steps per axis")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and both losses")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("make-toy-data", help="render the toy sprite set to PNG files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if getattr(args, "count", 1) < 1:
            raise CommandError("--count must be >= 1")
        with _thread_limit():
            return args.func(args)
    except (CommandError, *EXPECTED_ERRORS, ValueError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"cyclevae {args.command}: error: {message}", file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, CommandError)) else 1


if __name__ == "__main__":
    sys.exit(main())
