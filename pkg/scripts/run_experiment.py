"""Train one config, probe it, and render swap, interpolation and sample grids.

    python3 scripts/run_experiment.py configs/toy.json
    python3 scripts/run_experiment.py configs/mnist.json --out runs/mnist
"""

import argparse
import logging
from pathlib import Path

from cyclevae import cli
from cyclevae.config import load_run_config
from cyclevae.experiment import run


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--out", help="output directory (default: the config's output_dir)")
    parser.add_argument("--figure-seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    config = load_run_config(args.config)
    result = run(config, args.out)
    print(result.report.table())
    print(f"train {result.train_seconds:.0f}s eval {result.eval_seconds:.0f}s")
    checkpoint = Path(result.out_dir) / "final.cvae"
    for mode in ("swap", "interp", "sample"):
        cli.main(["generate", "--config", args.config, "--checkpoint", str(checkpoint), "--mode", mode,
                  "--seed", str(args.figure_seed), "--out", str(result.out_dir)])


if __name__ == "__main__":
    main()
