"""Train the toy config with overrides and print probe accuracies.

    python3 scripts/sweep_toy.py --set train.learning_rate=1e-3 --set train.iterations=1500 --out runs/sweep/a
"""

import argparse
import json
import logging
from pathlib import Path

from cyclevae.config import parse_run_config, read_json
from cyclevae.experiment import run


def apply_override(data: dict, assignment: str) -> None:
    key, value = assignment.split("=", 1)
    *path, last = key.split(".")
    node = data
    for part in path:
        node = node.setdefault(part, {})
    node[last] = json.loads(value)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "toy.json"))
    parser.add_argument("--set", action="append", default=[], help="dotted.key=json_value")
    parser.add_argument("--out", required=True)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    data = read_json(args.config)
    for assignment in args.set:
        apply_override(data, assignment)
    result = run(parse_run_config(data), args.out)
    print(result.report.table(), end="")
    print(f"train {result.train_seconds:.0f}s eval {result.eval_seconds:.0f}s")


if __name__ == "__main__":
    main()
