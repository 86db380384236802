"""Train-then-probe runs shared by the scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, load_dataset
from .evaluation import EvalReport, evaluate
from .losses import LossWeights
from .model import ModelParams
from .training import TrainLog, fit

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    params: ModelParams
    log: TrainLog
    report: EvalReport
    train_seconds: float
    eval_seconds: float
    out_dir: Path


def with_reverse_weight(config: RunConfig, weight: float, output_dir: str | None = None) -> RunConfig:
    """Same run with a different reverse-cycle weight (0 disables the reverse cycle)."""
    weights = dataclasses.replace(config.train.loss_weights, reverse_weight=weight)
    train = dataclasses.replace(config.train, loss_weights=weights)
    return dataclasses.replace(config, train=train, output_dir=output_dir or config.output_dir)


def run(config: RunConfig, out_dir=None) -> RunResult:
    out = Path(out_dir or config.output_dir)
    dataset = load_dataset(config.dataset)
    start = time.perf_counter()
    params, log = fit(dataset, config.model, config.train, out_dir=out)
    train_seconds = time.perf_counter() - start
    start = time.perf_counter()
    report = evaluate(params, dataset, config.probe)
    eval_seconds = time.perf_counter() - start
    report.write(out)
    (out / "timing.json").write_text(json.dumps({"train_seconds": train_seconds, "eval_seconds": eval_seconds}))
    logger.info("run %s: %s", out, report.accuracies())
    return RunResult(params, log, report, train_seconds, eval_seconds, out)


__all__ = ["RunResult", "run", "with_reverse_weight", "LossWeights"]
