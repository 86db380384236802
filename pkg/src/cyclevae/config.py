"""Run configuration: strict JSON with mandatory seeds.

Schema (unknown keys are rejected everywhere)::

    {
      "output_dir": "runs/toy",
      "dataset": {
        "kind": "toy",
        "seed": 1,
        "toy": {<ToySpriteConfig fields>},
        "split": {"fractions": [0.8, 0.1, 0.1], "seed": 2, "disjoint_identities": false}
      },
      # or
      "dataset": {
        "kind": "mnist", "seed": 3,
        "train_images": "...", "train_labels": "...",
        "test_images": "...", "test_labels": "...",
        "train_subset": 10000, "test_subset": null
      },
      "model": {<ModelConfig fields>},
      "train": {<TrainConfig fields>, "seed": 0, "loss_weights": {"kl_weight": 1, "reverse_weight": 1}},
      "probe": {<ProbeConfig fields>, "seed": 0}
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    LabeledImageDataset,
    ToySpriteConfig,
    concat_datasets,
    generate_toy_sprites,
    load_mnist_idx,
    split_dataset,
)
from .evaluation import ProbeConfig
from .losses import LossWeights
from .model import ModelConfig
from .training import ConfigError, TrainConfig


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = [n for n, f in fields.items() if n not in data
               and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {', '.join(missing)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    disjoint_identities: bool = False


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    seed: int
    toy: ToySpriteConfig | None = None
    split: SplitSpec | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None


def parse_dataset(data, where: str = "dataset", base: Path | None = None) -> DatasetSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    data = dict(data)
    kind = data.get("kind")
    if kind == "toy":
        data["toy"] = _build(ToySpriteConfig, data.get("toy", {}), f"{where}.toy")
        data["split"] = _build(SplitSpec, data.get("split", {"seed": data.get("seed", 0)}), f"{where}.split")
        for key in ("train_images", "train_labels", "test_images", "test_labels", "train_subset", "test_subset"):
            if key in data:
                raise ConfigError(f"{where}: key {key} is not valid for toy datasets")
    elif kind == "mnist":
        for key in ("toy", "split"):
            if key in data:
                raise ConfigError(f"{where}: key {key} is not valid for mnist datasets")
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not data.get(key):
                raise ConfigError(f"{where}: mnist datasets need {key}")
            if base is not None:
                data[key] = str((base / data[key]) if not Path(data[key]).is_absolute() else Path(data[key]))
    else:
        raise ConfigError(f"{where}.kind must be 'toy' or 'mnist', got {kind!r}")
    return _build(DatasetSpec, data, where)


def load_dataset(spec: DatasetSpec) -> LabeledImageDataset:
    if spec.kind == "toy":
        dataset = generate_toy_sprites(spec.toy, spec.seed).dataset
        return split_dataset(dataset, spec.split.fractions, spec.split.seed, spec.split.disjoint_identities)
    rng = np.random.default_rng(spec.seed)
    train = load_mnist_idx(spec.train_images, spec.train_labels, "train")
    test = load_mnist_idx(spec.test_images, spec.test_labels, "test")
    parts = []
    for part, size in ((train, spec.train_subset), (test, spec.test_subset)):
        if size is not None and size < len(part):
            keep = np.sort(rng.choice(len(part), size=size, replace=False))
            part = LabeledImageDataset(part.images[keep], part.labels[keep], part.split[keep])
        parts.append(part)
    return concat_datasets(*parts)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig
    probe: ProbeConfig
    output_dir: str = "runs/default"


def parse_run_config(data, base: Path | None = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    allowed = {"dataset", "model", "train", "probe", "output_dir"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    for key in ("dataset", "train", "probe"):
        if key not in data:
            raise ConfigError(f"config: missing required section {key}")
    dataset = parse_dataset(data["dataset"], base=base)
    model = _build(ModelConfig, data.get("model", {}), "model")
    train = dict(data["train"]) if isinstance(data["train"], dict) else data["train"]
    if isinstance(train, dict) and "loss_weights" in train:
        train["loss_weights"] = _build(LossWeights, train["loss_weights"], "train.loss_weights")
    train = _build(TrainConfig, train, "train")
    probe = _build(ProbeConfig, data["probe"], "probe")
    if dataset.kind == "toy" and (model.image_size != dataset.toy.image_size or model.image_channels != 3):
        raise ConfigError(
            f"model geometry {model.image_channels}x{model.image_size} does not match toy sprites "
            f"3x{dataset.toy.image_size}"
        )
    if dataset.kind == "mnist" and (model.image_size != 28 or model.image_channels != 1):
        raise ConfigError("model geometry must be 1x28 for MNIST")
    output_dir = data.get("output_dir", "runs/default")
    if base is not None and not Path(output_dir).is_absolute():
        output_dir = str(base / output_dir)
    return RunConfig(dataset, model, train, probe, output_dir)


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_run_config(path) -> RunConfig:
    """Read a run config; relative paths inside it resolve against the working directory."""
    return parse_run_config(read_json(path), base=None)
