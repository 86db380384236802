"""Probe classifiers on z- and s-space embeddings, plus a PCA projection for inspection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import LabeledImageDataset
from .model import ModelParams, encode
from .tensor import Tensor, backward, cross_entropy, linear, no_grad, relu
from .training import ConfigError, OptimizerState, adam_update

SOURCES = ("z_space", "s_space")


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    source: str


def extract_embeddings(params: ModelParams, images: np.ndarray, labels: np.ndarray, source: str,
                       batch_size: int = 256) -> EmbeddingMatrix:
    """Posterior means (``z_space``) or specified codes (``s_space``), row i for image i."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            code = encode(images[start : start + batch_size], params)
            rows.append((code.mu if source == "z_space" else code.s).data)
    dim = params.config.z_dim if source == "z_space" else params.config.s_dim
    vectors = np.concatenate(rows) if rows else np.zeros((0, dim))
    return EmbeddingMatrix(vectors.astype(np.float64), np.asarray(labels, dtype=np.int64), source)


def dataset_embeddings(params: ModelParams, dataset: LabeledImageDataset, source: str,
                       split: str | None = None) -> EmbeddingMatrix:
    idx = dataset.indices(split)
    return extract_embeddings(params, dataset.images[idx], dataset.labels[idx], source)


# ---------------------------------------------------------------- probe


@dataclass(frozen=True)
class ProbeConfig:
    seed: int
    hidden_units: int = 256
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 64

    def __post_init__(self):
        if self.hidden_units < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("probe hidden_units, epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("probe learning_rate must be > 0")


@dataclass
class Probe:
    """Two-layer classifier: input -> hidden (ReLU) -> logits, on standardised inputs."""

    mean: np.ndarray
    scale: np.ndarray
    weights: dict[str, np.ndarray]

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        with no_grad():
            return _forward(self.weights, (vectors - self.mean) / self.scale).data

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        if vectors.ndim != 2 or vectors.shape[1] != self.mean.shape[0]:
            raise ValueError(f"probe expects {self.mean.shape[0]}-dim embeddings, got {vectors.shape}")
        # argmax returns the lowest index among ties
        return np.argmax(self.logits(vectors), axis=1)


def _forward(weights: dict, x) -> Tensor:
    h = relu(linear(x, weights["w1"], weights["b1"]))
    return linear(h, weights["w2"], weights["b2"])


def train_probe(embeddings: EmbeddingMatrix, config: ProbeConfig) -> Probe:
    x, y = embeddings.vectors, embeddings.labels
    classes = np.unique(y)
    if len(classes) < 2:
        raise ConfigError("probe training needs at least two classes")
    n, d = x.shape
    k = int(y.max()) + 1
    rng = np.random.default_rng(config.seed)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x - mean) / scale
    b1, b2 = np.sqrt(6.0 / d), np.sqrt(6.0 / config.hidden_units)
    weights = {
        "w1": rng.uniform(-b1, b1, (config.hidden_units, d)),
        "b1": np.zeros(config.hidden_units),
        "w2": rng.uniform(-b2, b2, (k, config.hidden_units)),
        "b2": np.zeros(k),
    }
    state = OptimizerState.zeros(weights)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            leaves = {name: Tensor(w, requires_grad=True) for name, w in weights.items()}
            loss = cross_entropy(_forward(leaves, xs[batch]), y[batch])
            backward(loss)
            weights, state = adam_update(weights, {nm: t.grad for nm, t in leaves.items()}, state,
                                         config.learning_rate)
    return Probe(mean, scale, weights)


def probe_accuracy(probe: Probe, embeddings: EmbeddingMatrix) -> float:
    if len(embeddings.labels) == 0:
        return float("nan")
    return float(np.mean(probe.predict(embeddings.vectors) == embeddings.labels))


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    z_dim: int
    s_dim: int
    z_train_acc: float
    z_test_acc: float
    s_train_acc: float
    s_test_acc: float
    probe: dict

    ACCURACY_FIELDS = ("z_train_acc", "z_test_acc", "s_train_acc", "s_test_acc")

    def accuracies(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in self.ACCURACY_FIELDS}

    def table(self) -> str:
        """Text table with the column names of the paper's results table (accuracies in %)."""
        head = ["z dim", "s dim", "z train acc.", "z test acc.", "s train acc.", "s test acc."]
        vals = [str(self.z_dim), str(self.s_dim)] + [f"{100 * v:.2f}" for v in self.accuracies().values()]
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        line = lambda cells: "| " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |"
        rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
        return "\n".join([line(head), rule, line(vals)]) + "\n"

    def key_values(self) -> str:
        lines = [f"{k}={json.dumps(v)}" for k, v in asdict(self).items() if k != "probe"]
        lines += [f"probe.{k}={json.dumps(v)}" for k, v in self.probe.items()]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "eval_report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table, kv = out / f"{stem}.txt", out / f"{stem}.kv"
        table.write_text(self.table())
        kv.write_text(self.key_values())
        return table, kv


def evaluate(params: ModelParams, dataset: LabeledImageDataset, probe_config: ProbeConfig,
             train_split: str = "train", test_split: str = "test") -> EvalReport:
    """Train one probe per latent space on ``train_split`` embeddings, score both splits."""
    accs = {}
    for source, prefix in (("z_space", "z"), ("s_space", "s")):
        train = dataset_embeddings(params, dataset, source, train_split)
        test = dataset_embeddings(params, dataset, source, test_split)
        probe = train_probe(train, probe_config)
        accs[f"{prefix}_train_acc"] = probe_accuracy(probe, train)
        accs[f"{prefix}_test_acc"] = probe_accuracy(probe, test)
    return EvalReport(params.config.z_dim, params.config.s_dim, probe=asdict(probe_config), **accs)


# ---------------------------------------------------------------- projection


def pca_project_2d(vectors: np.ndarray) -> tuple[np.ndarray, bool]:
    """Project onto the top two principal components.

    Returns ``(projection, degenerate)``; identical rows give zeros with ``degenerate=True``.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"need at least two row vectors, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0, atol=1e-12):
        return np.zeros((len(x), 2)), True
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = np.zeros((x.shape[1], 2))
    take = min(2, vt.shape[0])
    components[:, :take] = vt[:take].T
    # fix the sign of each axis so the largest-magnitude loading is positive
    for c in range(take):
        if components[np.argmax(np.abs(components[:, c])), c] < 0:
            components[:, c] *= -1
    return centered @ components, False
