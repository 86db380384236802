"""Alternating optimisation: a forward-cycle step on encoder and decoder, then a
reverse-cycle step whose update touches the encoder only."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledImageDataset, PairSampler, sample_independent_batch
from .losses import LossWeights, forward_cycle_terms, reverse_cycle_loss
from .model import ModelConfig, ModelParams, init_params
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    iterations: int = 1000
    batch_size: int = 64
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = LossWeights()
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints
    dtype: str = "float32"
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- Adam


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, arrays: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({n: np.zeros_like(a) for n, a in arrays.items()}, {n: np.zeros_like(a) for n, a in arrays.items()})


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
                learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam step over the names in ``state``.

    Arrays are never modified in place; parameters outside ``state`` pass through untouched.
    """
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_params = dict(params)
    new_m, new_v = {}, {}
    for name in state.m:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        dtype = params[name].dtype
        m = (beta1 * state.m[name] + (1.0 - beta1) * g).astype(dtype)
        v = (beta2 * state.v[name] + (1.0 - beta2) * (g * g)).astype(dtype)
        update = learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = (params[name] - update).astype(dtype)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, step)


def _adam(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
          config: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    arrays, state = adam_update(params.arrays, grads, state, config.learning_rate,
                                config.adam_beta1, config.adam_beta2, config.adam_eps)
    return ModelParams(params.config, {n: Tensor(a) for n, a in arrays.items()}), state


# ---------------------------------------------------------------- steps


@dataclass
class TrainState:
    params: ModelParams
    forward_opt: OptimizerState  # every parameter
    reverse_opt: OptimizerState  # encoder parameters only
    rng: np.random.Generator
    iteration: int = 0


def new_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    params = init_params(model_config, train_config.seed, dtype=np.dtype(train_config.dtype))
    arrays = params.arrays
    return TrainState(
        params,
        OptimizerState.zeros(arrays),
        OptimizerState.zeros({n: arrays[n] for n in params.encoder_names()}),
        np.random.default_rng(train_config.seed),
    )


def train_step_forward(x1: np.ndarray, x2: np.ndarray, params: ModelParams, opt_state: OptimizerState,
                       config: TrainConfig, rng: np.random.Generator):
    """Forward-cycle loss on a same-class pair batch; updates encoder and decoder."""
    dtype = params.dtype
    noise1 = rng.standard_normal((len(x1), params.config.z_dim)).astype(dtype)
    noise2 = rng.standard_normal((len(x2), params.config.z_dim)).astype(dtype)
    leaves = params.with_grad()
    terms = forward_cycle_terms(x1, x2, leaves, noise1, noise2)
    loss = terms.total(config.loss_weights)
    backward(loss)
    params, opt_state = _adam(params, leaves.grads(), opt_state, config)
    metrics = {"forward_loss": loss.item(), "reconstruction": terms.reconstruction.item(), "kl": terms.kl.item()}
    return params, opt_state, metrics


def train_step_reverse(x1: np.ndarray, x2: np.ndarray, params: ModelParams, opt_state: OptimizerState,
                       config: TrainConfig, rng: np.random.Generator):
    """Reverse-cycle loss on two independent batches.

    Gradients run through the decoder, but only encoder parameters are updated.
    With ``reverse_weight == 0`` the loss is only measured.
    """
    if len(x1) != len(x2):
        raise ValueError(f"reverse batches differ in length: {len(x1)} vs {len(x2)}")
    z_prior = rng.standard_normal((len(x1), params.config.z_dim)).astype(params.dtype)
    weight = config.loss_weights.reverse_weight
    if weight == 0:
        with no_grad():
            value = reverse_cycle_loss(x1, x2, params, z_prior).item()
        return params, opt_state, {"reverse_loss": value}
    leaves = params.with_grad()
    loss = reverse_cycle_loss(x1, x2, leaves, z_prior)
    backward(loss * weight)
    grads = leaves.grads()
    encoder = set(params.encoder_names())
    arrays, opt_state = adam_update(
        params.arrays, {n: g for n, g in grads.items() if n in encoder}, opt_state,
        config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps,
    )
    # decoder tensors are carried over as the very same objects
    tensors = {n: (Tensor(arrays[n]) if n in encoder else params.tensors[n]) for n in params.tensors}
    return ModelParams(params.config, tensors), opt_state, {"reverse_loss": loss.item()}


# ---------------------------------------------------------------- log


LOG_FIELDS = ("iteration", "forward_loss", "reconstruction", "kl", "reverse_loss", "wall_clock")


@dataclass
class TrainRecord:
    iteration: int
    forward_loss: float
    reconstruction: float
    kl: float
    reverse_loss: float
    wall_clock: float

    def losses(self) -> tuple:
        return (self.iteration, self.forward_loss, self.reconstruction, self.kl, self.reverse_loss)


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("iterations must increase")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def loss_trace(self) -> list[tuple]:
        """Everything except wall-clock time, which is not reproducible."""
        return [r.losses() for r in self.records]

    def write(self, path) -> None:
        """Tab-separated, one record per line, fields in LOG_FIELDS order after a '#' header."""
        lines = ["#" + "\t".join(LOG_FIELDS)]
        for r in self.records:
            lines.append("\t".join([str(r.iteration)] + [repr(float(getattr(r, f))) for f in LOG_FIELDS[1:]]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            log.append(TrainRecord(int(parts[0]), *map(float, parts[1:])))
        return log


# ---------------------------------------------------------------- checkpoints of training state


def _opt_blocks(prefix: str, state: OptimizerState) -> dict[str, np.ndarray]:
    blocks = {f"{prefix}.m.{n}": a for n, a in state.m.items()}
    blocks.update({f"{prefix}.v.{n}": a for n, a in state.v.items()})
    return blocks


def _opt_from_blocks(prefix: str, blocks: dict[str, np.ndarray], names: list[str], step: int, dtype) -> OptimizerState:
    return OptimizerState(
        {n: blocks[f"{prefix}.m.{n}"].astype(dtype) for n in names},
        {n: blocks[f"{prefix}.v.{n}"].astype(dtype) for n in names},
        step,
    )


def save_train_state(path, state: TrainState) -> None:
    blocks = _opt_blocks("opt.forward", state.forward_opt)
    blocks.update(_opt_blocks("opt.reverse", state.reverse_opt))
    extra = {
        "iteration": state.iteration,
        "forward_step": state.forward_opt.step,
        "reverse_step": state.reverse_opt.step,
        "rng_state": state.rng.bit_generator.state,
    }
    save_checkpoint(path, state.params, blocks, extra)


def load_train_state(path, dtype=np.float32) -> TrainState:
    params, blocks, extra = load_checkpoint(path, dtype=dtype)
    try:
        rng = np.random.default_rng()
        rng.bit_generator.state = extra["rng_state"]
        forward_opt = _opt_from_blocks("opt.forward", blocks, list(params.tensors), extra["forward_step"], dtype)
        reverse_opt = _opt_from_blocks("opt.reverse", blocks, params.encoder_names(), extra["reverse_step"], dtype)
    except KeyError as exc:
        raise ValueError(f"{path} is a model checkpoint without training state ({exc})") from exc
    return TrainState(params, forward_opt, reverse_opt, rng, int(extra["iteration"]))


# ---------------------------------------------------------------- loop


def check_dataset(dataset: LabeledImageDataset, split: str = "train") -> None:
    labels = dataset.labels[dataset.indices(split)]
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ConfigError(f"training split needs >= 2 classes, found {len(classes)}")
    if counts.min() < 2:
        raise ConfigError(f"every training class needs >= 2 images, class {classes[counts.argmin()]} has {counts.min()}")


def fit(dataset: LabeledImageDataset, model_config: ModelConfig, train_config: TrainConfig,
        out_dir=None, resume_from=None) -> tuple[ModelParams, TrainLog]:
    """Run the alternating forward/reverse loop for ``train_config.iterations`` iterations.

    Each iteration draws, in order from one seeded generator: a same-class pair
    batch, the forward-cycle noise, two independent batches and the prior
    sample for the reverse cycle. ``resume_from`` continues a saved run exactly.
    """
    check_dataset(dataset)
    dtype = np.dtype(train_config.dtype)
    if resume_from is not None:
        state = load_train_state(resume_from, dtype=dtype)
        if state.params.config != model_config:
            raise ConfigError("checkpoint model config differs from the requested one")
    else:
        state = new_state(model_config, train_config)
    sampler = PairSampler(dataset, "train")
    images = dataset.images
    if images.dtype != dtype:
        images = images.astype(dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    start = time.perf_counter()
    batch = train_config.batch_size
    while state.iteration < train_config.iterations:
        i, j = sampler.sample_indices(batch, state.rng)
        state.params, state.forward_opt, fwd = train_step_forward(
            images[i], images[j], state.params, state.forward_opt, train_config, state.rng)
        a = sample_independent_batch(dataset, "train", batch, state.rng)
        b = sample_independent_batch(dataset, "train", batch, state.rng)
        state.params, state.reverse_opt, rev = train_step_reverse(
            images[a], images[b], state.params, state.reverse_opt, train_config, state.rng)
        state.iteration += 1
        log.append(TrainRecord(state.iteration, fwd["forward_loss"], fwd["reconstruction"], fwd["kl"],
                               rev["reverse_loss"], time.perf_counter() - start))
        if train_config.log_every and state.iteration % train_config.log_every == 0:
            logger.info("iter %d forward %.3f (recon %.3f, kl %.3f) reverse %.4f", state.iteration,
                        fwd["forward_loss"], fwd["reconstruction"], fwd["kl"], rev["reverse_loss"])
        if out is not None and train_config.checkpoint_every and state.iteration % train_config.checkpoint_every == 0:
            save_train_state(out / f"checkpoint_{state.iteration:06d}.cvae", state)
    if out is not None:
        save_train_state(out / "final.cvae", state)
        log.write(out / "train_log.tsv")
    return state.params, log
