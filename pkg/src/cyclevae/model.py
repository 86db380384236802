"""Encoder/decoder of the cycle-consistent VAE.

The encoder is a shared convolutional trunk (conv, instance norm, ReLU blocks
with stride 2) whose flattened features feed three linear heads: the posterior
mean, the posterior log-variance and the specified code ``s``. The decoder maps
``z`` and ``s`` through separate fully-connected branches, concatenates and
reshapes them, then upsamples with transposed-convolution blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    conv2d_transpose,
    exp,
    instance_norm,
    linear,
    relu,
    sigmoid,
)

KERNEL = 5
STRIDE = 2
PADDING = 2


def _conv_out(size: int) -> int:
    return (size + 2 * PADDING - KERNEL) // STRIDE + 1


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 1
    image_size: int = 28
    z_dim: int = 16
    s_dim: int = 16
    trunk_channels: tuple[int, ...] = (32, 64, 128)
    branch_width: int = 256
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(int(c) for c in self.trunk_channels))
        if self.z_dim < 1 or self.s_dim < 1:
            raise ValueError(f"z_dim and s_dim must be >= 1, got {self.z_dim}, {self.s_dim}")
        if self.image_channels < 1 or not self.trunk_channels or min(self.trunk_channels) < 1:
            raise ValueError("image_channels and every trunk channel count must be >= 1")
        if self.branch_width < 1:
            raise ValueError("branch_width must be >= 1")
        sizes = self.spatial_sizes
        if sizes[-1] < 1:
            raise ValueError(f"{self.conv_blocks} conv blocks shrink {self.image_size} below 1 pixel")
        base = sizes[-1] ** 2
        if (2 * self.branch_width) % base:
            raise ValueError(
                f"2*branch_width={2 * self.branch_width} is not divisible by the {sizes[-1]}x{sizes[-1]} base map"
            )

    @property
    def conv_blocks(self) -> int:
        return len(self.trunk_channels)

    @property
    def spatial_sizes(self) -> list[int]:
        """Feature-map size after each encoder block, starting with the image size."""
        sizes = [self.image_size]
        for _ in self.trunk_channels:
            sizes.append(_conv_out(sizes[-1]))
        return sizes

    @property
    def decoder_channels(self) -> list[int]:
        """Channel counts through the decoder, starting at the reshaped branch output."""
        base = self.spatial_sizes[-1] ** 2
        return [2 * self.branch_width // base, *reversed(self.trunk_channels[:-1]), self.image_channels]

    @property
    def output_paddings(self) -> list[int]:
        sizes = self.spatial_sizes[::-1]
        pads = []
        for small, big in zip(sizes[:-1], sizes[1:]):
            pads.append(big - ((small - 1) * STRIDE - 2 * PADDING + KERNEL))
        return pads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        return d

    @classmethod
    def for_image(cls, image_size: int, image_channels: int, **kwargs) -> "ModelConfig":
        """Paper-sized trunk: 3 blocks for 28x28, 4 blocks for 64x64."""
        channels = (32, 64, 128) if image_size <= 32 else (32, 64, 128, 256)
        kwargs.setdefault("trunk_channels", channels)
        return cls(image_channels=image_channels, image_size=image_size, **kwargs)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_c = config.image_channels
    for i, out_c in enumerate(config.trunk_channels):
        shapes[f"enc.conv{i}.weight"] = (out_c, in_c, KERNEL, KERNEL)
        in_c = out_c
    features = in_c * config.spatial_sizes[-1] ** 2
    for head, dim in (("mu", config.z_dim), ("logvar", config.z_dim), ("s", config.s_dim)):
        shapes[f"enc.{head}.weight"] = (dim, features)
        shapes[f"enc.{head}.bias"] = (dim,)
    for branch, dim in (("z", config.z_dim), ("s", config.s_dim)):
        shapes[f"dec.{branch}_fc.weight"] = (config.branch_width, dim)
        shapes[f"dec.{branch}_fc.bias"] = (config.branch_width,)
    chans = config.decoder_channels
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        shapes[f"dec.deconv{i}.weight"] = (cin, cout, KERNEL, KERNEL)
    shapes[f"dec.deconv{len(chans) - 2}.bias"] = (config.image_channels,)
    return shapes


def is_encoder_param(name: str) -> bool:
    return name.startswith("enc.")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def encoder_names(self) -> list[str]:
        return [n for n in self.tensors if is_encoder_param(n)]

    def decoder_names(self) -> list[str]:
        return [n for n in self.tensors if not is_encoder_param(n)]

    def with_grad(self) -> "ModelParams":
        """Fresh leaf tensors (sharing data) that collect gradients."""
        return ModelParams(self.config, {n: Tensor(t.data, requires_grad=True) for n, t in self.tensors.items()})

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (np.zeros_like(t.data) if t.grad is None else t.grad) for n, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = parameter_shapes(config)
        if list(arrays) != list(expected):
            raise ValueError("parameter names do not match the model configuration")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arrays[name].shape}")
        return cls(config, {n: Tensor(a) for n, a in arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.astype(dtype)) for n, t in self.tensors.items()})


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Fan-in scaled uniform weights (He bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 2:
            fan_in = shape[1]
        elif name.startswith("enc."):
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            # transposed conv: each output pixel sees about in_c * k*k / stride^2 inputs
            fan_in = max(1, shape[0] * shape[2] * shape[3] // STRIDE**2)
        bound = np.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, {n: Tensor(a) for n, a in arrays.items()})


class LatentCode(NamedTuple):
    mu: Tensor
    log_var: Tensor
    s: Tensor


def _check_images(x: Tensor, config: ModelConfig) -> None:
    expected = (config.image_channels, config.image_size, config.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected images of shape (batch, {', '.join(map(str, expected))}), got {x.shape}")


def _features(x: Tensor, params: ModelParams) -> Tensor:
    config = params.config
    h = x
    for i in range(config.conv_blocks):
        h = conv2d(h, params[f"enc.conv{i}.weight"], stride=STRIDE, padding=PADDING)
        h = relu(instance_norm(h, config.norm_eps))
    return h.reshape(h.shape[0], -1)


def encode(x, params: ModelParams) -> LatentCode:
    """Posterior mean, posterior log-variance and specified code for a batch of images."""
    x = as_tensor(x, params.dtype)
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    _check_images(x, params.config)
    h = _features(x, params)
    return LatentCode(
        linear(h, params["enc.mu.weight"], params["enc.mu.bias"]),
        linear(h, params["enc.logvar.weight"], params["enc.logvar.bias"]),
        linear(h, params["enc.s.weight"], params["enc.s.bias"]),
    )


def encode_s(x, params: ModelParams) -> Tensor:
    return encode(x, params).s


def reparameterize(mu, log_var, noise) -> Tensor:
    """z = mu + exp(log_var / 2) * noise; ``noise`` is treated as a constant."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=mu.dtype)
    if mu.shape != log_var.shape or mu.shape != noise.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, log_var {log_var.shape}, noise {noise.shape}")
    return mu + exp(log_var * 0.5) * Tensor(noise)


def decode(z, s, params: ModelParams) -> Tensor:
    """Images in [0, 1] of shape (batch, c, h, w) from batched codes ``z`` and ``s``."""
    config = params.config
    z, s = as_tensor(z, params.dtype), as_tensor(s, params.dtype)
    if z.ndim != 2 or s.ndim != 2 or z.shape[1] != config.z_dim or s.shape[1] != config.s_dim \
            or z.shape[0] != s.shape[0]:
        raise ShapeError(f"decode: z {z.shape}, s {s.shape} for z_dim={config.z_dim}, s_dim={config.s_dim}")
    hz = relu(linear(z, params["dec.z_fc.weight"], params["dec.z_fc.bias"]))
    hs = relu(linear(s, params["dec.s_fc.weight"], params["dec.s_fc.bias"]))
    base = config.spatial_sizes[-1]
    chans = config.decoder_channels
    h = concat([hz, hs], axis=1).reshape(z.shape[0], chans[0], base, base)
    last = len(chans) - 2
    for i, pad in enumerate(config.output_paddings):
        if i < last:
            h = conv2d_transpose(h, params[f"dec.deconv{i}.weight"], STRIDE, PADDING, pad)
            h = relu(instance_norm(h, config.norm_eps))
        else:
            h = conv2d_transpose(h, params[f"dec.deconv{i}.weight"], STRIDE, PADDING, pad,
                                 bias=params[f"dec.deconv{i}.bias"])
    return sigmoid(h)


def reconstruct(x, params: ModelParams) -> Tensor:
    """Decode an image from its own posterior mean and specified code."""
    code = encode(x, params)
    return decode(code.mu, code.s, params)
