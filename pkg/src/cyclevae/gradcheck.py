"""Finite-difference checks for every differentiable op and both cycle losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import forward_cycle_loss, kl_standard_normal, reconstruction_l2, reverse_cycle_loss
from .model import ModelConfig, ModelParams, decode, encode, init_params, reparameterize

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
FD_EPS = 1e-6
# the composite losses sum many terms, so a wider step keeps roundoff below the tolerance
END_TO_END_EPS = 3e-6

# 8x8 single-channel model: two blocks take 8 -> 4 -> 2, the decoder mirrors it.
SMALL_MODEL = ModelConfig(image_channels=1, image_size=8, z_dim=3, s_dim=2, trunk_channels=(3, 4), branch_width=4)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _weighted(fn: Callable[..., T.Tensor], args: list[np.ndarray], which: int, rng, **kwargs):
    """Scalar function of argument ``which``: sum(fn(...) * R) for a fixed random R."""
    sample = fn(*[T.Tensor(a) for a in args], **kwargs)
    weight = rng.standard_normal(sample.shape)

    def f(x: T.Tensor) -> T.Tensor:
        inputs = [T.Tensor(a) for a in args]
        inputs[which] = x
        return (fn(*inputs, **kwargs) * weight).sum()

    return f


def _op_error(fn, args, rng, **kwargs) -> float:
    return max(T.grad_check(_weighted(fn, args, i, rng, **kwargs), args[i], FD_EPS) for i in range(len(args)))


def op_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    return {
        "add": lambda: _op_error(T.add, [n((3, 4)), n((3, 4))], rng),
        "mul": lambda: _op_error(T.mul, [n((3, 4)), n((3, 4))], rng),
        "neg": lambda: _op_error(T.neg, [n((5,))], rng),
        "exp": lambda: _op_error(T.exp, [n((3, 4))], rng),
        "abs": lambda: _op_error(T.tabs, [_away_from_zero(rng, (3, 4))], rng),
        "relu": lambda: _op_error(T.relu, [_away_from_zero(rng, (2, 3, 4, 4))], rng),
        "sigmoid": lambda: _op_error(T.sigmoid, [n((3, 4))], rng),
        "sum": lambda: _op_error(lambda a: T.tsum(a, axis=1), [n((3, 4))], rng),
        "reshape": lambda: _op_error(lambda a: T.reshape(a, (4, 3)), [n((3, 4))], rng),
        "concat": lambda: _op_error(lambda a, b: T.concat([a, b], axis=1), [n((3, 2)), n((3, 4))], rng),
        "linear": lambda: _op_error(T.linear, [n((4, 5)), n((3, 5)), n((3,))], rng),
        "conv2d": lambda: _op_error(
            lambda x, k, b: T.conv2d(x, k, stride=2, padding=2, bias=b), [n((2, 2, 8, 8)), n((3, 2, 5, 5)), n((3,))], rng
        ),
        "conv2d_transpose": lambda: _op_error(
            lambda x, k, b: T.conv2d_transpose(x, k, 2, 2, 1, bias=b), [n((2, 3, 4, 4)), n((3, 2, 5, 5)), n((2,))], rng
        ),
        "instance_norm": lambda: _op_error(lambda x: T.instance_norm(x, 1e-5), [n((2, 3, 4, 4))], rng),
        "cross_entropy": lambda: T.grad_check(
            lambda x, y=rng.integers(0, 4, size=5): T.cross_entropy(x, y), n((5, 4)), FD_EPS
        ),
        "kl_standard_normal": lambda: _op_error(kl_standard_normal, [n((4, 3)), n((4, 3))], rng),
        "reconstruction_l2": lambda: _op_error(reconstruction_l2, [rng.random((2, 1, 4, 4)), rng.random((2, 1, 4, 4))], rng),
        "conv2d+relu+sum": lambda: T.grad_check(
            lambda x, k=n((3, 2, 5, 5)): T.relu(T.conv2d(x, k, 1, 0)).sum(), n((1, 2, 8, 8)), FD_EPS
        ),
    }


def _param_error(loss_fn: Callable[[ModelParams], T.Tensor], params: ModelParams) -> float:
    worst = 0.0
    for name in params.tensors:
        def f(x: T.Tensor, name=name) -> T.Tensor:
            tensors = dict(params.tensors)
            tensors[name] = x
            return loss_fn(ModelParams(params.config, tensors))

        worst = max(worst, T.grad_check(f, params[name].data, END_TO_END_EPS))
    return worst


def end_to_end_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    rng = np.random.default_rng(seed)
    params = init_params(SMALL_MODEL, seed, dtype=np.float64)
    batch = 2
    shape = (batch, SMALL_MODEL.image_channels, SMALL_MODEL.image_size, SMALL_MODEL.image_size)
    x1, x2, x3 = rng.random(shape), rng.random(shape), rng.random(shape)
    noise1, noise2 = rng.standard_normal((batch, SMALL_MODEL.z_dim)), rng.standard_normal((batch, SMALL_MODEL.z_dim))
    z_prior = rng.standard_normal((batch, SMALL_MODEL.z_dim))
    weight = rng.standard_normal(shape)

    def vae_chain(p: ModelParams, x=x1) -> T.Tensor:
        code = encode(x, p)
        out = decode(reparameterize(code.mu, code.log_var, noise1), encode(x3, p).s, p)
        return (out * weight).sum()

    def forward(p: ModelParams, x=x1) -> T.Tensor:
        return forward_cycle_loss(x, x2, p, noise1, noise2)

    def reverse(p: ModelParams, x=x1) -> T.Tensor:
        return reverse_cycle_loss(x, x2, p, z_prior)

    checks = {}
    for name, fn in (("encode-decode chain", vae_chain), ("forward_cycle_loss", forward), ("reverse_cycle_loss", reverse)):
        checks[name] = lambda fn=fn: max(
            _param_error(fn, params),
            T.grad_check(lambda x: fn(params, x), x1, END_TO_END_EPS),
        )
    return checks


def run_all(seed: int = 0) -> list[CheckResult]:
    results = [CheckResult(name, check(), OP_TOLERANCE) for name, check in op_checks(seed).items()]
    results += [CheckResult(name, check(), END_TO_END_TOLERANCE) for name, check in end_to_end_checks(seed).items()]
    return results
