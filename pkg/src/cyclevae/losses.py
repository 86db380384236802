"""Objective terms: KL to the standard normal prior, squared-error reconstruction,
the forward cycle with swapped specified codes, and the pairwise reverse cycle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, decode, encode, reparameterize
from .tensor import ShapeError, Tensor, as_tensor


@dataclass(frozen=True)
class LossWeights:
    kl_weight: float = 1.0
    reverse_weight: float = 1.0

    def __post_init__(self):
        for name in ("kl_weight", "reverse_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def kl_standard_normal(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)).

    A vector gives the plain sum over dimensions; a (batch, d) matrix gives the
    batch mean of the per-sample divergences.
    """
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"kl_standard_normal: mu {mu.shape} vs log_var {log_var.shape}")
    terms = mu * mu + log_var.exp() - log_var - 1.0
    if mu.ndim == 1:
        return terms.sum() * 0.5
    return terms.sum(axis=1).mean() * 0.5


def reconstruction_l2(x_hat, x) -> Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    x_hat, x = as_tensor(x_hat), as_tensor(x)
    if x_hat.shape != x.shape:
        raise ShapeError(f"reconstruction_l2: {x_hat.shape} vs {x.shape}")
    diff = x_hat - x
    sq = diff * diff
    return sq.reshape(sq.shape[0], -1).sum(axis=1).mean()


@dataclass
class ForwardTerms:
    reconstruction: Tensor
    kl: Tensor

    def total(self, weights: LossWeights) -> Tensor:
        return self.reconstruction + self.kl * weights.kl_weight


def _pair_terms(x1, x2, params: ModelParams, noise1, noise2, swap: bool) -> ForwardTerms:
    x1, x2 = as_tensor(x1, params.dtype), as_tensor(x2, params.dtype)
    if x1.shape != x2.shape:
        raise ShapeError(f"pair batches differ in shape: {x1.shape} vs {x2.shape}")
    c1, c2 = encode(x1, params), encode(x2, params)
    z1 = reparameterize(c1.mu, c1.log_var, noise1)
    z2 = reparameterize(c2.mu, c2.log_var, noise2)
    s_for_1, s_for_2 = (c2.s, c1.s) if swap else (c1.s, c2.s)
    recon = reconstruction_l2(decode(z1, s_for_1, params), x1) + reconstruction_l2(decode(z2, s_for_2, params), x2)
    kl = kl_standard_normal(c1.mu, c1.log_var) + kl_standard_normal(c2.mu, c2.log_var)
    return ForwardTerms(recon, kl)


def forward_cycle_terms(x1, x2, params: ModelParams, noise1, noise2) -> ForwardTerms:
    """Reconstruction and KL terms with the specified codes of each same-class pair swapped."""
    return _pair_terms(x1, x2, params, noise1, noise2, swap=True)


def forward_cycle_loss(x1, x2, params: ModelParams, noise1, noise2,
                       weights: LossWeights = LossWeights()) -> Tensor:
    """recon(Dec(z1, s2), x1) + recon(Dec(z2, s1), x2) + kl_weight * (KL1 + KL2)."""
    return forward_cycle_terms(x1, x2, params, noise1, noise2).total(weights)


def vae_loss(x1, x2, params: ModelParams, noise1, noise2, weights: LossWeights = LossWeights()) -> Tensor:
    """The same objective without swapping (each image decoded with its own s)."""
    return _pair_terms(x1, x2, params, noise1, noise2, swap=False).total(weights)


def reverse_cycle_codes(x1, x2, params: ModelParams, z_prior) -> tuple[Tensor, Tensor]:
    """Posterior means of Dec(z_prior, f_s(x1)) and Dec(z_prior, f_s(x2)) after re-encoding."""
    x1, x2 = as_tensor(x1, params.dtype), as_tensor(x2, params.dtype)
    z_prior = as_tensor(z_prior, params.dtype)
    if x1.shape[0] != x2.shape[0] or z_prior.shape[0] != x1.shape[0]:
        raise ShapeError(f"reverse cycle batch sizes differ: {x1.shape[0]}, {x2.shape[0]}, {z_prior.shape[0]}")
    s1 = encode(x1, params).s
    s2 = encode(x2, params).s
    mu1 = encode(decode(z_prior, s1, params), params).mu
    mu2 = encode(decode(z_prior, s2, params), params).mu
    return mu1, mu2


def reverse_cycle_loss(x1, x2, params: ModelParams, z_prior) -> Tensor:
    """Batch mean of the L1 distance between the two re-encoded posterior means."""
    mu1, mu2 = reverse_cycle_codes(x1, x2, params, z_prior)
    return (mu1 - mu2).abs().sum(axis=1).mean()


def sample_prior(rng: np.random.Generator, batch: int, dim: int, dtype=np.float64) -> np.ndarray:
    return rng.standard_normal((batch, dim)).astype(dtype)
