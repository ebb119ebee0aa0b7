"""Probabilistic point features: invariance + reparameterized variance, KL/reconstruction losses, adaptiveness fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Linear, Module
from .tensor import Tensor, concat


@dataclass
class ProbConfig:
    channels: int = 16
    latent: int = 8
    n_layers: int = 4


class ProbHeads(Module):
    def __init__(self, rng: np.random.Generator, cfg: ProbConfig):
        super().__init__()
        C, D, L = cfg.channels, cfg.channels, cfg.n_layers
        self.cfg = cfg
        self.invariance = MLP(rng, [C, C, C], last_gain=1.0)
        self.mu_head = Linear(rng, C, D, gain=0.1)
        self.logsigma_head = Linear(rng, C, D, gain=0.1)
        self.enc = MLP(rng, [C, 16, cfg.latent], last_gain=1.0)
        self.dec = MLP(rng, [C, 16, cfg.latent], last_gain=1.0)
        self.proj = Linear(rng, C, L, gain=1.0)
        self.fusion = Linear(rng, 2 * L, L, gain=1.0)
        self.direct = Linear(rng, C, L, gain=1.0)


def invariant_head(heads: ProbHeads, f_x: Tensor) -> Tensor:
    return heads.invariance(f_x)


def posterior(heads: ProbHeads, f_x: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and (diagonal) standard deviation of q(f^V | f_x)."""
    mu = heads.mu_head(f_x)
    sigma = heads.logsigma_head(f_x).exp()
    return mu, sigma


def sample_variance(mu: Tensor, sigma: Tensor, seed=None, eps: np.ndarray | None = None) -> Tensor:
    """Reparameterized draw mu + sigma * eps.

    ``seed=None`` and ``eps=None`` is inference mode (eps = 0, the posterior mean).
    """
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    if eps is None:
        if seed is None:
            return mu + sigma * np.zeros(mu.shape)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        eps = rng.standard_normal(mu.shape)
    return mu + sigma * eps


def kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """Mean over points of KL(N(mu, sigma^2) || N(0, I)), summed over dimensions."""
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be positive")
    B = mu.shape[0]
    log_var = sigma.log() * 2.0
    terms = 1.0 + log_var - mu.square() - sigma.square()
    return terms.sum() * (-0.5 / B)


def kl_loss_from_log(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Same as :func:`kl_loss` but parameterized by log sigma (no log of exp)."""
    B = mu.shape[0]
    terms = 1.0 + log_sigma * 2.0 - mu.square() - (log_sigma * 2.0).exp()
    return terms.sum() * (-0.5 / B)


def rec_loss(heads: ProbHeads, f_x: Tensor, F_x: Tensor) -> Tensor:
    """Mean squared latent distance between Enc(f_x) and Dec(F_x)."""
    if f_x.shape != F_x.shape:
        raise ValueError(f"shape mismatch {f_x.shape} vs {F_x.shape}")
    diff = heads.enc(f_x) - heads.dec(F_x)
    return diff.square().sum() * (1.0 / f_x.shape[0])


def fuse_point(f_x: Tensor, f_inv: Tensor | None, f_var: Tensor | None, alpha: float, residual: bool = True) -> Tensor:
    """F_x = f_x + alpha * (f^I + f^V); missing parts are dropped."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    parts = [p for p in (f_inv, f_var) if p is not None]
    if not parts:
        return f_x
    mix = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return f_x + mix * alpha if residual else mix * alpha


def adaptiveness(heads: ProbHeads, a_x: Tensor, F_x: Tensor, direct: bool = False) -> Tensor:
    """Per-point, per-layer factor in (0, 1) fused from a_x and F_x."""
    if a_x.shape[-1] != heads.cfg.n_layers:
        raise ValueError(f"a_x needs {heads.cfg.n_layers} channels, got {a_x.shape[-1]}")
    if direct:
        return heads.direct(F_x).sigmoid()
    return heads.fusion(concat([a_x, heads.proj(F_x)], axis=-1)).sigmoid()
