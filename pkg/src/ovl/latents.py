"""Directly optimized per-image and per-class codes, and the noisy bottleneck."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "LatentBank",
    "BottleneckConfig",
    "RowAdam",
    "init_bank",
    "noisy_bottleneck",
    "bottleneck_penalty",
]


@dataclass(frozen=True)
class BottleneckConfig:
    noise_std: float = 1.0
    lambda_b: float = 0.001

    def __post_init__(self):
        if self.noise_std < 0 or self.lambda_b < 0:
            raise ValueError("noise_std and lambda_b must be nonnegative")


class LatentBank:
    """One free code per training image (``u_prime``) and one per class (``y_embed``)."""

    def __init__(self, u_prime: torch.Tensor, y_embed: torch.Tensor):
        if u_prime.ndim != 2 or y_embed.ndim != 2:
            raise ValueError("u_prime and y_embed must be matrices")
        if not (torch.isfinite(u_prime).all() and torch.isfinite(y_embed).all()):
            raise ValueError("latent bank contains non-finite values")
        self.u_prime = u_prime
        self.y_embed = y_embed

    @property
    def N(self) -> int:
        return self.u_prime.shape[0]

    @property
    def d_u(self) -> int:
        return self.u_prime.shape[1]

    @property
    def K(self) -> int:
        return self.y_embed.shape[0]

    @property
    def d_y(self) -> int:
        return self.y_embed.shape[1]

    def requires_grad_(self, flag: bool = True) -> "LatentBank":
        self.u_prime.requires_grad_(flag)
        self.y_embed.requires_grad_(flag)
        return self

    def detached(self) -> "LatentBank":
        return LatentBank(self.u_prime.detach().clone(), self.y_embed.detach().clone())

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.u_prime.detach().cpu().numpy().astype("<f4").tobytes())
        h.update(self.y_embed.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def init_bank(N: int, d_u: int, K: int, d_y: int, rng: np.random.Generator,
              init_std: float = 0.05, init_std_y: float | None = None) -> LatentBank:
    if min(N, d_u, K, d_y) < 1:
        raise ValueError("bank dimensions must be at least 1")
    if init_std_y is None:
        init_std_y = init_std
    u = rng.standard_normal((N, d_u)) * init_std
    y = rng.standard_normal((K, d_y)) * init_std_y
    return LatentBank(torch.from_numpy(u.astype(np.float32)), torch.from_numpy(y.astype(np.float32)))


def noisy_bottleneck(u_prime: torch.Tensor, rng: torch.Generator | None, noise_std: float) -> torch.Tensor:
    """u = u' + z, z ~ N(0, noise_std^2 I), fresh noise on every call."""
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    if noise_std == 0:
        return u_prime
    z = torch.randn(u_prime.shape, generator=rng, dtype=u_prime.dtype, device=u_prime.device)
    return u_prime + noise_std * z


def bottleneck_penalty(u_prime: torch.Tensor) -> torch.Tensor:
    """Batch mean of squared Euclidean row norms."""
    return u_prime.pow(2).sum() / u_prime.shape[0]


class RowAdam:
    """Adam over the rows of a matrix, touching only the rows in each step.

    Moments and bias-correction step counts are kept per row, so rows that
    are absent from a minibatch are left exactly as they were.
    """

    def __init__(self, param: torch.Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.param = param
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = torch.zeros_like(param, requires_grad=False)
        self.v = torch.zeros_like(param, requires_grad=False)
        self.t = torch.zeros(param.shape[0], dtype=torch.int64)

    @torch.no_grad()
    def step(self, rows: torch.Tensor):
        """Update ``rows`` (unique indices) using ``param.grad``."""
        if self.param.grad is None:
            return
        rows = torch.as_tensor(rows, dtype=torch.int64)
        b1, b2 = self.betas
        g = self.param.grad[rows]
        self.t[rows] += 1
        t = self.t[rows].to(g.dtype)[:, None]
        m = self.m[rows].mul_(b1).add_(g, alpha=1 - b1)
        v = self.v[rows].mul_(b2).addcmul_(g, g, value=1 - b2)
        self.m[rows] = m
        self.v[rows] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        self.param[rows] -= self.lr * m_hat / (v_hat.sqrt() + self.eps)

    def zero_grad(self):
        self.param.grad = None
