"""Representation map into an additive latent group, its algebraic losses,
relative-transformation extraction, and the scalar relation projection.

The latent group H is R^k under component-wise addition (identity 0,
inverse -h), so the homomorphism constraint reads

    rho(g1 o g2) = rho(g1) + rho(g2)

and likewise for the scalar projection P with plain scalar addition.
A linear P satisfies the scalar constraint vacuously, so P is a small
nonlinear network and the constraint does real work.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .transform import compose, inverse

DEFAULT_LATENT_DIM = 8
DEFAULT_MARGIN = 0.5


class RhoNet(nn.Module):
    """Feed-forward map from transform parameters to the latent group."""

    def __init__(self, latent_dim: int = DEFAULT_LATENT_DIM, hidden: int = 64):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(4, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, latent_dim),
        )

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return self.net(g)


class ScalarProj(nn.Module):
    """Two-layer nonlinear projection from the latent group to a scalar."""

    def __init__(self, latent_dim: int = DEFAULT_LATENT_DIM, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(latent_dim, hidden), nn.SiLU(), nn.Linear(hidden, 1))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h).squeeze(-1)


def loss_homo(rho: nn.Module, g1: torch.Tensor, g2: torch.Tensor) -> torch.Tensor:
    """Mean squared homomorphism residual ||rho(g1 o g2) - (rho(g1) + rho(g2))||^2.

    Callers are responsible for sampling pairs whose composition stays in
    range; the composed element is evaluated as-is.
    """
    composed = compose(g1, g2)
    residual = rho(composed) - (rho(g1) + rho(g2))
    return (residual ** 2).sum(dim=-1).mean()


def loss_var(h: torch.Tensor, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Hinge on per-dimension batch standard deviation: sum_d relu(m - sigma_d)^2.

    Uses the population std (correction=0).  Collapse to a single point
    costs exactly k * m^2.
    """
    if h.dim() == 1:
        h = h.unsqueeze(-1)
    if h.shape[0] < 2:
        raise ValueError("variance loss needs a batch of at least 2")
    sigma = h.std(dim=0, correction=0)
    return (torch.relu(margin - sigma) ** 2).sum()


def rel_param(g1: torch.Tensor, g2: torch.Tensor) -> torch.Tensor:
    """Relative transform of object 2 seen from object 1: g1^{-1} o g2."""
    return compose(inverse(g1), g2)


def loss_homo_scalar(proj: nn.Module, h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
    """Mean squared additivity residual (P(h1 + h2) - (P(h1) + P(h2)))^2."""
    residual = proj(h1 + h2) - (proj(h1) + proj(h2))
    return (residual ** 2).mean()


def loss_var_scalar(s: torch.Tensor, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Variance hinge for the scalar axis; identical to loss_var with k = 1."""
    return loss_var(s.reshape(-1, 1), margin)
