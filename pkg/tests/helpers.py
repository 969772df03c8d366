"""Shared test utilities: central finite differences and tiny model factories."""

import torch

from layeredgan.adversary import AdversaryConfig
from layeredgan.latent import LatentConfig
from layeredgan.layered_generator import GeneratorConfig


def fd_grad(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(x).detach())
        flat[i] = old - h
        fm = float(f(x).detach())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def tiny_latent(**kw):
    base = dict(d_z=6, d_c=4, group_size=2)
    base.update(kw)
    return LatentConfig(**base)


def tiny_generator(**kw):
    base = dict(resolution=8, base_channels=4, min_channels=4, c_embed=3, shift=(-1.0, 1.0))
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_adversary(**kw):
    base = dict(resolution=8, base_channels=4, max_channels=8, mask_channels=4)
    base.update(kw)
    return AdversaryConfig(**base)
