"""Scalar training losses.

Sign conventions: every loss here is meant to be minimised. The mutual
information term is a negative log-likelihood (minimising it maximises the
variational bound), the segmentation loss is ordinary binary cross-entropy,
and the background loss is ``-log(1 - F(x_b))`` so that minimising it drives the
frozen segmenter towards labelling generated backgrounds as background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

EPS = 1e-6
LOG_2PI = math.log(2 * math.pi)


@dataclass
class LossWeights:
    gamma_mi: float = 1.0
    gamma_b: float = 1.0
    gamma_bg: float = 2.0
    # mask-size hinge, only used when gamma_size > 0 (ablation baseline)
    gamma_size: float = 0.0
    m_min: float = 0.1

    def __post_init__(self):
        for name in ("gamma_mi", "gamma_b", "gamma_bg", "gamma_size", "m_min"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.m_min > 1:
            raise ValueError("m_min must lie in [0, 1]")


def _nonempty(t: torch.Tensor, what: str):
    if t.numel() == 0:
        raise ValueError(f"empty {what} batch")


def adv_loss_d(score_real: torch.Tensor, score_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(score_real, "real")
    _nonempty(score_fake, "fake")
    return F.relu(1 - score_real).mean() + F.relu(1 + score_fake).mean()


def adv_loss_g(score_fake: torch.Tensor) -> torch.Tensor:
    _nonempty(score_fake, "fake")
    return -score_fake.mean()


def categorical_nll(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean NLL; ``target`` is one-hot (or a probability vector) or integer labels."""
    if target.dtype in (torch.int64, torch.int32):
        return F.cross_entropy(logits, target)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {tuple(target.shape)} != logits {tuple(logits.shape)}")
    return -(target * F.log_softmax(logits, 1)).sum(1).mean()


def gaussian_nll(mean: torch.Tensor, logvar: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the factored-Gaussian NLL summed over dimensions."""
    if mean.shape != target.shape or logvar.shape != target.shape:
        raise ValueError("Gaussian head and target shapes differ")
    per_dim = 0.5 * (LOG_2PI + logvar + (target - mean) ** 2 * torch.exp(-logvar))
    return per_dim.sum(1).mean()


def head_nll(head, target: torch.Tensor, logvar: Optional[torch.Tensor] = None,
             prior: str = "categorical") -> torch.Tensor:
    if prior == "categorical":
        if logvar is not None:
            raise ValueError("categorical prior given a Gaussian head")
        return categorical_nll(head, target)
    if prior == "normal":
        if logvar is None or not target.is_floating_point():
            raise ValueError("normal prior needs a (mean, logvar) head and real targets")
        return gaussian_nll(head, logvar, target)
    raise ValueError(f"unknown prior {prior!r}")


def mi_loss(post_x, c, post_mask, c_mask, logvar_x=None, logvar_mask=None,
            prior: str = "categorical") -> torch.Tensor:
    """NLL of ``c`` under the image head plus NLL of the mask code under the mask head."""
    return (head_nll(post_x, c, logvar_x, prior)
            + head_nll(post_mask, c_mask, logvar_mask, prior))


def _check_unit(t: torch.Tensor, name: str):
    if (t < 0).any() or (t > 1).any():
        raise ValueError(f"{name} values must lie in [0, 1]")


def binarization_loss(mask: torch.Tensor) -> torch.Tensor:
    _check_unit(mask.detach(), "mask")
    return torch.minimum(mask, 1 - mask).mean()


def bg_loss(prob_bg: torch.Tensor) -> torch.Tensor:
    """``-mean log(1 - F(x_b))`` with ``F`` clamped below ``1 - EPS``."""
    return -torch.log1p(-prob_bg.clamp(max=1 - EPS)).mean()


def seg_loss(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy against soft or hard targets."""
    if prob.shape != target.shape:
        raise ValueError(f"prediction {tuple(prob.shape)} vs target {tuple(target.shape)}")
    p = prob.clamp(EPS, 1 - EPS)
    return -((1 - target) * torch.log1p(-p) + target * torch.log(p)).mean()


def mask_size_loss(mask: torch.Tensor, m_min: float) -> torch.Tensor:
    """Hinge on per-sample mean mask area: ``mean_b max(0, m_min - area_b)``."""
    if not 0 <= m_min <= 1:
        raise ValueError(f"m_min must lie in [0, 1], got {m_min}")
    _check_unit(mask.detach(), "mask")
    area = mask.flatten(1).mean(1)
    return F.relu(m_min - area).mean()
