"""Discriminator with a shared-trunk posterior head over ``c``, and the mask posterior net."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .latent import LatentConfig

LOGVAR_CLAMP = 5.0


@dataclass
class AdversaryConfig:
    resolution: int = 64
    base_channels: int = 32
    max_channels: int = 512
    mask_channels: int = 16
    head_channels: Optional[int] = None

    def widths(self):
        n = int(math.log2(self.resolution // 4))
        return [min(self.base_channels << i, self.max_channels) for i in range(n + 1)]


@dataclass
class CriticOutput:
    score: torch.Tensor
    posterior_c: torch.Tensor
    logvar: Optional[torch.Tensor] = None


def _sn(m):
    return spectral_norm(m, n_power_iterations=1)


def _init(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Discriminator(nn.Module):
    """Spectral-normalised trunk; score head and posterior head split after the last downsample."""

    def __init__(self, lcfg: LatentConfig, acfg: AdversaryConfig):
        super().__init__()
        self.resolution = acfg.resolution
        self.categorical = lcfg.categorical
        self.d_c = lcfg.d_c
        widths = acfg.widths()
        layers = [nn.Conv2d(3, widths[0], 3, padding=1), nn.LeakyReLU(0.2)]
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(a, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*layers)
        top = widths[-1]
        hc = acfg.head_channels or top
        self.score_conv = nn.Conv2d(top, hc, 3, padding=1)
        self.score_fc = nn.Linear(hc * 16, 1)
        self.post_conv = nn.Conv2d(top, hc, 3, padding=1)
        n_out = lcfg.d_c if lcfg.categorical else 2 * lcfg.d_c
        self.post_fc = nn.Linear(hc * 16, n_out)
        _init(self)
        for m in list(self.trunk) + [self.score_conv, self.score_fc]:
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                _sn(m)
        # re-register since parametrize wraps modules in place
        self.normalized = [m for m in list(self.trunk) + [self.score_conv, self.score_fc]
                           if isinstance(m, (nn.Conv2d, nn.Linear))]

    def features(self, x):
        return self.trunk(x)

    def score_head(self, h):
        h = F.leaky_relu(self.score_conv(h), 0.2)
        return self.score_fc(h.flatten(1)).squeeze(1)

    def posterior_head(self, h):
        h = F.leaky_relu(self.post_conv(h), 0.2)
        return self.post_fc(h.flatten(1))

    def forward(self, x) -> CriticOutput:
        h = self.features(x)
        post = self.posterior_head(h)
        if self.categorical:
            return CriticOutput(self.score_head(h), post)
        mean, logvar = post.split(self.d_c, 1)
        return CriticOutput(self.score_head(h), mean, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))

    def head_parameters(self):
        return list(self.post_conv.parameters()) + list(self.post_fc.parameters())


class MaskEncoder(nn.Module):
    """Small conv net over masks predicting the parent code (or ``c`` for the normal prior)."""

    def __init__(self, lcfg: LatentConfig, acfg: AdversaryConfig):
        super().__init__()
        self.resolution = acfg.resolution
        self.categorical = lcfg.categorical
        self.d_c = lcfg.d_c
        n = int(math.log2(acfg.resolution // 4))
        w = acfg.mask_channels
        layers, cin = [], 1
        for i in range(n):
            cout = min(w << i, 256)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)
        n_out = lcfg.n_super if lcfg.categorical else 2 * lcfg.d_c
        self.fc = nn.Linear(cin * 16, n_out)
        _init(self)

    def forward(self, mask):
        out = self.fc(self.net(mask).flatten(1))
        if self.categorical:
            return out, None
        mean, logvar = out.split(self.d_c, 1)
        return mean, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)


def discriminate(D: Discriminator, x: torch.Tensor) -> CriticOutput:
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] != D.resolution or x.shape[-2] != D.resolution:
        raise ValueError(f"expected [b, 3, {D.resolution}, {D.resolution}], got {tuple(x.shape)}")
    return D(x)


def infer_mask_posterior(E: MaskEncoder, mask: torch.Tensor):
    """Logits over parent categories (or ``(mean, logvar)`` for the normal prior)."""
    if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[-1] != E.resolution:
        raise ValueError(f"expected [b, 1, {E.resolution}, {E.resolution}], got {tuple(mask.shape)}")
    return E(mask)
