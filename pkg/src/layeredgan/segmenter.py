"""U-Net foreground-probability network and mask inference."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SegmenterConfig:
    depth: int = 4
    base_channels: int = 32
    lr: float = 1e-3
    steps: int = 12000
    batch_size: int = 32
    color_jitter: float = 0.2
    binarize_targets: bool = False


@dataclass
class SegPrediction:
    prob: torch.Tensor
    binary: torch.Tensor


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, depth: int = 4, base_channels: int = 32, in_channels: int = 3):
        super().__init__()
        self.depth = depth
        widths = [base_channels << i for i in range(depth + 1)]
        self.down = nn.ModuleList([_double_conv(in_channels, widths[0])])
        self.down.extend(_double_conv(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth))
        )
        self.merge = nn.ModuleList(_double_conv(2 * widths[i], widths[i]) for i in reversed(range(depth)))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def logits(self, x):
        skips = []
        h = x
        for i, block in enumerate(self.down):
            if i:
                h = F.max_pool2d(h, 2)
            h = block(h)
            skips.append(h)
        skips.pop()
        for up, merge in zip(self.up, self.merge):
            h = merge(torch.cat([skips.pop(), up(h)], 1))
        return self.head(h)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def segment(net: UNet, x: torch.Tensor, threshold: float = 0.5) -> SegPrediction:
    k = 2 ** net.depth
    if x.dim() != 4 or x.shape[-1] % k or x.shape[-2] % k:
        raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {k}")
    prob = net(x)
    return SegPrediction(prob, binarize(prob, threshold))


def binarize(prob: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    return prob >= threshold


@torch.no_grad()
def predict_masks(net: UNet, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    """Binary masks for a stack of images, evaluated in eval mode."""
    was = net.training
    net.eval()
    try:
        out = [segment(net, images[i:i + batch_size]).binary for i in range(0, len(images), batch_size)]
    finally:
        net.train(was)
    return torch.cat(out)
