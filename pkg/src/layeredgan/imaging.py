"""Tensor <-> 8-bit image conversion and PNG helpers."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def image_to_uint8(x: torch.Tensor) -> np.ndarray:
    """``[3, H, W]`` in [-1, 1] -> ``[H, W, 3]`` uint8."""
    x = x.detach().to(torch.float64).clamp(-1, 1)
    arr = torch.round((x + 1) * 127.5).to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def mask_to_uint8(m: torch.Tensor) -> np.ndarray:
    """``[1, H, W]`` or ``[H, W]`` in [0, 1] -> ``[H, W]`` uint8, value round(255*m)."""
    m = m.detach().to(torch.float64).clamp(0, 1)
    if m.dim() == 3:
        m = m[0]
    return torch.round(m * 255).to(torch.uint8).cpu().numpy()


def uint8_to_image(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.array(arr, copy=True)).to(torch.float32)
    if t.dim() == 2:
        t = t[..., None].expand(-1, -1, 3)
    return t.permute(2, 0, 1) / 127.5 - 1


def uint8_to_mask(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, copy=True)).to(torch.float32)[None] / 255


def save_image(x: torch.Tensor, path) -> None:
    Image.fromarray(image_to_uint8(x), mode="RGB").save(path)


def save_mask(m: torch.Tensor, path) -> None:
    Image.fromarray(mask_to_uint8(m), mode="L").save(path)


def save_mosaic(rows, path, pad: int = 1) -> None:
    """Save a grid; ``rows`` is a list of ``[n, C, H, W]`` tensors in [-1, 1]."""
    tiles = []
    for row in rows:
        row = row.detach().float()
        if row.shape[1] == 1:
            row = row.expand(-1, 3, -1, -1)
        tiles.append(row)
    n = max(r.shape[0] for r in tiles)
    _, _, h, w = tiles[0].shape
    canvas = torch.ones(3, len(tiles) * (h + pad) + pad, n * (w + pad) + pad)
    for i, row in enumerate(tiles):
        for j in range(row.shape[0]):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[:, y:y + h, x:x + w] = row[j]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image(canvas, path)
