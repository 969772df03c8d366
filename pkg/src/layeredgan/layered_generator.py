"""Background/foreground generators, restricted-affine perturbation and composition."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ExportError
from .imaging import save_image, save_mask
from .latent import LatentBatch, LatentConfig, sample_latents

Range = Tuple[float, float]


@dataclass
class GeneratorConfig:
    resolution: int = 64
    base_channels: int = 256
    min_channels: int = 32
    c_embed: int = 16
    mask_bias: float = 0.0
    # perturbation ranges; shifts in pixels, rotation in degrees
    scale: Range = (-0.2, 0.0)
    shift: Range = (-16.0, 16.0)
    rotation: Range = (-15.0, 15.0)
    contrast: Range = (1.0, 1.0)

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        for name in ("scale", "shift", "rotation", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range has lo > hi: {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        if self.contrast[0] <= 0:
            raise ValueError("contrast factors must be positive")

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.resolution // 4))

    def widths(self):
        """Channel width after the 4x4 seed and after every upsampling stage."""
        return [max(self.base_channels >> i, self.min_channels) for i in range(self.n_stages + 1)]


@dataclass
class LayerSet:
    x_b: torch.Tensor
    x_f: torch.Tensor
    mask: torch.Tensor

    def check(self):
        b, _, h, w = self.x_b.shape
        if self.x_f.shape != self.x_b.shape or self.mask.shape != (b, 1, h, w):
            raise ValueError(
                f"layer shapes disagree: x_b {tuple(self.x_b.shape)}, "
                f"x_f {tuple(self.x_f.shape)}, mask {tuple(self.mask.shape)}"
            )


@dataclass
class PerturbParams:
    """Per-sample perturbation; every field is a tensor of shape ``[batch]``."""

    s: torch.Tensor
    t_x: torch.Tensor
    t_y: torch.Tensor
    alpha: torch.Tensor
    contrast: torch.Tensor = field(default=None)

    def __post_init__(self):
        for name in ("s", "t_x", "t_y", "alpha"):
            v = getattr(self, name)
            if not torch.is_tensor(v):
                setattr(self, name, torch.as_tensor(v, dtype=torch.float64))
        if self.contrast is None:
            self.contrast = torch.ones_like(self.s)

    @classmethod
    def identity(cls, batch: int, dtype=torch.float32):
        z = torch.zeros(batch, dtype=dtype)
        return cls(z, z.clone(), z.clone(), z.clone(), torch.ones(batch, dtype=dtype))


def init_orthogonal(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.orthogonal_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class UpBlock(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class _Trunk(nn.Module):
    """Linear projection to a 4x4 seed followed by upsampling blocks."""

    def __init__(self, d_in, widths):
        super().__init__()
        self.c0 = widths[0]
        self.fc = nn.Linear(d_in, widths[0] * 16)
        self.bn = nn.BatchNorm2d(widths[0])
        self.blocks = nn.Sequential(*[UpBlock(a, b) for a, b in zip(widths[:-1], widths[1:])])

    def forward(self, h):
        h = self.fc(h).view(h.shape[0], self.c0, 4, 4)
        return self.blocks(F.relu(self.bn(h)))


class BackgroundGenerator(nn.Module):
    def __init__(self, lcfg: LatentConfig, gcfg: GeneratorConfig):
        super().__init__()
        widths = gcfg.widths()
        self.trunk = _Trunk(lcfg.d_z, widths)
        self.to_rgb = nn.Conv2d(widths[-1], 3, 3, padding=1)
        init_orthogonal(self)

    def forward(self, z):
        return torch.tanh(self.to_rgb(self.trunk(z)))


class ForegroundGenerator(nn.Module):
    """Mask branch sees ``(z, c_sup)`` only; the appearance branch adds the child code."""

    def __init__(self, lcfg: LatentConfig, gcfg: GeneratorConfig):
        super().__init__()
        widths = gcfg.widths()
        self.trunk = _Trunk(lcfg.d_z + lcfg.n_super, widths)
        self.to_mask = nn.Conv2d(widths[-1], 1, 3, padding=1)
        self.embed_c = nn.Linear(lcfg.d_c, gcfg.c_embed)
        w = widths[-1]
        self.appearance = nn.Sequential(
            nn.Conv2d(w + gcfg.c_embed, w, 3, padding=1),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 3, 3, padding=1),
        )
        init_orthogonal(self)
        nn.init.constant_(self.to_mask.bias, gcfg.mask_bias)

    def forward(self, z, c, c_sup):
        h = self.trunk(torch.cat([z, c_sup], 1))
        mask = torch.sigmoid(self.to_mask(h))
        e = self.embed_c(c)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        x_f = torch.tanh(self.appearance(torch.cat([h, e], 1)))
        return x_f, mask


class LayeredGenerator(nn.Module):
    def __init__(self, lcfg: LatentConfig, gcfg: GeneratorConfig):
        super().__init__()
        self.lcfg, self.gcfg = lcfg, gcfg
        self.bg = BackgroundGenerator(lcfg, gcfg)
        self.fg = ForegroundGenerator(lcfg, gcfg)

    def forward(self, lb: LatentBatch) -> LayerSet:
        x_b = generate_background(self.bg, lb.z)
        x_f, mask = generate_foreground(self.fg, lb)
        return LayerSet(x_b, x_f, mask)


def generate_background(net: BackgroundGenerator, z: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(z).all():
        raise ValueError("non-finite public code")
    return net(z)


def generate_foreground(net: ForegroundGenerator, lb: LatentBatch):
    n = lb.z.shape[0]
    if lb.c.shape[0] != n or lb.mask_code.shape[0] != n:
        raise ValueError(
            f"batch sizes differ: z {n}, c {lb.c.shape[0]}, c_sup {lb.mask_code.shape[0]}"
        )
    return net(lb.z, lb.c, lb.mask_code)


def compose(ls: LayerSet) -> torch.Tensor:
    ls.check()
    return (1 - ls.mask) * ls.x_b + ls.mask * ls.x_f


def affine_matrix(p: PerturbParams) -> torch.Tensor:
    """``T(t_x, t_y) @ R(alpha) @ S(s)``, shape ``[..., 3, 3]``."""
    s = p.s
    t_x, t_y, alpha = (torch.as_tensor(v, dtype=s.dtype) for v in (p.t_x, p.t_y, p.alpha))
    k = torch.exp2(s)
    cos, sin = torch.cos(alpha), torch.sin(alpha)
    zero, one = torch.zeros_like(k), torch.ones_like(k)
    rows = [
        torch.stack([k * cos, -k * sin, t_x * one], -1),
        torch.stack([k * sin, k * cos, t_y * one], -1),
        torch.stack([zero, zero, one], -1),
    ]
    return torch.stack(rows, -2)


def _bilinear_sample(img, xs, ys):
    """Sample ``img`` at pixel coordinates; out-of-bounds neighbours read as 0."""
    b, c, h, w = img.shape
    x0, y0 = torch.floor(xs), torch.floor(ys)
    wx, wy = xs - x0, ys - y0
    flat = img.reshape(b, c, h * w)
    out = torch.zeros_like(img)
    for dx, dy, wgt in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                        (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long().reshape(b, 1, h * w)
        vals = torch.gather(flat, 2, idx.expand(-1, c, -1)).reshape(b, c, h, w)
        out = out + vals * (wgt * valid)[:, None]
    return out


def warp(img: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """Inverse warp: ``out(u, v) = img(A^-1 (u, v, 1))``.

    Pixel coordinates are centred on the image centre, so rotation and scaling
    act about the middle of the frame and translations are in pixels.
    """
    b, _, h, w = img.shape
    if A.dim() == 2:
        A = A.expand(b, 3, 3)
    det = torch.linalg.det(A[:, :2, :2])
    if (det.abs() < 1e-12).any():
        raise ValueError("singular perturbation matrix")
    inv = torch.linalg.inv(A.to(torch.float64)).to(img.dtype)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=img.dtype) - cy, torch.arange(w, dtype=img.dtype) - cx,
        indexing="ij",
    )
    def row(i):
        return (inv[:, i, 0, None, None] * xs + inv[:, i, 1, None, None] * ys
                + inv[:, i, 2, None, None])
    return _bilinear_sample(img, row(0) + cx, row(1) + cy)


def sample_perturbation(cfg: GeneratorConfig, batch: int, rng: torch.Generator,
                        dtype=torch.float32) -> PerturbParams:
    def uniform(lo_hi):
        lo, hi = lo_hi
        if lo > hi:
            raise ValueError(f"invalid range {lo_hi}")
        u = torch.rand(batch, generator=rng, dtype=dtype)
        return lo + (hi - lo) * u

    s = uniform(cfg.scale)
    t_x = uniform(cfg.shift)
    t_y = uniform(cfg.shift)
    alpha = uniform(cfg.rotation) * (math.pi / 180)
    contrast = uniform(cfg.contrast)
    return PerturbParams(s, t_x, t_y, alpha, contrast)


def jitter_contrast(x_b: torch.Tensor, contrast: torch.Tensor) -> torch.Tensor:
    """Scale ``x_b`` in [0, 1] space by a per-sample factor; factor 1 is a no-op."""
    k = contrast.to(x_b.dtype)[:, None, None, None]
    jittered = (((x_b + 1) / 2) * k * 2 - 1).clamp(-1, 1)
    return torch.where(k == 1, x_b, jittered)


def perturb_compose(ls: LayerSet, p: PerturbParams) -> torch.Tensor:
    ls.check()
    A = affine_matrix(p)
    mask = warp(ls.mask, A)
    x_f = warp(ls.x_f, A)
    # background jitter first, then the blend
    x_b = jitter_contrast(ls.x_b, p.contrast)
    return (1 - mask) * x_b + mask * x_f


@torch.no_grad()
def synthesize(G: LayeredGenerator, n: int, rng: torch.Generator,
               batch_size: int = 64) -> Iterator[Tuple[LatentBatch, LayerSet, torch.Tensor]]:
    """Yield ``(latents, layers, composed)`` batches totalling ``n`` samples, eval mode."""
    if n < 1:
        raise ValueError("n must be positive")
    was_training = G.training
    G.eval()
    try:
        done = 0
        while done < n:
            b = min(batch_size, n - done)
            lb = sample_latents(b, G.lcfg, rng)
            ls = G(lb)
            yield lb, ls, compose(ls)
            done += b
    finally:
        G.train(was_training)


def synthesize_dataset(G: LayeredGenerator, n: int, rng: torch.Generator, batch_size=64):
    """Materialise ``n`` synthetic pairs as tensors ``(images, masks, labels)``."""
    imgs, masks, labels = [], [], []
    for lb, ls, x in synthesize(G, n, rng, batch_size):
        imgs.append(x)
        masks.append(ls.mask)
        labels.append(lb.labels if lb.labels is not None else torch.full((len(lb),), -1))
    return torch.cat(imgs), torch.cat(masks), torch.cat(labels)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def export_synthetic(G: LayeredGenerator, n: int, out_dir, rng: torch.Generator,
                     batch_size: int = 64, checkpoint_hash: Optional[str] = None) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    written = 0
    rows = []
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        for lb, ls, x in synthesize(G, n, rng, batch_size):
            for i in range(len(lb)):
                idx = written
                save_image(x[i], out / "images" / f"{idx:06d}.png")
                save_mask(ls.mask[i], out / "masks" / f"{idx:06d}.png")
                row = {"index": idx, "z": lb.z[i].tolist()}
                if lb.labels is not None:
                    row["category"] = int(lb.labels[i])
                    row["super_category"] = int(lb.sup_labels[i])
                    row["c"] = int(lb.labels[i])
                else:
                    row["category"] = None
                    row["c"] = lb.c[i].tolist()
                rows.append(row)
                written += 1
        manifest = {
            "count": written,
            "prior_c": G.lcfg.prior_c,
            "d_c": G.lcfg.d_c,
            "generator_hash": checkpoint_hash or state_hash(G),
            "samples": rows,
        }
        (out / "manifest.json").write_text(json.dumps(manifest))
    except OSError as e:
        raise ExportError(f"export to {out} failed: {e}", written) from e
    return out


def layer_mosaic_rows(ls: LayerSet, x: torch.Tensor):
    """Rows background / masked foreground / mask / composite, mask mapped to [-1, 1]."""
    return [ls.x_b, ls.x_f * ls.mask, ls.mask * 2 - 1, x]


def centroid(mask: torch.Tensor) -> np.ndarray:
    """Mass centroid ``(x, y)`` in pixels of a ``[H, W]`` or ``[1, H, W]`` map."""
    m = mask.detach().to(torch.float64).reshape(mask.shape[-2:])
    ys, xs = torch.meshgrid(torch.arange(m.shape[0], dtype=m.dtype),
                            torch.arange(m.shape[1], dtype=m.dtype), indexing="ij")
    tot = m.sum()
    return np.array([(m * xs).sum() / tot, (m * ys).sum() / tot])
