"""Image-folder ingestion and augmentation, plus a procedural toy set of shapes on texture."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError
from .imaging import save_image, save_mask, uint8_to_image, uint8_to_mask

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class LabeledSample:
    image: torch.Tensor
    mask: Optional[torch.Tensor] = None
    category: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.mask is not None and self.mask.shape[-2:] != self.image.shape[-2:]:
            raise ValueError("mask and image sizes differ")


# --------------------------------------------------------------------------- folders


def _resize_center_crop(img: Image.Image, size: int, resample) -> Image.Image:
    w, h = img.size
    k = size / min(w, h)
    nw, nh = max(size, round(w * k)), max(size, round(h * k))
    if (nw, nh) != (w, h):
        img = img.resize((nw, nh), resample)
    left, top = (nw - size) // 2, (nh - size) // 2
    return img.crop((left, top, left + size, top + size))


class ImageFolderDataset:
    """``root/images/*`` with optional name-matched ``root/masks/*``; decoded lazily.

    Files are ordered lexicographically. With ``resolution`` set, images and
    masks are rescaled (shorter side) and centre cropped.
    """

    def __init__(self, root, with_masks: bool = False, resolution: Optional[int] = None):
        self.root = Path(root)
        self.with_masks = with_masks
        self.resolution = resolution
        img_dir = self.root / "images"
        if not img_dir.is_dir():
            raise DatasetError(f"missing image directory {img_dir}")
        self.files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        self.mask_files = {}
        if with_masks:
            masks = {p.stem: p for p in (self.root / "masks").glob("*") if p.suffix.lower() in IMAGE_SUFFIXES}
            for f in self.files:
                if f.stem not in masks:
                    raise DatasetError(f"no mask for image {f.name}")
                self.mask_files[f.stem] = masks[f.stem]
        self.categories = {}
        manifest = self.root / "manifest.json"
        if manifest.exists():
            for row in json.loads(manifest.read_text()).get("samples", []):
                if row.get("category") is not None:
                    self.categories[f"{row['index']:06d}"] = row["category"]
        self.skipped = 0

    def __len__(self):
        return len(self.files)

    def _load(self, path, mode, resample):
        img = Image.open(path)
        img = img.convert(mode)
        if self.resolution:
            img = _resize_center_crop(img, self.resolution, resample)
        return np.asarray(img)

    def __getitem__(self, i) -> LabeledSample:
        f = self.files[i]
        image = uint8_to_image(self._load(f, "RGB", Image.BILINEAR))
        mask = None
        if self.with_masks:
            mask = uint8_to_mask(self._load(self.mask_files[f.stem], "L", Image.NEAREST))
        return LabeledSample(image, mask, self.categories.get(f.stem), f.name)

    def __iter__(self):
        for i in range(len(self)):
            try:
                yield self[i]
            except (UnidentifiedImageError, OSError) as e:
                self.skipped += 1
                log.warning("skipping undecodable %s: %s", self.files[i], e)


def load_image_folder(root, with_masks: bool = False, resolution: Optional[int] = None):
    return ImageFolderDataset(root, with_masks, resolution)


def stack_samples(samples) -> Tuple[torch.Tensor, Optional[torch.Tensor], torch.Tensor, List[str]]:
    samples = list(samples)
    if not samples:
        raise DatasetError("empty dataset")
    images = torch.stack([s.image for s in samples])
    masks = torch.stack([s.mask for s in samples]) if samples[0].mask is not None else None
    cats = torch.tensor([-1 if s.category is None else s.category for s in samples])
    return images, masks, cats, [s.name for s in samples]


def write_folder(root, images, masks=None, categories=None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(images)):
        save_image(images[i], root / "images" / f"{i:06d}.png")
        if masks is not None:
            (root / "masks").mkdir(exist_ok=True)
            save_mask(masks[i], root / "masks" / f"{i:06d}.png")
        cat = None if categories is None else int(categories[i])
        rows.append({"index": i, "category": cat})
    (root / "manifest.json").write_text(json.dumps({"count": len(images), "samples": rows}))
    return root


# --------------------------------------------------------------------------- augmentation


def augment_batch(images: torch.Tensor, masks: Optional[torch.Tensor], gen: torch.Generator,
                  scale: Tuple[float, float] = (0.8, 1.0), flip_p: float = 0.5):
    """Random horizontal flip and square random-resized crop, same geometry for masks."""
    b = images.shape[0]
    flip = torch.rand(b, generator=gen) < flip_p
    area = scale[0] + (scale[1] - scale[0]) * torch.rand(b, generator=gen, dtype=torch.float64)
    side = area.sqrt()
    ox = (2 * torch.rand(b, generator=gen, dtype=torch.float64) - 1) * (1 - side)
    oy = (2 * torch.rand(b, generator=gen, dtype=torch.float64) - 1) * (1 - side)
    return apply_geometry(images, masks, flip, side, ox, oy)


def apply_geometry(images, masks, flip, side, ox, oy):
    """Crop of relative ``side`` centred at normalised offset ``(ox, oy)``, then optional flip."""
    def run(t):
        if t is None:
            return None
        theta = torch.zeros(t.shape[0], 2, 3, dtype=t.dtype)
        theta[:, 0, 0] = side.to(t.dtype)
        theta[:, 1, 1] = side.to(t.dtype)
        theta[:, 0, 2] = ox.to(t.dtype)
        theta[:, 1, 2] = oy.to(t.dtype)
        grid = F.affine_grid(theta, list(t.shape), align_corners=False)
        cropped = F.grid_sample(t, grid, mode="bilinear", padding_mode="border", align_corners=False)
        keep = ((side == 1) & (ox == 0) & (oy == 0))[:, None, None, None]
        out = torch.where(keep, t, cropped)
        return torch.where(flip[:, None, None, None], out.flip(-1), out)
    return run(images), run(masks)


def augment_real(sample: LabeledSample, gen: torch.Generator, scale=(0.8, 1.0), flip_p=0.5):
    masks = None if sample.mask is None else sample.mask[None]
    img, m = augment_batch(sample.image[None], masks, gen, scale, flip_p)
    return LabeledSample(img[0], None if m is None else m[0], sample.category, sample.name)


def color_jitter(images: torch.Tensor, gen: torch.Generator, strength: float = 0.2) -> torch.Tensor:
    """Photometric jitter of +-``strength`` applied to images only."""
    if strength <= 0:
        return images
    b = images.shape[0]

    def u():
        return ((2 * torch.rand(b, generator=gen) - 1) * strength).to(images.dtype)[:, None, None, None]

    x = images + u()
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * (1 + u()) + mean
    gray = x.mean(dim=1, keepdim=True)
    x = (x - gray) * (1 + u()) + gray
    return x.clamp(-1, 1)


# --------------------------------------------------------------------------- toy data

PALETTE = np.array([
    [0.9, -0.75, -0.75],   # red
    [-0.75, 0.8, -0.75],   # green
    [-0.75, -0.6, 0.95],   # blue
    [0.9, 0.85, -0.8],     # yellow
    [0.9, -0.7, 0.9],      # magenta
    [-0.8, 0.85, 0.9],     # cyan
    [0.95, 0.2, -0.85],    # orange
    [-0.2, -0.85, 0.7],    # violet
])
SHAPES = ("ellipse", "rectangle", "triangle")


@dataclass
class ToySpec:
    resolution: int = 32
    shapes: Sequence[str] = SHAPES
    k_colors: int = 4
    area_range: Tuple[float, float] = (0.1, 0.3)
    seed: int = 0
    supersample: int = 4

    def __post_init__(self):
        lo, hi = self.area_range
        if not (0 < lo <= hi <= 0.6):
            raise ValueError(f"area range must lie in (0, 0.6], got {self.area_range}")
        if not 1 <= self.k_colors <= len(PALETTE):
            raise ValueError(f"k_colors must be in [1, {len(PALETTE)}]")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        self.shapes = tuple(self.shapes)
        self.area_range = (float(lo), float(hi))

    def to_json(self):
        return asdict(self)


@dataclass
class ToyData:
    images: torch.Tensor
    masks: torch.Tensor
    labels: torch.Tensor
    shapes: torch.Tensor
    backgrounds: torch.Tensor = field(repr=False, default=None)

    def __len__(self):
        return len(self.images)

    def sample(self, i) -> LabeledSample:
        return LabeledSample(self.images[i], self.masks[i], int(self.labels[i]))


def _toy_background(rng: np.random.Generator, r: int) -> np.ndarray:
    """Smooth grey-ish gradient plus low-frequency noise, ``[3, r, r]``."""
    yy, xx = np.mgrid[0:r, 0:r] / (r - 1) - 0.5
    level = rng.uniform(-0.45, 0.45)
    tint = rng.uniform(-0.08, 0.08, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    grad = rng.uniform(0.1, 0.5) * (np.cos(theta) * xx + np.sin(theta) * yy)
    coarse = rng.normal(0, 0.12, size=(1, 1, 4, 4))
    noise = F.interpolate(torch.from_numpy(coarse), size=(r, r), mode="bicubic",
                          align_corners=True)[0, 0].numpy()
    lum = level + grad + noise
    bg = lum[None] + tint[:, None, None]
    return np.clip(bg, -0.85, 0.85)


def _shape_coverage(rng: np.random.Generator, spec: ToySpec, kind: str) -> np.ndarray:
    r, ss = spec.resolution, spec.supersample
    area = rng.uniform(*spec.area_range) * r * r
    rot = rng.uniform(0, np.pi)
    aspect = rng.uniform(0.6, 1.6)
    if kind == "ellipse":
        a = math.sqrt(area * aspect / math.pi)
        b = area / (math.pi * a)
        radius = max(a, b)
    elif kind == "rectangle":
        a = math.sqrt(area * aspect) / 2
        b = area / (4 * a)
        radius = math.hypot(a, b)
    else:
        side = math.sqrt(4 * area / math.sqrt(3))
        radius = side / math.sqrt(3)
    radius = min(radius, r / 2)
    cx, cy = rng.uniform(radius, r - radius, size=2)
    sub = (np.arange(r * ss) + 0.5) / ss
    ys, xs = np.meshgrid(sub, sub, indexing="ij")
    dx, dy = xs - cx, ys - cy
    u = np.cos(rot) * dx + np.sin(rot) * dy
    v = -np.sin(rot) * dx + np.cos(rot) * dy
    if kind == "ellipse":
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1
    elif kind == "rectangle":
        inside = (np.abs(u) <= a) & (np.abs(v) <= b)
    else:
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            phi = rot + np.pi / 2 + 2 * np.pi * k / 3
            # edge k has outward normal at angle phi + pi, inradius = radius / 2
            inside &= -(np.cos(phi) * dx + np.sin(phi) * dy) <= radius / 2
    return inside.reshape(r, ss, r, ss).mean(axis=(1, 3))


def render_toy(spec: ToySpec, index: int):
    """``(image, mask, color_index, shape_index, background)`` for one toy sample."""
    rng = np.random.default_rng([spec.seed, index])
    bg = _toy_background(rng, spec.resolution)
    color = int(rng.integers(spec.k_colors))
    shape = int(rng.integers(len(spec.shapes)))
    cov = _shape_coverage(rng, spec, spec.shapes[shape])
    img = (1 - cov) * bg + cov * PALETTE[color][:, None, None]
    return img, cov, color, shape, bg


def make_toy(spec: ToySpec, n: int, start: int = 0, keep_background: bool = False) -> ToyData:
    if n < 1:
        raise ValueError("n must be positive")
    out = [render_toy(spec, start + i) for i in range(n)]
    images = torch.from_numpy(np.stack([o[0] for o in out])).float()
    masks = torch.from_numpy(np.stack([o[1] for o in out]))[:, None].float()
    labels = torch.tensor([o[2] for o in out])
    shapes = torch.tensor([o[3] for o in out])
    bgs = torch.from_numpy(np.stack([o[4] for o in out])).float() if keep_background else None
    return ToyData(images, masks, labels, shapes, bgs)


def write_toy(spec: ToySpec, n: int, root, start: int = 0) -> Path:
    data = make_toy(spec, n, start)
    root = write_folder(root, data.images, data.masks, data.labels)
    (Path(root) / "toy_spec.json").write_text(json.dumps({**spec.to_json(), "n": n, "start": start}))
    return root
