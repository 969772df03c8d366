"""FID / bg-FID, per-pixel segmentation scores and clustering metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Protocol

import numpy as np
import torch
import torch.nn as nn
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from .errors import NumericError

PSD_TOL = 1e-5


class FeatureExtractor(Protocol):
    def embed(self, images) -> np.ndarray: ...


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, feats: np.ndarray) -> "GaussianStats":
        acc = StatsAccumulator(feats.shape[1])
        acc.update(feats)
        return acc.stats()


class StatsAccumulator:
    """Streaming mean/covariance; batches merge with Chan's parallel update."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64)
        nb = batch.shape[0]
        if nb == 0:
            return
        mb = batch.mean(0)
        centred = batch - mb
        m2b = centred.T @ centred
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + np.outer(delta, delta) * (self.n * nb / n)
        self.n = n

    def stats(self) -> GaussianStats:
        if self.n < 2:
            raise ValueError("need at least 2 samples for a covariance")
        cov = self.m2 / (self.n - 1)
        return GaussianStats(self.mean.copy(), (cov + cov.T) / 2)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which shares its spectrum
    with ``S_a S_b``.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    ra = _sqrt_psd(a.cov)
    prod = ra @ b.cov @ ra
    w = np.linalg.eigvalsh((prod + prod.T) / 2)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -PSD_TOL * scale:
        raise NumericError(f"covariance product not PSD (min eigenvalue {w.min():.3e})")
    tr_root = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_root
    return float(max(d, 0.0))


class IdentityExtractor:
    """Flattened pixels as features."""

    def embed(self, images) -> np.ndarray:
        x = images.detach().cpu().numpy() if torch.is_tensor(images) else np.asarray(images)
        return x.reshape(len(x), -1).astype(np.float64)


class RandomProjectionExtractor:
    """Frozen conv net with orthogonal weights; a cheap stand-in for Inception features."""

    def __init__(self, dim: int = 64, seed: int = 0, channels: int = 32):
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels * 2, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(4), nn.Flatten(), nn.Linear(channels * 32, dim),
        )
        for m in self.net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                w = torch.empty_like(m.weight)
                flat = w.view(w.shape[0], -1)
                q, _ = torch.linalg.qr(torch.randn(max(flat.shape), min(flat.shape), generator=gen))
                flat.copy_(q if flat.shape[0] >= flat.shape[1] else q.T)
                with torch.no_grad():
                    m.weight.copy_(w)
                    m.bias.zero_()
        self.net.eval().requires_grad_(False)

    @torch.no_grad()
    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        x = torch.as_tensor(images, dtype=torch.float32)
        out = [self.net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return torch.cat(out).double().numpy()


class FileFeatures:
    """Pre-computed features stored as ``.npy`` (shape-tagged float32 matrix)."""

    def __init__(self, path):
        self.path = Path(path)

    def embed(self, images=None) -> np.ndarray:
        feats = np.load(self.path)
        if feats.ndim != 2:
            raise ValueError(f"{self.path}: expected a 2-D feature matrix, got {feats.shape}")
        return feats.astype(np.float64)


def save_features(path, feats: np.ndarray) -> None:
    np.save(path, np.asarray(feats, dtype=np.float32))


def fid_from_features(real: np.ndarray, fake: np.ndarray) -> float:
    for name, f in (("real", real), ("fake", fake)):
        if len(f) == 0:
            raise ValueError(f"empty {name} set")
        if len(f) < 2:
            raise ValueError(f"{name} set needs at least 2 samples")
        if len(f) <= f.shape[1]:
            warnings.warn(f"{name} set has {len(f)} samples for {f.shape[1]} features; covariance is singular")
    return frechet_distance(GaussianStats.fit(real), GaussianStats.fit(fake))


def fid(real_images, fake_images, fx: FeatureExtractor) -> float:
    """FID between two image sets; bg-FID is this with generated backgrounds as ``fake_images``."""
    if len(real_images) == 0 or len(fake_images) == 0:
        raise ValueError("empty image set")
    return fid_from_features(fx.embed(real_images), fx.embed(fake_images))


# --------------------------------------------------------------------------- segmentation


def _as_bool(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.asarray(t).astype(bool)


def seg_scores(pred, gt) -> Dict[str, float]:
    """ACC, micro-averaged foreground IoU, mIoU (fg/bg) and the per-image macro IoU.

    Inputs are boolean masks, ``[n, ...]`` or a single image.
    """
    p, g = _as_bool(pred), _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.ndim <= 2:
        p, g = p[None], g[None]
    p, g = p.reshape(len(p), -1), g.reshape(len(g), -1)
    inter_fg, union_fg = (p & g).sum(1), (p | g).sum(1)
    inter_bg, union_bg = (~p & ~g).sum(1), (~p | ~g).sum(1)

    def ratio(i, u):
        return float(i.sum() / u.sum()) if u.sum() else 1.0

    iou_fg = ratio(inter_fg, union_fg)
    iou_bg = ratio(inter_bg, union_bg)
    per_image = np.where(union_fg > 0, inter_fg / np.maximum(union_fg, 1), 1.0)
    return {
        "ACC": float((p == g).mean()),
        "IoU": iou_fg,
        "mIoU": (iou_fg + iou_bg) / 2,
        "IoU_macro": float(per_image.mean()),
    }


def _labels(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.asarray(t).reshape(-1)


def ari(pred_labels, gt_labels, domain: str = "all") -> float:
    """Adjusted Rand index between two pixel partitions of one image.

    ``domain="foreground"`` restricts to pixels with non-zero ground-truth label.
    """
    p, g = _labels(pred_labels), _labels(gt_labels)
    if p.shape != g.shape:
        raise ValueError("partitions cover different pixel counts")
    if domain == "foreground":
        keep = g != 0
        p, g = p[keep], g[keep]
    elif domain != "all":
        raise ValueError(f"unknown domain {domain!r}")
    if p.size < 2:
        raise ValueError("ARI needs at least 2 pixels")
    return float(adjusted_rand_score(g, p))


def msc(pred_labels, gt_labels) -> float:
    """Size-weighted segmentation covering of the ground-truth segments by the prediction."""
    p, g = _labels(pred_labels), _labels(gt_labels)
    if p.shape != g.shape:
        raise ValueError("partitions cover different pixel counts")
    if p.size < 2:
        raise ValueError("MSC needs at least 2 pixels")
    cont = contingency_matrix(g, p)
    g_size = cont.sum(1, keepdims=True)
    p_size = cont.sum(0, keepdims=True)
    iou = cont / (g_size + p_size - cont)
    return float((g_size[:, 0] / g_size.sum() * iou.max(1)).sum())


def nmi(pred_categories, gt_categories) -> float:
    """``I(pred; gt) / sqrt(H(pred) H(gt))``; zero when either side has no entropy,
    except that two constant labelings give 1."""
    p, g = _labels(pred_categories), _labels(gt_categories)
    if p.shape != g.shape or p.size < 1:
        raise ValueError("need equally many (>= 1) labels on both sides")
    return float(normalized_mutual_info_score(g, p, average_method="geometric"))


def mean_over_images(fn, preds, gts, **kw) -> float:
    return float(np.mean([fn(p, g, **kw) for p, g in zip(preds, gts)]))


@dataclass
class MetricsReport:
    values: Dict[str, float]
    config: Optional[dict] = None

    def to_json(self) -> dict:
        return {**{k: float(v) for k, v in self.values.items()},
                **({"config": self.config} if self.config else {})}

    def table(self) -> str:
        w = max(len(k) for k in self.values)
        return "\n".join(f"{k:<{w}}  {v:.4f}" for k, v in self.values.items())
