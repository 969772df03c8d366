"""Public code ``z`` and two-level (parent/child) private code ``c``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

CATEGORICAL = "categorical"
NORMAL = "normal"


@dataclass(frozen=True)
class LatentConfig:
    d_z: int = 128
    prior_c: str = CATEGORICAL
    d_c: int = 200
    group_size: int = 10

    def __post_init__(self):
        if self.d_z < 1 or self.d_c < 1 or self.group_size < 1:
            raise ValueError("latent sizes must be positive")
        if self.prior_c not in (CATEGORICAL, NORMAL):
            raise ValueError(f"unknown prior_c {self.prior_c!r}")
        if self.prior_c == CATEGORICAL and self.d_c % self.group_size:
            raise ValueError(
                f"group_size={self.group_size} does not divide d_c={self.d_c}"
            )

    @property
    def categorical(self) -> bool:
        return self.prior_c == CATEGORICAL

    @property
    def n_super(self) -> int:
        """Number of parent categories (``d_c`` itself for the normal prior)."""
        return self.d_c // self.group_size if self.categorical else self.d_c


@dataclass
class LatentBatch:
    z: torch.Tensor
    c: torch.Tensor
    c_sup: Optional[torch.Tensor] = None
    # integer labels carried alongside the one-hot codes (categorical only)
    labels: Optional[torch.Tensor] = None
    sup_labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.z.shape[0]

    @property
    def mask_code(self) -> torch.Tensor:
        """Code driving the mask branch: ``c_sup``, or ``c`` for the normal prior."""
        return self.c if self.c_sup is None else self.c_sup


def _check_batch(batch):
    if int(batch) != batch or batch < 1:
        raise ValueError(f"batch must be a positive integer, got {batch!r}")


def group_of(index, group_size: int):
    """Parent category of child ``index``; works on ints and integer tensors."""
    if group_size < 1:
        raise ValueError("group_size must be positive")
    if isinstance(index, torch.Tensor):
        if (index < 0).any():
            raise ValueError("negative category index")
        return torch.div(index, group_size, rounding_mode="floor")
    if index < 0:
        raise ValueError(f"negative category index {index}")
    return index // group_size


def checked_group_of(index: int, group_size: int, d_c: int) -> int:
    if not 0 <= index < d_c:
        raise ValueError(f"index {index} outside [0, {d_c})")
    return group_of(index, group_size)


def sample_public(batch: int, cfg: LatentConfig, rng: torch.Generator,
                  dtype=torch.float32) -> torch.Tensor:
    _check_batch(batch)
    return torch.randn(batch, cfg.d_z, generator=rng, dtype=dtype)


def private_from_labels(labels: torch.Tensor, cfg: LatentConfig, dtype=torch.float32):
    """One-hot ``c`` / ``c_sup`` for given child labels."""
    sup = group_of(labels, cfg.group_size)
    c = F.one_hot(labels, cfg.d_c).to(dtype)
    c_sup = F.one_hot(sup, cfg.n_super).to(dtype)
    return c, c_sup, sup


def sample_private(batch: int, cfg: LatentConfig, rng: torch.Generator,
                   dtype=torch.float32) -> LatentBatch:
    """Private part only; ``z`` is left empty (shape ``[batch, 0]``)."""
    _check_batch(batch)
    empty = torch.empty(batch, 0, dtype=dtype)
    if not cfg.categorical:
        return LatentBatch(z=empty, c=torch.randn(batch, cfg.d_c, generator=rng, dtype=dtype))
    labels = torch.randint(cfg.d_c, (batch,), generator=rng)
    c, c_sup, sup = private_from_labels(labels, cfg, dtype)
    return LatentBatch(z=empty, c=c, c_sup=c_sup, labels=labels, sup_labels=sup)


def sample_latents(batch: int, cfg: LatentConfig, rng: torch.Generator,
                   dtype=torch.float32) -> LatentBatch:
    z = sample_public(batch, cfg, rng, dtype)
    lb = sample_private(batch, cfg, rng, dtype)
    lb.z = z
    return lb


def prior_entropy(cfg: LatentConfig) -> float:
    """Entropy of the prior over ``c`` in nats (differential for the normal prior)."""
    if cfg.categorical:
        return math.log(cfg.d_c)
    return 0.5 * cfg.d_c * math.log(2 * math.pi * math.e)
