"""Run configuration, per-dataset presets and YAML loading with preset inheritance."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .adversary import AdversaryConfig
from .datasets import ToySpec
from .errors import ConfigError
from .latent import LatentConfig
from .layered_generator import GeneratorConfig
from .objectives import LossWeights
from .segmenter import SegmenterConfig
from .training import TrainSchedule


@dataclass
class DatasetConfig:
    kind: str = "toy"
    root: Optional[str] = None
    eval_root: Optional[str] = None
    with_masks: bool = False
    resolution: int = 32
    n_train: int = 4000
    # toy only
    toy_seed: int = 0
    k_colors: int = 4
    shapes: Tuple[str, ...] = ("ellipse", "rectangle", "triangle")
    area_range: Tuple[float, float] = (0.1, 0.3)


@dataclass
class MetricsConfig:
    feature_extractor: str = "random"
    features_real: Optional[str] = None
    features_fake: Optional[str] = None
    n_fid: int = 10000
    ari_domain: str = "all"


@dataclass
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def toy_spec(self) -> ToySpec:
        d = self.dataset
        return ToySpec(resolution=d.resolution, shapes=d.shapes, k_colors=d.k_colors,
                       area_range=d.area_range, seed=d.toy_seed)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(yaml.safe_dump(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _published(d_c, group, gamma_mi, gamma_bg, rotation=(-15.0, 15.0), contrast=(1.0, 1.0)) -> dict:
    return {
        "dataset": {"kind": "folder", "resolution": 128, "with_masks": False},
        "latent": {"d_z": 128, "prior_c": "categorical", "d_c": d_c, "group_size": group},
        "generator": {"resolution": 128, "base_channels": 512, "min_channels": 32,
                      "scale": (-0.2, 0.0), "shift": (-16.0, 16.0), "rotation": rotation,
                      "contrast": contrast},
        "adversary": {"resolution": 128, "base_channels": 64, "max_channels": 512, "mask_channels": 32},
        "weights": {"gamma_mi": gamma_mi, "gamma_b": 1.0, "gamma_bg": gamma_bg},
        "schedule": {"rounds": 5, "gan_images": 2_000_000, "seg_steps": 2000,
                     "standalone_images": 1_000_000, "batch_size": 32, "lr": 2e-4,
                     "betas": (0.5, 0.999), "final_seg_steps": 12000, "synth_count": 10000},
        "segmenter": {"depth": 4, "base_channels": 32, "lr": 1e-3, "steps": 12000, "batch_size": 32},
    }


PRESETS: Dict[str, dict] = {
    "cub": _published(200, 10, 1.0, 2.0),
    "dogs": _published(120, 10, 2.0, 1.0),
    "cars": _published(196, 14, 1.0, 2.0, rotation=(0.0, 0.0), contrast=(0.7, 1.3)),
    "apc": _published(200, 10, 2.0, 0.0),
    "toy": {
        "dataset": {"kind": "toy", "resolution": 32, "n_train": 4000},
        "latent": {"d_z": 32, "prior_c": "categorical", "d_c": 8, "group_size": 2},
        "generator": {"resolution": 32, "base_channels": 64, "min_channels": 16, "c_embed": 8,
                      "scale": (-0.2, 0.0), "shift": (-4.0, 4.0), "rotation": (-15.0, 15.0)},
        "adversary": {"resolution": 32, "base_channels": 32, "max_channels": 128, "mask_channels": 8},
        "weights": {"gamma_mi": 1.0, "gamma_b": 1.0, "gamma_bg": 2.0},
        "schedule": {"rounds": 2, "gan_images": 64_000, "seg_steps": 300,
                     "standalone_images": 64_000, "batch_size": 32, "lr": 2e-4,
                     "final_seg_steps": 600, "synth_count": 2000, "log_every": 50},
        "segmenter": {"depth": 3, "base_channels": 8, "lr": 1e-3, "steps": 600, "batch_size": 32},
        "metrics": {"feature_extractor": "random", "n_fid": 2000},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}
_SECTION_TYPES = {
    "dataset": DatasetConfig, "latent": LatentConfig, "generator": GeneratorConfig,
    "adversary": AdversaryConfig, "weights": LossWeights, "schedule": TrainSchedule,
    "segmenter": SegmenterConfig, "metrics": MetricsConfig,
}


def _coerce(cls, name, section: dict, problems: list):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in section.items():
        if k not in known:
            problems.append(f"{name}.{k}: unknown field")
            continue
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        problems.append(f"{name}: {e}")
        return None


def build_config(data: dict) -> RunConfig:
    """Resolve ``preset`` inheritance and validate; every problem is reported at once."""
    data = dict(data or {})
    preset = data.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError([f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})"])
    merged = _merge(PRESETS[preset], data)
    problems = []
    kwargs: Dict[str, Any] = {}
    for k, v in merged.items():
        if k in _SECTION_TYPES:
            if not isinstance(v, dict):
                problems.append(f"{k}: expected a mapping")
                continue
            kwargs[k] = _coerce(_SECTION_TYPES[k], k, v, problems)
        elif k in ("preset", "seed", "out_dir"):
            kwargs[k] = v
        else:
            problems.append(f"{k}: unknown section")
    cfg = None
    if not problems:
        cfg = RunConfig(**kwargs)
        problems += _cross_check(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _cross_check(cfg: RunConfig):
    out = []
    r = cfg.generator.resolution
    if cfg.adversary.resolution != r:
        out.append(f"adversary.resolution ({cfg.adversary.resolution}) != generator.resolution ({r})")
    if cfg.dataset.resolution != r:
        out.append(f"dataset.resolution ({cfg.dataset.resolution}) != generator.resolution ({r})")
    if r % (2 ** cfg.segmenter.depth):
        out.append(f"segmenter.depth {cfg.segmenter.depth} incompatible with resolution {r}")
    if cfg.dataset.kind not in ("toy", "folder"):
        out.append(f"dataset.kind: unknown kind {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "folder" and not cfg.dataset.root:
        out.append("dataset.root: required for folder datasets")
    if cfg.metrics.ari_domain not in ("all", "foreground"):
        out.append(f"metrics.ari_domain: unknown domain {cfg.metrics.ari_domain!r}")
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    data = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError([f"{path}: {e}"]) from e
    return build_config(_merge(data, overrides or {}))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
