"""GAN step, segmentation step and the K-round alternate schedule."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .adversary import AdversaryConfig, Discriminator, MaskEncoder
from .datasets import augment_batch, color_jitter
from .errors import CheckpointError, NonFiniteLossError
from .latent import LatentConfig, sample_latents
from .layered_generator import (GeneratorConfig, LayeredGenerator, compose, perturb_compose,
                                sample_perturbation, synthesize_dataset)
from .objectives import (LossWeights, adv_loss_d, adv_loss_g, bg_loss, binarization_loss,
                         head_nll, mask_size_loss, seg_loss)
from .segmenter import SegmenterConfig, UNet

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainSchedule:
    rounds: int = 5
    gan_images: int = 2_000_000
    seg_steps: int = 2000
    standalone_images: int = 1_000_000
    batch_size: int = 32
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    final_seg_steps: int = 12000
    synth_count: int = 10000
    crop_scale: tuple = (0.8, 1.0)
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        for name in ("gan_images", "seg_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.betas = tuple(self.betas)
        self.crop_scale = tuple(self.crop_scale)

    @property
    def gan_steps(self) -> int:
        return math.ceil(self.gan_images / self.batch_size)


@dataclass
class Models:
    G: LayeredGenerator
    D: Discriminator
    E_pi: MaskEncoder
    F: UNet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    opt_f: torch.optim.Optimizer

    @classmethod
    def build(cls, lcfg: LatentConfig, gcfg: GeneratorConfig, acfg: AdversaryConfig,
              scfg: SegmenterConfig, sched: TrainSchedule, seed: int = 0):
        torch.manual_seed(seed)
        G = LayeredGenerator(lcfg, gcfg)
        D = Discriminator(lcfg, acfg)
        E = MaskEncoder(lcfg, acfg)
        F = UNet(scfg.depth, scfg.base_channels)
        opt_g = torch.optim.Adam(G.parameters(), sched.lr, betas=sched.betas)
        opt_d = torch.optim.Adam(list(D.parameters()) + list(E.parameters()), sched.lr, betas=sched.betas)
        opt_f = torch.optim.Adam(F.parameters(), scfg.lr)
        return cls(G, D, E, F, opt_g, opt_d, opt_f)

    def modules(self):
        return {"G": self.G, "D": self.D, "E_pi": self.E_pi, "F": self.F}

    def optimizers(self):
        return {"opt_g": self.opt_g, "opt_d": self.opt_d, "opt_f": self.opt_f}


def _finite(losses: Dict[str, torch.Tensor]):
    for name, v in losses.items():
        if not torch.isfinite(v):
            raise NonFiniteLossError(name, float(v.detach()))


def _mi_targets(lb, lcfg: LatentConfig):
    if lcfg.categorical:
        return lb.labels, lb.sup_labels
    return lb.c, lb.c


def _mi_terms(out, mask_post, lb, lcfg):
    tx, tm = _mi_targets(lb, lcfg)
    mp, mlv = mask_post
    nll_x = head_nll(out.posterior_c, tx, out.logvar, lcfg.prior_c)
    nll_pi = head_nll(mp, tm, mlv, lcfg.prior_c)
    return nll_x, nll_pi


def gan_step(real: torch.Tensor, models: Models, weights: LossWeights, bg_active: bool,
             gen: torch.Generator) -> Dict[str, float]:
    """One discriminator update followed by one generator update."""
    G, D, E = models.G, models.D, models.E_pi
    lcfg, gcfg = G.lcfg, G.gcfg
    b = real.shape[0]
    lb = sample_latents(b, lcfg, gen)
    p = sample_perturbation(gcfg, b, gen)
    ls = G(lb)
    fake = perturb_compose(ls, p)
    use_mi = weights.gamma_mi > 0

    # discriminator side: D with its heads, then E_pi
    D.requires_grad_(True)
    E.requires_grad_(use_mi)
    models.opt_d.zero_grad(set_to_none=True)
    out_real = D(real)
    out_fake = D(fake.detach())
    d_losses = {"adv_d": adv_loss_d(out_real.score, out_fake.score)}
    total_d = d_losses["adv_d"]
    if use_mi:
        d_losses["mi_x_d"], d_losses["mi_pi_d"] = _mi_terms(out_fake, E(ls.mask.detach()), lb, lcfg)
        total_d = total_d + weights.gamma_mi * (d_losses["mi_x_d"] + d_losses["mi_pi_d"])
    _finite(d_losses)
    total_d.backward()
    models.opt_d.step()

    # generators
    D.requires_grad_(False)
    E.requires_grad_(False)
    models.opt_g.zero_grad(set_to_none=True)
    out = D(fake)
    g_losses = {"adv_g": adv_loss_g(out.score), "bin": binarization_loss(ls.mask)}
    total_g = g_losses["adv_g"] + weights.gamma_b * g_losses["bin"]
    if use_mi:
        g_losses["mi_x_g"], g_losses["mi_pi_g"] = _mi_terms(out, E(ls.mask), lb, lcfg)
        total_g = total_g + weights.gamma_mi * (g_losses["mi_x_g"] + g_losses["mi_pi_g"])
    if weights.gamma_size > 0:
        g_losses["size"] = mask_size_loss(ls.mask, weights.m_min)
        total_g = total_g + weights.gamma_size * g_losses["size"]
    if bg_active and weights.gamma_bg > 0:
        # segmenter is frozen: eval mode, no parameter gradients
        F_net = models.F
        was = F_net.training, [q.requires_grad for q in F_net.parameters()]
        F_net.eval().requires_grad_(False)
        try:
            g_losses["bg"] = bg_loss(F_net(ls.x_b))
        finally:
            F_net.train(was[0])
            for q, r in zip(F_net.parameters(), was[1]):
                q.requires_grad_(r)
        total_g = total_g + weights.gamma_bg * g_losses["bg"]
    _finite(g_losses)
    total_g.backward()
    models.opt_g.step()
    D.requires_grad_(True)
    E.requires_grad_(True)

    logged = {k: float(v.detach()) for k, v in {**d_losses, **g_losses}.items()}
    logged["mask_area"] = float(ls.mask.detach().mean())
    return logged


def seg_step(images: torch.Tensor, masks: torch.Tensor, F_net: UNet, opt: torch.optim.Optimizer,
             gen: Optional[torch.Generator] = None, jitter: float = 0.2,
             binarize_targets: bool = False) -> float:
    """One BCE update of the segmenter; colour augmentation touches images only."""
    F_net.train()
    if gen is not None and jitter > 0:
        images = color_jitter(images, gen, jitter)
    target = (masks >= 0.5).to(masks.dtype) if binarize_targets else masks
    opt.zero_grad(set_to_none=True)
    loss = seg_loss(F_net(images), target)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("seg", float(loss.detach()))
    loss.backward()
    opt.step()
    return float(loss.detach())


@torch.no_grad()
def synthetic_batch(G: LayeredGenerator, b: int, gen: torch.Generator):
    """Unperturbed composite and mask from the generator in eval mode."""
    was = G.training
    G.eval()
    try:
        ls = G(sample_latents(b, G.lcfg, gen))
        return compose(ls), ls.mask
    finally:
        G.train(was)


class MetricsLog:
    """Line-delimited JSON records ``{"step", "loss", "value"}``."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.records: List[dict] = []

    def write(self, step: int, values: Dict[str, float], **extra):
        rows = [{"step": step, **extra, "loss": k, "value": v} for k, v in values.items()]
        self.records.extend(rows)
        if self.path:
            with self.path.open("a") as f:
                for r in rows:
                    f.write(json.dumps(r) + "\n")


def rng_state(gen: torch.Generator) -> dict:
    return {"torch_gen": gen.get_state(), "torch_global": torch.get_rng_state(),
            "numpy": np.random.get_state(), "python": random.getstate()}


def set_rng_state(gen: torch.Generator, state: dict):
    gen.set_state(state["torch_gen"])
    torch.set_rng_state(state["torch_global"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


@dataclass
class TrainState:
    round: int = 1
    gan_step: int = 0
    seg_step: int = 0
    global_step: int = 0


class AlternateTrainer:
    """Runs the K-round schedule: GAN phase (background loss from round 2 on), then segmenter phase.

    ``real`` is a ``[N, 3, H, W]`` tensor in [-1, 1]; batches are drawn with
    replacement and augmented with flip and random resized crop.
    """

    def __init__(self, models: Models, real: torch.Tensor, weights: LossWeights,
                 schedule: TrainSchedule, scfg: SegmenterConfig, seed: int = 0,
                 run_dir=None, log_path=None, on_round_end: Optional[Callable] = None,
                 seg_phase: bool = True):
        if len(real) == 0:
            raise ValueError("empty real dataset")
        self.m = models
        self.real = real
        self.weights = weights
        self.sched = schedule
        self.scfg = scfg
        self.gen = torch.Generator().manual_seed(seed)
        self.state = TrainState()
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log = MetricsLog(log_path or (self.run_dir / "metrics.jsonl" if self.run_dir else None))
        self.on_round_end = on_round_end
        self.seg_phase = seg_phase
        self.history: List[dict] = []

    # -- checkpoints ---------------------------------------------------------
    def checkpoint_path(self, rnd: int, step: Optional[int] = None) -> Path:
        name = f"round{rnd:02d}.pt" if step is None else f"round{rnd:02d}_step{step:07d}.pt"
        return self.run_dir / "checkpoints" / name

    def save(self, path: Path):
        payload = {
            "version": CHECKPOINT_VERSION,
            "state": vars(self.state).copy(),
            "models": {k: v.state_dict() for k, v in self.m.modules().items()},
            "optim": {k: v.state_dict() for k, v in self.m.optimizers().items()},
            "rng": rng_state(self.gen),
            "history": self.history,
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            torch.save(payload, tmp)
            tmp.replace(path)
        except OSError as e:
            raise CheckpointError(f"could not write {path}: {e}", self.state.round - 1) from e

    def load(self, path):
        payload = torch.load(path, weights_only=False)
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version", 0)
        for k, mod in self.m.modules().items():
            mod.load_state_dict(payload["models"][k])
        for k, opt in self.m.optimizers().items():
            opt.load_state_dict(payload["optim"][k])
        set_rng_state(self.gen, payload["rng"])
        self.state = TrainState(**payload["state"])
        self.history = payload.get("history", [])

    # -- loop ----------------------------------------------------------------
    def real_batch(self) -> torch.Tensor:
        idx = torch.randint(len(self.real), (self.sched.batch_size,), generator=self.gen)
        imgs, _ = augment_batch(self.real[idx], None, self.gen, self.sched.crop_scale)
        return imgs

    def _seg_phase_step(self):
        x, mask = synthetic_batch(self.m.G, self.sched.batch_size, self.gen)
        return seg_step(x, mask, self.m.F, self.m.opt_f, self.gen, self.scfg.color_jitter,
                        self.scfg.binarize_targets)

    def run(self, rounds: Optional[int] = None):
        rounds = rounds or self.sched.rounds
        st = self.state
        while st.round <= rounds:
            bg_active = st.round > 1
            self.m.F.eval().requires_grad_(False)
            self.m.G.train()
            while st.gan_step < self.sched.gan_steps:
                losses = gan_step(self.real_batch(), self.m, self.weights, bg_active, self.gen)
                st.gan_step += 1
                st.global_step += 1
                if st.gan_step % self.sched.log_every == 0 or st.gan_step == self.sched.gan_steps:
                    self.log.write(st.global_step, losses, round=st.round, phase="gan")
                if (self.sched.checkpoint_every and self.run_dir
                        and st.gan_step % self.sched.checkpoint_every == 0):
                    self.save(self.checkpoint_path(st.round, st.global_step))
            self.m.F.requires_grad_(True)
            while self.seg_phase and st.seg_step < self.sched.seg_steps:
                loss = self._seg_phase_step()
                st.seg_step += 1
                st.global_step += 1
                if st.seg_step % self.sched.log_every == 0 or st.seg_step == self.sched.seg_steps:
                    self.log.write(st.global_step, {"seg": loss}, round=st.round, phase="seg")
            self.history.append({"round": st.round, "global_step": st.global_step})
            done = st.round
            st.round += 1
            st.gan_step = st.seg_step = 0
            if self.run_dir:
                self.save(self.checkpoint_path(done))
            if self.on_round_end:
                self.on_round_end(done, self)
        return self.m, self.history


def alternate_train(schedule: TrainSchedule, real: torch.Tensor, lcfg: LatentConfig,
                    gcfg: GeneratorConfig, acfg: AdversaryConfig, scfg: SegmenterConfig,
                    weights: LossWeights, seed: int = 0, run_dir=None, resume=None,
                    on_round_end=None):
    models = Models.build(lcfg, gcfg, acfg, scfg, schedule, seed)
    trainer = AlternateTrainer(models, real, weights, schedule, scfg, seed, run_dir,
                               on_round_end=on_round_end)
    if resume:
        trainer.load(resume)
    return trainer.run()


def train_segmenter(images: torch.Tensor, masks: torch.Tensor, scfg: SegmenterConfig,
                    steps: int, seed: int = 0, log: Optional[MetricsLog] = None,
                    log_every: int = 100) -> UNet:
    """Train a fresh segmenter on a fixed synthetic set (minibatches drawn with replacement)."""
    torch.manual_seed(seed)
    net = UNet(scfg.depth, scfg.base_channels)
    opt = torch.optim.Adam(net.parameters(), scfg.lr)
    gen = torch.Generator().manual_seed(seed)
    for step in range(1, steps + 1):
        idx = torch.randint(len(images), (scfg.batch_size,), generator=gen)
        loss = seg_step(images[idx], masks[idx], net, opt, gen, scfg.color_jitter, scfg.binarize_targets)
        if log is not None and (step % log_every == 0 or step == steps):
            log.write(step, {"seg": loss}, phase="final_seg")
    net.eval()
    return net


def distill(G: LayeredGenerator, scfg: SegmenterConfig, n: int, steps: int, seed: int = 0,
            log: Optional[MetricsLog] = None) -> UNet:
    """Export ``n`` synthetic pairs from ``G`` and train a fresh segmenter on them."""
    gen = torch.Generator().manual_seed(seed + 7919)
    x, mask, _ = synthesize_dataset(G, n, gen)
    return train_segmenter(x, mask, scfg, steps, seed, log)

