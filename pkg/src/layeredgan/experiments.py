"""Desk-scale toy experiments: train, distill a segmenter, evaluate on held-out toy images."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import torch

from .config import RunConfig
from .datasets import ToySpec, make_toy
from .latent import sample_latents
from .metrics import seg_scores
from .segmenter import predict_masks
from .training import AlternateTrainer, MetricsLog, Models, distill

log = logging.getLogger(__name__)

HELDOUT_START = 1_000_000


@torch.no_grad()
def mean_mask_area(G, n: int = 512, seed: int = 0) -> float:
    gen = torch.Generator().manual_seed(seed)
    was = G.training
    G.eval()
    try:
        return float(G(sample_latents(n, G.lcfg, gen)).mask.mean())
    finally:
        G.train(was)


def evaluate_round(trainer: AlternateTrainer, cfg: RunConfig, heldout, seed: int) -> dict:
    G = trainer.m.G
    t0 = time.time()
    F_net = distill(G, cfg.segmenter, cfg.schedule.synth_count, cfg.schedule.final_seg_steps, seed)
    pred = predict_masks(F_net, heldout.images)
    scores = seg_scores(pred, heldout.masks >= 0.5)
    inloop = seg_scores(predict_masks(trainer.m.F, heldout.images), heldout.masks >= 0.5)
    return {
        "round": trainer.state.round - 1,
        "mask_area": mean_mask_area(G),
        **scores,
        "IoU_inloop": inloop["IoU"],
        "distill_seconds": time.time() - t0,
    }


def run_toy_trial(cfg: RunConfig, seed: int, rounds: Optional[int] = None,
                  run_dir=None, n_heldout: int = 500) -> List[dict]:
    """Train for ``rounds`` rounds; after every round distill and score a fresh segmenter.

    Round ``k``'s result is what a ``K = k`` run would report, since rounds are
    executed identically up to that point.
    """
    rounds = rounds or cfg.schedule.rounds
    spec = cfg.toy_spec()
    train = make_toy(spec, cfg.dataset.n_train)
    heldout = make_toy(spec, n_heldout, start=HELDOUT_START)
    sched = replace(cfg.schedule, rounds=rounds)
    models = Models.build(cfg.latent, cfg.generator, cfg.adversary, cfg.segmenter, sched, seed)
    results: List[dict] = []
    t0 = time.time()

    def on_round_end(k, tr):
        res = evaluate_round(tr, cfg, heldout, seed)
        res["seconds"] = time.time() - t0
        results.append(res)
        log.info("seed %d round %d: %s", seed, k, res)

    trainer = AlternateTrainer(models, train.images, cfg.weights, sched, cfg.segmenter, seed,
                               run_dir=run_dir, on_round_end=on_round_end)
    trainer.run()
    return results
