"""Command-line entry points: ``layeredgan <command> [options]``.

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import yaml

from .config import RunConfig, load_config, save_config
from .datasets import ToySpec, load_image_folder, make_toy, stack_samples, write_toy
from .errors import ConfigError
from .experiments import HELDOUT_START, run_toy_trial
from .imaging import save_mosaic, uint8_to_mask
from .latent import sample_latents
from .layered_generator import LayeredGenerator, compose, export_synthetic, layer_mosaic_rows, state_hash
from .metrics import (FileFeatures, MetricsReport, RandomProjectionExtractor, ari, fid, fid_from_features,
                      mean_over_images, msc, nmi, seg_scores)
from .segmenter import UNet, predict_masks
from .training import AlternateTrainer, MetricsLog, Models, distill, train_segmenter

log = logging.getLogger("layeredgan")

EXIT_CONFIG, EXIT_RUNTIME = 2, 3


class RunFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- run directories

def code_hash() -> str:
    """Content hash of the package sources, recorded in every run directory."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def prepare_run_dir(cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    (out / "code_hash.txt").write_text(code_hash() + "\n")
    return out


def latest_checkpoint(run_dir: Path) -> Path:
    cks = sorted((run_dir / "checkpoints").glob("round*.pt"), key=lambda p: _ck_key(p.name))
    if not cks:
        raise RunFailure(f"no checkpoints under {run_dir}")
    return cks[-1]


def _ck_key(name: str):
    # round02.pt sorts after round02_step0000100.pt
    stem = name[:-3]
    rnd, _, step = stem.partition("_step")
    return int(rnd[5:]), int(step) if step else float("inf")


def resolve_checkpoint(path) -> Path:
    p = Path(path)
    return latest_checkpoint(p) if p.is_dir() else p


def run_config_for(ckpt: Path) -> RunConfig:
    cfg_path = ckpt.parent.parent / "config.yaml"
    if not cfg_path.exists():
        raise ConfigError([f"{cfg_path}: missing run config next to checkpoint"])
    return load_config(cfg_path)


def load_models(ckpt: Path):
    cfg = run_config_for(ckpt)
    models = Models.build(cfg.latent, cfg.generator, cfg.adversary, cfg.segmenter, cfg.schedule, cfg.seed)
    payload = torch.load(ckpt, weights_only=False)
    for k, mod in models.modules().items():
        mod.load_state_dict(payload["models"][k])
        mod.eval()
    return cfg, models


def save_layer_mosaic(G: LayeredGenerator, path: Path, n: int = 12, seed: int = 0):
    was = G.training
    G.eval()
    try:
        with torch.no_grad():
            ls = G(sample_latents(n, G.lcfg, torch.Generator().manual_seed(seed)))
        save_mosaic(layer_mosaic_rows(ls, compose(ls)), path)
    finally:
        G.train(was)


def real_images(cfg: RunConfig) -> torch.Tensor:
    d = cfg.dataset
    if d.kind == "toy":
        return make_toy(cfg.toy_spec(), d.n_train).images
    images, _, _, _ = stack_samples(load_image_folder(d.root, False, d.resolution))
    return images


# --------------------------------------------------------------------------- config plumbing

def _parse_set(items: List[str]) -> dict:
    out: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item!r}: expected key.path=value"])
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def config_from_args(args) -> RunConfig:
    over = _parse_set(getattr(args, "set", None))
    if getattr(args, "preset", None):
        over["preset"] = args.preset
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    flag_map = {"gamma_mi": ("weights", "gamma_mi"), "gamma_bg": ("weights", "gamma_bg"),
                "gamma_size": ("weights", "gamma_size"), "prior_c": ("latent", "prior_c"),
                "rounds": ("schedule", "rounds")}
    for flag, (sec, key) in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            over.setdefault(sec, {})[key] = v
    if getattr(args, "out", None):
        over["out_dir"] = str(args.out)
    return load_config(getattr(args, "config", None), over)


def _add_config_args(p: argparse.ArgumentParser, out_help="run directory"):
    p.add_argument("--config", type=Path, help="YAML config; `preset:` selects the base preset")
    p.add_argument("--preset", choices=["toy", "cub", "dogs", "cars", "apc"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. schedule.gan_images=3200")
    p.add_argument("--gamma-mi", dest="gamma_mi", type=float)
    p.add_argument("--gamma-bg", dest="gamma_bg", type=float)
    p.add_argument("--gamma-size", dest="gamma_size", type=float)
    p.add_argument("--prior-c", dest="prior_c", choices=["categorical", "normal"])


# --------------------------------------------------------------------------- commands

def _mosaic_hook(run_dir: Path):
    def hook(k, tr):
        save_layer_mosaic(tr.m.G, run_dir / "mosaics" / f"round{k:02d}.png")
    return hook


def cmd_train_gan(args) -> int:
    cfg = config_from_args(args)
    run_dir = prepare_run_dir(cfg, Path(cfg.out_dir))
    sched = replace(cfg.schedule, rounds=1, gan_images=cfg.schedule.standalone_images)
    models = Models.build(cfg.latent, cfg.generator, cfg.adversary, cfg.segmenter, sched, cfg.seed)
    tr = AlternateTrainer(models, real_images(cfg), cfg.weights, sched, cfg.segmenter, cfg.seed,
                          run_dir=run_dir, on_round_end=_mosaic_hook(run_dir), seg_phase=False)
    tr.run()
    print(run_dir)
    return 0


def _truncate_log(path: Path, last_step: int):
    """Drop records written after the checkpoint we resume from."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines(keepends=True)
            if json.loads(line)["step"] <= last_step]
    path.write_text("".join(keep))


def cmd_alternate(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        cfg = load_config(run_dir / "config.yaml")
        if args.rounds is not None:
            cfg = replace(cfg, schedule=replace(cfg.schedule, rounds=args.rounds))
    else:
        cfg = config_from_args(args)
        run_dir = prepare_run_dir(cfg, Path(cfg.out_dir))
    models = Models.build(cfg.latent, cfg.generator, cfg.adversary, cfg.segmenter, cfg.schedule, cfg.seed)
    tr = AlternateTrainer(models, real_images(cfg), cfg.weights, cfg.schedule, cfg.segmenter, cfg.seed,
                          run_dir=run_dir, on_round_end=_mosaic_hook(run_dir))
    if args.resume:
        ck = latest_checkpoint(run_dir)
        tr.load(ck)
        _truncate_log(run_dir / "metrics.jsonl", tr.state.global_step)
        log.info("resumed from %s at round %d", ck, tr.state.round)
    tr.run()
    print(run_dir)
    return 0


def cmd_synth(args) -> int:
    ck = resolve_checkpoint(args.checkpoint)
    cfg, models = load_models(ck)
    gen = torch.Generator().manual_seed(args.seed)
    out = export_synthetic(models.G, args.n, args.out, gen, checkpoint_hash=state_hash(models.G))
    print(out)
    return 0


def cmd_train_seg(args) -> int:
    if args.checkpoint:
        ck = resolve_checkpoint(args.checkpoint)
        cfg, models = load_models(ck)
    else:
        cfg = config_from_args(args)
    seed = cfg.seed if args.seed is None else args.seed
    scfg = cfg.segmenter
    steps = args.steps if args.steps is not None else scfg.steps
    if args.lr is not None:
        scfg = replace(scfg, lr=args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    mlog = MetricsLog(out / "metrics.jsonl")
    if args.data:
        images, masks, _, _ = stack_samples(load_image_folder(args.data, True, cfg.dataset.resolution))
        net = train_segmenter(images, masks, scfg, steps, seed, mlog)
    elif args.checkpoint:
        net = distill(models.G, scfg, args.n or cfg.schedule.synth_count, steps, seed, mlog)
    else:
        raise ConfigError(["train-seg: give --data DIR or --checkpoint PATH"])
    torch.save({"depth": scfg.depth, "base_channels": scfg.base_channels, "state": net.state_dict()},
               out / "segmenter.pt")
    print(out / "segmenter.pt")
    return 0


def load_segmenter(path) -> UNet:
    payload = torch.load(path, weights_only=False)
    net = UNet(payload["depth"], payload["base_channels"])
    net.load_state_dict(payload["state"])
    return net.eval()


def _load_pred_masks(pred_dir: Path, names: List[str]) -> torch.Tensor:
    from PIL import Image
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        raise RunFailure(f"predictions missing for {len(missing)} images: {missing[:10]}")
    return torch.stack([uint8_to_mask(np.asarray(Image.open(pred_dir / n).convert("L"))) for n in names])


def _eval_data(args, cfg: RunConfig):
    if args.gt:
        images, masks, cats, names = stack_samples(load_image_folder(args.gt, True, args.resolution))
    else:
        data = make_toy(cfg.toy_spec(), args.toy_heldout, start=HELDOUT_START)
        images, masks, cats = data.images, data.masks, data.labels
        names = [f"{HELDOUT_START + i:06d}.png" for i in range(len(images))]
    return images, masks, cats, names


def cmd_eval(args) -> int:
    cfg = run_config_for(resolve_checkpoint(args.checkpoint)) if args.checkpoint else config_from_args(args)
    seed = cfg.seed if args.seed is None else args.seed
    values = {}
    if args.segmenter or args.pred_dir or args.checkpoint:
        images, gt, cats, names = _eval_data(args, cfg)
        gt_bin = gt >= 0.5
    if args.segmenter or args.pred_dir:
        if args.segmenter:
            pred = predict_masks(load_segmenter(args.segmenter), images)
        else:
            pred = _load_pred_masks(Path(args.pred_dir), names) >= 0.5
        if pred.shape != gt_bin.shape:
            raise RunFailure(f"prediction shape {tuple(pred.shape)} != ground truth {tuple(gt_bin.shape)}")
        values.update(seg_scores(pred, gt_bin))
        p, g = pred.long().flatten(1), gt_bin.long().flatten(1)
        values["ARI"] = mean_over_images(ari, p, g, domain=cfg.metrics.ari_domain)
        values["MSC"] = mean_over_images(msc, p, g)
    if args.features_real and args.features_fake:
        values["FID"] = fid_from_features(FileFeatures(args.features_real).embed(),
                                          FileFeatures(args.features_fake).embed())
    if args.checkpoint:
        _, models = load_models(resolve_checkpoint(args.checkpoint))
        G, D = models.G, models.D
        n = min(args.n_fid, 10 * len(images))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            ls = G(sample_latents(n, G.lcfg, gen))
            if not (args.features_real and args.features_fake):
                fx = RandomProjectionExtractor(seed=seed)
                values["FID"] = fid(images, compose(ls), fx)
                values["bg-FID"] = fid(images, ls.x_b, fx)
            if (cats >= 0).all() and G.lcfg.categorical:
                post = torch.cat([D(images[i:i + 256]).posterior_c for i in range(0, len(images), 256)])
                values["NMI"] = nmi(post.argmax(1), cats)
    if not values:
        raise ConfigError(["eval: nothing to compute; give --segmenter/--pred-dir, --checkpoint or feature files"])
    report = MetricsReport(values, cfg.to_dict())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report.to_json(), indent=2))
    print(report.table())
    return 0


def cmd_make_toy(args) -> int:
    spec = ToySpec(resolution=args.resolution, k_colors=args.k_colors, seed=args.seed,
                   shapes=tuple(args.shapes), area_range=tuple(args.area_range))
    print(write_toy(spec, args.n, args.out, start=args.start))
    return 0


SWEEPS = {
    "gamma_mi": ("weights", "gamma_mi", [0.0, 0.5, 1.0, 2.0]),
    "size": ("weights", "gamma_size", [0.0, 1.0]),
    "prior": ("latent", "prior_c", ["categorical", "normal"]),
    "rounds": ("schedule", "rounds", [1, 2]),
}


def cmd_ablate(args) -> int:
    base = config_from_args(args)
    sec, key, default_values = SWEEPS[args.sweep]
    values = [yaml.safe_load(v) for v in args.values] if args.values else default_values
    out = prepare_run_dir(base, Path(base.out_dir))
    rows = []
    for v in values:
        over = {sec: {key: v}}
        if args.sweep == "size":
            # the size baseline replaces the mutual-information term
            over["weights"]["gamma_mi"] = 0.0 if v else base.weights.gamma_mi
        if args.sweep == "prior" and v == "normal":
            over["latent"]["group_size"] = 1
        cfg = load_config(out / "config.yaml", over)
        for seed in args.seeds:
            for res in run_toy_trial(cfg, seed):
                rows.append({"sweep": args.sweep, "value": v, "seed": seed, **res})
                with (out / "ablation.jsonl").open("a") as f:
                    f.write(json.dumps(rows[-1]) + "\n")
    _plot_ablation(rows, args.sweep, out / f"ablation_{args.sweep}.png")
    summary = {}
    for r in rows:
        if r["round"] == max(x["round"] for x in rows if x["value"] == r["value"]):
            summary.setdefault(str(r["value"]), []).append(r["IoU"])
    for v, ious in summary.items():
        print(f"{args.sweep}={v}  median IoU {np.median(ious):.3f}  ({len(ious)} seeds)")
    return 0


def _plot_ablation(rows, sweep, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    vals = sorted({str(r["value"]) for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, metric in zip(axes, ("IoU", "mask_area")):
        data = [[r[metric] for r in rows if str(r["value"]) == v] for v in vals]
        ax.bar(vals, [np.median(d) for d in data], color="#6a8fb3")
        for i, d in enumerate(data):
            ax.scatter([i] * len(d), d, color="k", s=8, zorder=3)
        ax.set_title(metric)
        ax.set_xlabel(sweep)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="layeredgan", description="Layered GAN training and evaluation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-gan", help="standalone layered GAN training")
    _add_config_args(p)
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("alternate", help="K-round alternate training of GAN and segmenter")
    _add_config_args(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--resume", type=Path, help="continue the run in this directory from its last checkpoint")
    p.set_defaults(func=cmd_alternate)

    p = sub.add_parser("synth", help="export a synthetic image/mask dataset from a checkpoint")
    p.add_argument("checkpoint", type=Path, help="checkpoint file or run directory")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-seg", help="train a segmenter on a synthetic folder or a generator checkpoint")
    _add_config_args(p, "output directory")
    p.add_argument("--data", type=Path, help="folder with images/ and masks/")
    p.add_argument("--checkpoint", type=Path, help="distill from this generator instead")
    p.add_argument("--n", type=int, help="synthetic pairs when distilling")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("eval", help="score segmentations and generators")
    _add_config_args(p, "JSON report path")
    p.add_argument("--gt", type=Path, help="folder with images/ and masks/")
    p.add_argument("--toy-heldout", dest="toy_heldout", type=int, default=500,
                   help="without --gt: held-out toy images from the config")
    p.add_argument("--resolution", type=int)
    p.add_argument("--segmenter", type=Path)
    p.add_argument("--pred-dir", dest="pred_dir", type=Path, help="predicted mask PNGs named like the gt images")
    p.add_argument("--checkpoint", type=Path, help="generator run for FID, bg-FID and NMI")
    p.add_argument("--features-real", dest="features_real", type=Path)
    p.add_argument("--features-fake", dest="features_fake", type=Path)
    p.add_argument("--n-fid", dest="n_fid", type=int, default=10000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-toy", help="write the procedural shapes dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--k-colors", dest="k_colors", type=int, default=4)
    p.add_argument("--shapes", nargs="+", default=["ellipse", "rectangle", "triangle"])
    p.add_argument("--area-range", dest="area_range", nargs=2, type=float, default=[0.1, 0.3])
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("ablate", help="toy-scale sweeps over gamma_mi, the size loss, the prior of c or K")
    _add_config_args(p)
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--values", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print("config error:\n" + "\n".join(f"  {p}" for p in e.problems), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
