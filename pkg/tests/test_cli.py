import json

import numpy as np
import pytest
import yaml

from layeredgan.cli import code_hash, main
from layeredgan.config import PRESETS, load_config

# shrinks the toy preset to something that trains in seconds
TINY = [
    "dataset.resolution=8", "dataset.n_train=32", "dataset.area_range=[0.2,0.4]",
    "generator.resolution=8", "generator.base_channels=8", "generator.min_channels=4",
    "generator.c_embed=3", "generator.shift=[-1,1]",
    "adversary.resolution=8", "adversary.base_channels=4", "adversary.max_channels=8",
    "adversary.mask_channels=4",
    "latent.d_z=6", "latent.d_c=4",
    "schedule.gan_images=16", "schedule.standalone_images=16", "schedule.seg_steps=2",
    "schedule.batch_size=4", "schedule.log_every=1", "schedule.synth_count=8",
    "schedule.final_seg_steps=2",
    "segmenter.depth=2", "segmenter.base_channels=4", "segmenter.batch_size=4", "segmenter.steps=3",
]


def tiny_args():
    out = []
    for s in TINY:
        out += ["--set", s]
    return out


def run(*argv):
    return main([str(a) for a in argv])


def test_alternate_run_directory(tmp_path):
    d = tmp_path / "run"
    assert run("alternate", "--out", d, "--rounds", 2, *tiny_args()) == 0
    assert sorted(p.name for p in (d / "checkpoints").iterdir()) == ["round01.pt", "round02.pt"]
    assert (d / "code_hash.txt").read_text().strip() == code_hash()
    assert (d / "mosaics" / "round02.png").exists()
    cfg = yaml.safe_load((d / "config.yaml").read_text())
    assert cfg["schedule"]["rounds"] == 2 and cfg["generator"]["resolution"] == 8
    assert (d / "metrics.jsonl").stat().st_size > 0


def test_rerun_gives_identical_log(tmp_path):
    for name in ("a", "b"):
        assert run("alternate", "--out", tmp_path / name, "--rounds", 1, "--seed", 3, *tiny_args()) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_resume_continues_to_same_log(tmp_path):
    assert run("alternate", "--out", tmp_path / "full", "--rounds", 2, *tiny_args()) == 0
    assert run("alternate", "--out", tmp_path / "part", "--rounds", 1, *tiny_args()) == 0
    assert run("alternate", "--resume", tmp_path / "part", "--rounds", 2) == 0
    assert (tmp_path / "full" / "metrics.jsonl").read_bytes() == (tmp_path / "part" / "metrics.jsonl").read_bytes()


def test_gamma_flag_reaches_weights(tmp_path):
    assert run("train-gan", "--out", tmp_path / "g", "--gamma-mi", 0, *tiny_args()) == 0
    cfg = load_config(tmp_path / "g" / "config.yaml")
    assert cfg.weights.gamma_mi == 0.0
    rows = [json.loads(x) for x in (tmp_path / "g" / "metrics.jsonl").read_text().splitlines()]
    assert rows and not any(r["loss"].startswith("mi") for r in rows)
    assert not any(r["phase"] == "seg" for r in rows)


@pytest.mark.filterwarnings("ignore:.*covariance is singular")
def test_synth_train_seg_eval_pipeline(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert run("alternate", "--out", run_dir, "--rounds", 1, *tiny_args()) == 0
    assert run("synth", run_dir, "--n", 10, "--out", tmp_path / "syn") == 0
    assert len(list((tmp_path / "syn" / "images").iterdir())) == 10
    manifest = json.loads((tmp_path / "syn" / "manifest.json").read_text())
    assert manifest["count"] == 10

    assert run("train-seg", "--data", tmp_path / "syn", "--out", tmp_path / "seg", "--steps", 3,
               *tiny_args()) == 0
    assert (tmp_path / "seg" / "segmenter.pt").exists()
    assert run("train-seg", "--checkpoint", run_dir, "--out", tmp_path / "seg2", "--steps", 2, "--n", 8) == 0

    assert run("make-toy", "--out", tmp_path / "toy", "--n", 6, "--resolution", 8,
               "--area-range", 0.2, 0.4) == 0
    report = tmp_path / "report.json"
    assert run("eval", "--gt", tmp_path / "toy", "--segmenter", tmp_path / "seg" / "segmenter.pt",
               "--checkpoint", run_dir, "--n-fid", 20, "--out", report) == 0
    values = json.loads(report.read_text())
    assert {"ACC", "IoU", "mIoU", "ARI", "MSC", "FID", "bg-FID", "NMI"} <= set(values)
    assert "IoU" in capsys.readouterr().out


def test_perfect_self_eval(tmp_path):
    assert run("make-toy", "--out", tmp_path / "toy", "--n", 5) == 0
    report = tmp_path / "r.json"
    assert run("eval", "--gt", tmp_path / "toy", "--pred-dir", tmp_path / "toy" / "masks", "--out", report) == 0
    v = json.loads(report.read_text())
    assert v["IoU"] == 1.0 and v["ACC"] == 1.0 and v["MSC"] == 1.0


def test_eval_reports_missing_predictions(tmp_path, capsys):
    assert run("make-toy", "--out", tmp_path / "toy", "--n", 3) == 0
    (tmp_path / "pred").mkdir()
    assert run("eval", "--gt", tmp_path / "toy", "--pred-dir", tmp_path / "pred") == 3
    assert "000000.png" in capsys.readouterr().err


def test_eval_from_feature_files(tmp_path):
    rng = np.random.default_rng(0)
    np.save(tmp_path / "a.npy", rng.normal(size=(50, 3)).astype(np.float32))
    np.save(tmp_path / "b.npy", rng.normal(size=(50, 3)).astype(np.float32))
    out = tmp_path / "r.json"
    assert run("eval", "--features-real", tmp_path / "a.npy", "--features-fake", tmp_path / "b.npy",
               "--out", out) == 0
    assert json.loads(out.read_text())["FID"] >= 0


def test_config_errors_exit_2(tmp_path, capsys):
    assert run("alternate", "--out", tmp_path / "x", "--set", "generator.resolution=48",
               "--set", "latent.bogus=1") == 2
    err = capsys.readouterr().err
    assert "latent.bogus" in err
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: nonexistent\n")
    assert run("train-gan", "--config", bad) == 2
    assert run("eval") == 2


def test_runtime_error_exit_3(tmp_path):
    (tmp_path / "empty" / "checkpoints").mkdir(parents=True)
    assert run("synth", tmp_path / "empty", "--out", tmp_path / "o") == 3


def test_ablate_writes_plot(tmp_path):
    assert run("ablate", "--sweep", "gamma_mi", "--values", 0, 1, "--seeds", 0, "--out", tmp_path / "abl",
               "--rounds", 1, "--set", "dataset.n_train=16", *tiny_args()) == 0
    rows = [json.loads(x) for x in (tmp_path / "abl" / "ablation.jsonl").read_text().splitlines()]
    assert [r["value"] for r in rows] == [0, 1]
    assert (tmp_path / "abl" / "ablation_gamma_mi.png").exists()


def test_presets_match_published_settings():
    cub, dogs, cars, apc = (load_config(overrides={"preset": p, "dataset": {"root": "x"}})
                            for p in ("cub", "dogs", "cars", "apc"))
    assert (cub.latent.d_c, cub.latent.group_size, cub.weights.gamma_mi, cub.weights.gamma_bg) == (200, 10, 1, 2)
    assert (dogs.latent.d_c, dogs.weights.gamma_mi, dogs.weights.gamma_bg) == (120, 2, 1)
    assert (cars.latent.d_c, cars.latent.group_size, cars.generator.rotation) == (196, 14, (0.0, 0.0))
    assert cars.generator.contrast == (0.7, 1.3)
    assert (apc.weights.gamma_mi, apc.weights.gamma_bg) == (2, 0)
    assert cub.schedule.rounds == 5 and cub.schedule.final_seg_steps == 12000 and cub.schedule.synth_count == 10000
    assert set(PRESETS) == {"cub", "dogs", "cars", "apc", "toy"}
