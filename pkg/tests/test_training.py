import json
import statistics

import pytest
import torch

from helpers import tiny_adversary, tiny_generator, tiny_latent
from layeredgan.errors import NonFiniteLossError
from layeredgan.layered_generator import state_hash
from layeredgan.objectives import LossWeights
from layeredgan.segmenter import SegmenterConfig
from layeredgan.training import (AlternateTrainer, Models, TrainSchedule, gan_step, seg_step,
                                 synthetic_batch)

SCFG = SegmenterConfig(depth=2, base_channels=4, batch_size=4)


def tiny_schedule(**kw):
    base = dict(rounds=2, gan_images=24, seg_steps=3, batch_size=4, log_every=1)
    base.update(kw)
    return TrainSchedule(**base)


def tiny_models(seed=0, sched=None, **latent_kw):
    return Models.build(tiny_latent(**latent_kw), tiny_generator(), tiny_adversary(), SCFG,
                        sched or tiny_schedule(), seed)


def real_data(n=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 8, 8, generator=g) * 2 - 1


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(rounds=0)
    with pytest.raises(ValueError):
        TrainSchedule(gan_images=0)
    assert TrainSchedule(gan_images=2_000_000, batch_size=32).gan_steps == 62_500
    assert TrainSchedule().rounds == 5 and TrainSchedule().lr == 2e-4 and TrainSchedule().batch_size == 32


def test_gan_step_leaves_segmenter_alone():
    m = tiny_models()
    before = state_hash(m.F)
    out = gan_step(real_data(4), m, LossWeights(), True, torch.Generator().manual_seed(0))
    assert "bg" in out and state_hash(m.F) == before
    assert all(p.grad is None for p in m.F.parameters())


def test_seg_step_leaves_gan_alone():
    m = tiny_models()
    hashes = {k: state_hash(v) for k, v in m.modules().items() if k != "F"}
    gen = torch.Generator().manual_seed(0)
    x, mask = synthetic_batch(m.G, 4, gen)
    seg_step(x, mask, m.F, m.opt_f, gen)
    assert hashes == {k: state_hash(v) for k, v in m.modules().items() if k != "F"}


def test_gamma_mi_zero_leaves_heads_untouched():
    m = tiny_models()
    post = [p.detach().clone() for p in m.D.head_parameters()]
    e = [p.detach().clone() for p in m.E_pi.parameters()]
    out = gan_step(real_data(4), m, LossWeights(gamma_mi=0), False, torch.Generator().manual_seed(0))
    assert not any(k.startswith("mi") for k in out)
    assert all(torch.equal(a, b) for a, b in zip(post, m.D.head_parameters()))
    assert all(torch.equal(a, b) for a, b in zip(e, m.E_pi.parameters()))
    for p in list(m.D.head_parameters()) + list(m.E_pi.parameters()):
        assert p.grad is None or not p.grad.any()


def test_gamma_mi_positive_moves_heads():
    m = tiny_models()
    e = [p.detach().clone() for p in m.E_pi.parameters()]
    out = gan_step(real_data(4), m, LossWeights(gamma_mi=1), False, torch.Generator().manual_seed(0))
    assert {"mi_x_d", "mi_pi_d", "mi_x_g", "mi_pi_g"} <= set(out)
    assert any(not torch.equal(a, b) for a, b in zip(e, m.E_pi.parameters()))


def test_bg_flag_controls_term():
    m = tiny_models()
    out = gan_step(real_data(4), m, LossWeights(), False, torch.Generator().manual_seed(0))
    assert "bg" not in out
    out = gan_step(real_data(4), m, LossWeights(gamma_bg=0), True, torch.Generator().manual_seed(0))
    assert "bg" not in out


def test_size_term_optional():
    m = tiny_models()
    out = gan_step(real_data(4), m, LossWeights(gamma_size=1.0), False, torch.Generator().manual_seed(0))
    assert "size" in out


def test_gan_step_reproducible():
    outs = []
    for _ in range(2):
        m = tiny_models(seed=3)
        outs.append(gan_step(real_data(4), m, LossWeights(), True, torch.Generator().manual_seed(9)))
        outs[-1]["hash"] = state_hash(m.G)
    assert outs[0] == outs[1]


def test_nonfinite_loss_names_offender():
    m = tiny_models()
    real = real_data(4)
    real[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as ei:
        gan_step(real, m, LossWeights(), False, torch.Generator().manual_seed(0))
    assert ei.value.name == "adv_d"


def test_seg_step_reproducible_without_augmentation():
    vals = []
    for _ in range(2):
        m = tiny_models()
        gen = torch.Generator().manual_seed(0)
        x, mask = synthetic_batch(m.G, 4, gen)
        vals.append((seg_step(x, mask, m.F, m.opt_f, None, 0.0), state_hash(m.F)))
    assert vals[0] == vals[1]


def test_seg_loss_decreases_on_frozen_generator():
    drops = []
    for seed in range(5):
        m = tiny_models(seed=seed)
        gen = torch.Generator().manual_seed(seed)
        losses = []
        for _ in range(100):
            x, mask = synthetic_batch(m.G, 8, gen)
            losses.append(seg_step(x, mask, m.F, m.opt_f, gen, 0.2))
        drops.append(statistics.mean(losses[:10]) - statistics.mean(losses[-10:]))
    assert statistics.median(drops) > 0


def test_seg_step_binarized_targets():
    m = tiny_models()
    gen = torch.Generator().manual_seed(0)
    x, mask = synthetic_batch(m.G, 4, gen)
    assert seg_step(x, mask, m.F, m.opt_f, None, 0.0, binarize_targets=True) >= 0


# ----------------------------------------------------------------------------- alternate schedule

def run_trainer(tmp_path, rounds=2, seed=0, **sched_kw):
    sched = tiny_schedule(rounds=rounds, **sched_kw)
    tr = AlternateTrainer(tiny_models(seed, sched), real_data(), LossWeights(), sched, SCFG, seed,
                          run_dir=tmp_path)
    tr.run()
    return tr


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_alternate_emits_checkpoint_per_round(tmp_path):
    tr = run_trainer(tmp_path, rounds=2)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["round01.pt", "round02.pt"]
    assert [h["round"] for h in tr.history] == [1, 2]


def test_background_term_only_after_round_one(tmp_path):
    run_trainer(tmp_path, rounds=2)
    rows = read_log(tmp_path / "metrics.jsonl")
    gan = [r for r in rows if r["phase"] == "gan"]
    assert not any(r["loss"] == "bg" for r in gan if r["round"] == 1)
    assert any(r["loss"] == "bg" for r in gan if r["round"] == 2)
    # phase order inside each round: GAN steps first, segmenter second
    for k in (1, 2):
        phases = [r["phase"] for r in rows if r["round"] == k]
        assert phases == sorted(phases, key=lambda p: p != "gan")


def test_alternate_deterministic(tmp_path):
    run_trainer(tmp_path / "a", seed=4)
    run_trainer(tmp_path / "b", seed=4)
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_single_round_equals_first_round_of_two(tmp_path):
    a = run_trainer(tmp_path / "k1", rounds=1)
    run_trainer(tmp_path / "k2", rounds=2)
    one = torch.load(tmp_path / "k1" / "checkpoints" / "round01.pt", weights_only=False)
    two = torch.load(tmp_path / "k2" / "checkpoints" / "round01.pt", weights_only=False)
    for k in one["models"]:
        for name, t in one["models"][k].items():
            assert torch.equal(t, two["models"][k][name]), (k, name)
    rows1 = read_log(tmp_path / "k1" / "metrics.jsonl")
    rows2 = [r for r in read_log(tmp_path / "k2" / "metrics.jsonl") if r["round"] == 1]
    assert rows1 == rows2
    assert a.state.round == 2


def test_resume_reproduces_losses(tmp_path):
    sched = dict(gan_images=48, seg_steps=4, checkpoint_every=4)
    full = run_trainer(tmp_path / "full", rounds=2, **sched)
    ref = read_log(tmp_path / "full" / "metrics.jsonl")

    # resume from a mid-round step checkpoint of round 1
    ck = tmp_path / "full" / "checkpoints" / "round01_step0000004.pt"
    s = tiny_schedule(rounds=2, **sched)
    tr = AlternateTrainer(tiny_models(99, s), real_data(), LossWeights(), s, SCFG, 0,
                          run_dir=tmp_path / "resumed")
    tr.load(ck)
    tr.run()
    got = read_log(tmp_path / "resumed" / "metrics.jsonl")
    tail = [r for r in ref if r["step"] > 4]
    assert len({r["step"] for r in got}) >= 10
    assert got == tail
    assert state_hash(tr.m.G) == state_hash(full.m.G)


def test_resume_from_round_boundary(tmp_path):
    full = run_trainer(tmp_path / "full", rounds=2)
    s = tiny_schedule(rounds=2)
    tr = AlternateTrainer(tiny_models(5, s), real_data(), LossWeights(), s, SCFG, 0, run_dir=tmp_path / "r")
    tr.load(tmp_path / "full" / "checkpoints" / "round01.pt")
    tr.run()
    assert all(state_hash(full.m.modules()[k]) == state_hash(tr.m.modules()[k]) for k in ("G", "D", "E_pi", "F"))


def test_empty_real_set_rejected():
    s = tiny_schedule()
    with pytest.raises(ValueError):
        AlternateTrainer(tiny_models(0, s), torch.zeros(0, 3, 8, 8), LossWeights(), s, SCFG)
