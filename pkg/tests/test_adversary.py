import pytest
import torch
from torch.nn.utils import parametrize

from helpers import autograd_grad, fd_grad, rel_err, tiny_adversary, tiny_latent
from layeredgan.adversary import (AdversaryConfig, Discriminator, MaskEncoder, discriminate,
                                  infer_mask_posterior)
from layeredgan.latent import LatentConfig


def tiny_D(dtype=torch.float64, **kw):
    torch.manual_seed(0)
    return Discriminator(tiny_latent(**kw), tiny_adversary()).to(dtype)


def test_shapes_at_64():
    lcfg = LatentConfig(d_c=200, group_size=10)
    D = Discriminator(lcfg, AdversaryConfig(resolution=64, base_channels=8, max_channels=32))
    out = discriminate(D, torch.rand(8, 3, 64, 64) * 2 - 1)
    assert out.score.shape == (8,) and out.posterior_c.shape == (8, 200)


def test_resolution_mismatch():
    with pytest.raises(ValueError):
        discriminate(tiny_D(), torch.zeros(2, 3, 16, 16, dtype=torch.float64))


def test_spectral_norm_close_to_one():
    D = tiny_D(dtype=torch.float32)
    D.train()
    for _ in range(30):
        D(torch.randn(4, 3, 8, 8))
    D.eval()
    assert len(D.normalized) >= 4
    for m in D.normalized:
        w = m.weight.detach()
        sigma = torch.linalg.svdvals(w.reshape(w.shape[0], -1))[0]
        assert 0.95 <= float(sigma) <= 1.05


def test_score_gradient_matches_fd():
    D = tiny_D().eval()
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    f = lambda v: D(v).score.sum()
    assert rel_err(autograd_grad(f, x), fd_grad(f, x)) <= 1e-3


def test_shared_backbone_contract():
    D = tiny_D().eval()
    x = torch.rand(3, 3, 8, 8, dtype=torch.float64) * 2 - 1
    base = D(x)
    with torch.no_grad():
        D.score_conv.parametrizations.weight.original.add_(0.3)
    after = D(x)
    assert torch.equal(after.posterior_c, base.posterior_c)
    assert not torch.equal(after.score, base.score)

    D = tiny_D().eval()
    with torch.no_grad():
        D.post_fc.weight.add_(0.3)
    after = D(x)
    assert torch.equal(after.score, base.score)
    assert not torch.equal(after.posterior_c, base.posterior_c)

    D = tiny_D().eval()
    with torch.no_grad():
        D.trunk[0].parametrizations.weight.original.mul_(1.7).add_(0.05)
    after = D(x)
    assert not torch.equal(after.score, base.score)
    assert not torch.equal(after.posterior_c, base.posterior_c)


def test_lipschitz_sanity():
    D = tiny_D(dtype=torch.float32)
    D.train()
    for _ in range(30):
        D(torch.randn(4, 3, 8, 8))
    D.eval()
    # |conv(x)| <= sigma(W_mat) * ceil(k / s) * |x|: each input pixel feeds at most
    # ceil(k / s)^2 output positions; LeakyReLU is 1-Lipschitz
    bound = 1.0
    for m in D.normalized:
        w = m.weight.detach()
        bound *= float(torch.linalg.svdvals(w.reshape(w.shape[0], -1))[0])
        if isinstance(m, torch.nn.Conv2d):
            bound *= -(-m.kernel_size[0] // m.stride[0])
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        x1 = torch.rand(1, 3, 8, 8, generator=g) * 2 - 1
        x2 = torch.rand(1, 3, 8, 8, generator=g) * 2 - 1
        gap = (D(x1).score - D(x2).score).abs().item()
        assert gap <= 2 * bound * (x1 - x2).norm().item()


def test_normal_prior_posterior():
    D = tiny_D(prior_c="normal", d_c=3, group_size=1).eval()
    out = D(torch.zeros(2, 3, 8, 8, dtype=torch.float64))
    assert out.posterior_c.shape == (2, 3) and out.logvar.shape == (2, 3)
    assert out.logvar.abs().max() <= 5


def test_mask_posterior_cub_grouping():
    E = MaskEncoder(LatentConfig(d_c=200, group_size=10), AdversaryConfig(resolution=64, mask_channels=4))
    logits, logvar = infer_mask_posterior(E, torch.rand(8, 1, 64, 64))
    assert logits.shape == (8, 20) and logvar is None


def test_mask_posterior_constant_input():
    E = MaskEncoder(tiny_latent(), tiny_adversary())
    logits, _ = infer_mask_posterior(E, torch.zeros(5, 1, 8, 8))
    assert torch.equal(logits, logits[:1].expand_as(logits))


def test_mask_posterior_gradient():
    E = MaskEncoder(tiny_latent(), tiny_adversary()).double()
    m = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    f = lambda v: E(v)[0].pow(2).sum()
    assert rel_err(autograd_grad(f, m), fd_grad(f, m)) <= 1e-3


def test_mask_posterior_shape_check():
    E = MaskEncoder(tiny_latent(), tiny_adversary())
    with pytest.raises(ValueError):
        infer_mask_posterior(E, torch.zeros(2, 3, 8, 8))
