import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import TINY, jitter
from vunet.errors import ConfigError, ValidationError
from vunet.model import (DenseBlock, he_init, LatentDistribution, ModelConfig, VariationalUNet, load_model,
                         param_count, predict_ensemble, reparameterize, save_model)
from vunet.rng import RngStream


def fd_grad(f, t: torch.Tensor, idx, eps=1e-6):
    flat = t.view(-1)
    orig = flat[idx].item()
    with torch.no_grad():
        flat[idx] = orig + eps
        hi = f()
        flat[idx] = orig - eps
        lo = f()
        flat[idx] = orig
    return (hi - lo) / (2 * eps)


# -- config --------------------------------------------------------------------

def test_default_config_channel_counts():
    cfg = ModelConfig()
    assert cfg.in_channels == 4 * 8 + 3 == 35
    assert cfg.out_channels == 32 * 4 == 128
    assert cfg.latent_dim == 512
    assert cfg.widths == [32, 64, 128, 256]


@pytest.mark.parametrize("kw", [dict(input_size=30), dict(latent_dim=0), dict(groups=3),
                                dict(dropout_rate=1.0), dict(levels=0)])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_full_scale_is_a_config_change():
    cfg = ModelConfig(input_size=256, levels=5)
    assert cfg.bottleneck_size == 8 and cfg.widths[-1] == 512


# -- dense block ---------------------------------------------------------------

def test_dense_block_layer_sequence():
    assert DenseBlock.layer_sequence() == ["conv", "elu", "gn", "drop"] * 4 + ["conv", "elu"]
    assert VariationalUNet(TINY).layer_sequence() == DenseBlock.layer_sequence()


def test_dense_block_shape_and_determinism():
    cfg = ModelConfig(dropout_rate=0.0)
    block = he_init(DenseBlock(8, 32, cfg), seed=0).eval()
    x = torch.randn(1, 8, 16, 16)
    y1 = block(x)
    assert y1.shape == (1, 32, 16, 16)
    assert torch.equal(y1, block(x))
    assert torch.isfinite(y1).all()


def test_dense_block_has_five_convs_four_norms():
    block = DenseBlock(8, 32, ModelConfig())
    assert len(block.convs) == 5 and len(block.norms) == 4


def test_dense_block_channel_error():
    with pytest.raises(ConfigError, match="channels"):
        DenseBlock(8, 32, ModelConfig())(torch.zeros(1, 7, 4, 4))


# -- encoder -------------------------------------------------------------------

def test_encode_shapes_at_desk_defaults():
    model = VariationalUNet(ModelConfig()).eval()
    skips, latent = model.encode(torch.zeros(1, 35, 32, 32))
    assert [s.shape[-1] for s in skips] == [32, 16, 8, 4]
    assert [s.shape[1] for s in skips] == [32, 64, 128, 256]
    assert model.cfg.bottleneck_size == 2
    assert latent.mu.shape == (1, 512) and latent.sigma.shape == (1, 512)


def test_encode_rejects_wrong_input():
    with pytest.raises(ConfigError):
        VariationalUNet(TINY).eval().encode(torch.zeros(1, 34, 8, 8))


def test_zero_projection_heads_give_bias(tiny_model, tiny_input):
    with torch.no_grad():
        tiny_model.to_mu.weight.zero_()
        tiny_model.to_log_sigma.weight.zero_()
    _, latent = tiny_model.encode(tiny_input)
    assert torch.equal(latent.mu, tiny_model.to_mu.bias.expand_as(latent.mu))
    assert torch.allclose(latent.sigma, torch.exp(tiny_model.to_log_sigma.bias).expand_as(latent.sigma), rtol=0, atol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 50))
def test_sigma_strictly_positive(seed, scale):
    model = VariationalUNet(TINY, seed=seed % 1000, dtype=torch.float64).eval()
    x = torch.as_tensor(np.random.default_rng(seed).standard_normal((1, 35, 8, 8)) * scale)
    _, latent = model.encode(x)
    assert torch.all(latent.sigma > 0)


# -- reparameterization --------------------------------------------------------

def test_reparameterize_mean_mode_is_mu():
    mu = torch.randn(3, 5, dtype=torch.float64)
    lat = LatentDistribution(mu, torch.zeros(3, 5, dtype=torch.float64))
    assert reparameterize(lat, "mean") is mu


def test_reparameterize_degenerate_sigma():
    mu = torch.randn(4, 6, dtype=torch.float64)
    lat = LatentDistribution(mu, torch.full((4, 6), -30.0, dtype=torch.float64))
    z = reparameterize(lat, "sample", RngStream(0))
    assert torch.allclose(z, mu, atol=1e-12)


def test_reparameterize_monte_carlo_moments():
    lat = LatentDistribution.from_sigma(torch.ones(20_000, 1), torch.full((20_000, 1), 2.0))
    z = reparameterize(lat, "sample", RngStream(123)).numpy()
    assert abs(z.mean() - 1.0) < 0.05
    assert abs(z.std() - 2.0) < 0.05


def test_reparameterize_gradients_exact():
    mu = torch.randn(7, dtype=torch.float64, requires_grad=True)
    sigma = (torch.rand(7, dtype=torch.float64) + 0.5).requires_grad_(True)
    eps = torch.as_tensor(RngStream(9).normal((7,)))

    def z_of(m, s):
        return reparameterize(LatentDistribution(m, torch.log(s)), "sample", eps=eps)

    jac_mu, jac_sigma = torch.autograd.functional.jacobian(z_of, (mu, sigma))
    assert torch.allclose(jac_mu, torch.eye(7, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(jac_sigma, torch.diag(eps), atol=1e-12)
    # finite differences with frozen eps agree
    for i in range(7):
        d_mu = fd_grad(lambda: z_of(mu.detach(), sigma.detach())[i].item(), mu.detach(), i)
        d_sig = fd_grad(lambda: z_of(mu.detach(), sigma.detach())[i].item(), sigma.detach(), i)
        assert d_mu == pytest.approx(1.0, abs=1e-8)
        assert d_sig == pytest.approx(eps[i].item(), abs=1e-8)


def test_from_sigma_rejects_nonpositive():
    from vunet.errors import DomainError
    with pytest.raises(DomainError):
        LatentDistribution.from_sigma([0.0], [0.0])


# -- latent reconstruction -----------------------------------------------------

def test_reconstruct_zero_latent_is_zero():
    model = VariationalUNet(ModelConfig())
    out = model.reconstruct_latent(torch.zeros(1, 512))
    assert out.shape == (1, 256, 2, 2)
    assert torch.all(out == 0)


def test_reconstruct_latent_gradient(tiny_model):
    z = torch.randn(1, TINY.latent_dim, dtype=torch.float64)
    cell = (0, 3, 1, 0)
    zr = z.clone().requires_grad_(True)
    tiny_model.reconstruct_latent(zr)[cell].backward()
    for i in range(TINY.latent_dim):
        num = fd_grad(lambda: tiny_model.reconstruct_latent(z)[cell].item(), z, i)
        a = zr.grad[0, i].item()
        assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-6


# -- decoder -------------------------------------------------------------------

def test_decode_output_shape_and_upsampling_chain():
    model = VariationalUNet(ModelConfig()).eval()
    sizes = []
    hooks = [b.up.register_forward_hook(lambda m, i, o: sizes.append(o.shape[-1])) for b in model.decoder]
    y, latent = model(torch.rand(1, 35, 32, 32))
    for h in hooks:
        h.remove()
    assert y.shape == (1, 128, 32, 32)
    assert [model.cfg.bottleneck_size] + sizes == [2, 4, 8, 16, 32]


def test_decode_zero_inputs_give_head_bias():
    model = VariationalUNet(ModelConfig(levels=2, base_width=8, input_size=16)).eval()
    with torch.no_grad():
        model.head.bias.copy_(torch.arange(128, dtype=torch.float32))
        model.head.weight.normal_()
    skips = [torch.zeros(1, 8, 16, 16), torch.zeros(1, 16, 8, 8)]
    start = torch.zeros(1, 16, 4, 4)
    y = model.decode(start, skips)
    assert torch.equal(y, model.head.bias[None, :, None, None].expand_as(y))


def test_decode_skip_mismatch():
    model = VariationalUNet(TINY).eval()
    with pytest.raises(ConfigError):
        model.decode(torch.zeros(1, 8, 2, 2), [torch.zeros(1, 4, 8, 8), torch.zeros(1, 8, 3, 3)])


# -- full forward --------------------------------------------------------------

@pytest.mark.parametrize("size", [16, 32])
def test_forward_shape_contract(size):
    cfg = ModelConfig(input_size=size)
    model = VariationalUNet(cfg).eval()
    y, latent = model(torch.rand(2, 35, size, size))
    assert y.shape == (2, 128, size, size)
    assert latent.mu.shape == (2, 512)


def test_mean_mode_deterministic_and_sample_mode_seeded(tiny_model, tiny_input):
    a, _ = tiny_model(tiny_input, mode="mean")
    b, _ = tiny_model(tiny_input, mode="mean")
    assert torch.equal(a, b)
    s1, _ = tiny_model(tiny_input, mode="sample", rng=RngStream(4))
    s2, _ = tiny_model(tiny_input, mode="sample", rng=RngStream(4))
    s3, _ = tiny_model(tiny_input, mode="sample", rng=RngStream(5))
    assert torch.equal(s1, s2)
    assert not torch.equal(s1, s3)


def test_training_mode_dropout_is_seeded():
    cfg = ModelConfig(**{**TINY.to_dict(), "dropout_rate": 0.3})
    model = jitter(VariationalUNet(cfg, dtype=torch.float64)).train()
    x = torch.rand(1, 35, 8, 8, dtype=torch.float64)
    a, _ = model(x, mode="sample", rng=RngStream(1))
    b, _ = model(x, mode="sample", rng=RngStream(1))
    assert torch.equal(a, b)


def test_skip_paths_are_live(tiny_model):
    rng = np.random.default_rng(0)
    x1 = torch.as_tensor(rng.random((1, 35, 8, 8)))
    x2 = torch.as_tensor(rng.random((1, 35, 8, 8)))
    zero_z = tiny_model.reconstruct_latent(torch.zeros(1, TINY.latent_dim, dtype=torch.float64))
    y1 = tiny_model.decode(zero_z, tiny_model.encode(x1)[0])
    y2 = tiny_model.decode(zero_z, tiny_model.encode(x2)[0])
    assert not torch.allclose(y1, y2)
    skips = [torch.zeros_like(s) for s in tiny_model.encode(x1)[0]]
    za = tiny_model.reconstruct_latent(torch.randn(1, TINY.latent_dim, dtype=torch.float64))
    zb = tiny_model.reconstruct_latent(torch.randn(1, TINY.latent_dim, dtype=torch.float64))
    assert not torch.allclose(tiny_model.decode(za, skips), tiny_model.decode(zb, skips))


def test_end_to_end_finite_difference(tiny_model, tiny_input):
    from vunet.losses import LossConfig, compute_loss
    rng = np.random.default_rng(7)
    target = torch.as_tensor(rng.random((2, 128, 8, 8)))
    mask = torch.as_tensor(rng.random((2, 128, 8, 8)) > 0.2)

    def loss():
        y, lat = tiny_model(tiny_input, mode="sample", rng=RngStream(3))
        return compute_loss(y, target, mask, lat, LossConfig())[0]

    tiny_model.zero_grad()
    loss().backward()
    params = list(tiny_model.named_parameters())
    worst = 0.0
    for _ in range(20):
        name, p = params[rng.integers(len(params))]
        idx = int(rng.integers(p.numel()))
        a = p.grad.view(-1)[idx].item()
        c = fd_grad(lambda: loss().item(), p.data, idx, eps=1e-6)
        worst = max(worst, abs(a - c) / max(abs(a), abs(c), 1e-8))
    assert worst < 1e-4


# -- ensembles -----------------------------------------------------------------

def test_ensemble_single_member(tiny_model, tiny_input):
    members, mean, std = predict_ensemble(tiny_model, tiny_input, 1, RngStream(0))
    assert members.shape[0] == 1
    assert torch.equal(mean, members[0])
    assert torch.all(std == 0)


def test_ensemble_degenerate_sigma(tiny_model, tiny_input):
    with torch.no_grad():
        tiny_model.to_log_sigma.weight.zero_()
        tiny_model.to_log_sigma.bias.fill_(-30.0)
    members, _, _ = predict_ensemble(tiny_model, tiny_input, 4, RngStream(0))
    for m in members[1:]:
        assert torch.allclose(m, members[0], atol=1e-10)


def test_ensemble_spread_grows_with_log_sigma(tiny_model, tiny_input):
    with torch.no_grad():
        tiny_model.to_log_sigma.weight.mul_(0.01)
        base = tiny_model.to_log_sigma.bias.clone()
    spreads = []
    for offset in (-2.0, 0.0, 1.0):
        with torch.no_grad():
            tiny_model.to_log_sigma.bias.copy_(base + offset)
        _, _, std = predict_ensemble(tiny_model, tiny_input, 64, RngStream(1))
        spreads.append(float((std ** 2).mean()))
    assert spreads[0] < spreads[1] < spreads[2]


def test_ensemble_needs_members(tiny_model, tiny_input):
    with pytest.raises(ConfigError):
        predict_ensemble(tiny_model, tiny_input, 0, RngStream(0))


# -- parameter count -----------------------------------------------------------

def test_param_count_dense_bottleneck_contribution():
    # latent -> latent affine map alone
    assert 512 * 512 + 512 == 262_656
    base = ModelConfig(latent_dim=512)
    a = param_count(base)
    b = param_count(ModelConfig(latent_dim=511))
    flat = base.flat_dim
    # two heads (flat -> latent) and one reconstruction (latent -> flat)
    assert a - b == 2 * (flat + 1) + flat


def test_param_count_increases_with_width():
    counts = [param_count(ModelConfig(base_width=w)) for w in (4, 8, 16, 32, 64)]
    assert all(x < y for x, y in zip(counts, counts[1:]))


@pytest.mark.parametrize("cfg", [ModelConfig(), TINY, ModelConfig(levels=3, base_width=8, latent_dim=64)])
def test_param_count_matches_enumeration(cfg):
    model = VariationalUNet(cfg)
    assert param_count(cfg) == sum(p.numel() for p in model.parameters())


# -- persistence ---------------------------------------------------------------

def test_model_file_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_model(tiny_model, path)
    loaded = load_model(path, expected=TINY)
    for (n1, p1), (n2, p2) in zip(tiny_model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.dtype == p2.dtype
        assert torch.equal(p1, p2)


def test_model_file_float32_round_trip(tmp_path):
    model = jitter(VariationalUNet(TINY, dtype=torch.float32))
    save_model(model, tmp_path / "m.ckpt")
    loaded = load_model(tmp_path / "m.ckpt")
    assert all(torch.equal(a, b) for a, b in zip(model.parameters(), loaded.parameters()))


def test_model_file_config_mismatch(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m.ckpt")
    with pytest.raises(ValidationError):
        load_model(tmp_path / "m.ckpt", expected=ModelConfig())
