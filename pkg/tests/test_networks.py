import math

import numpy as np
import pytest
import torch

from selective_utility.decoder import TaskDecoder, renormalize_for_target
from selective_utility.encoder import VariationalEncoder, reparameterize
from selective_utility.errors import ConfigError, ContractError, NumericError


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


# ---------------------------------------------------------------- encoder


def test_zero_heads_give_zero_posterior_params():
    enc = VariationalEncoder(6, width=16, blocks=2).eval()
    for head in (enc.head_mu, enc.head_logvar):
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
    mu, log_var = enc(torch.randn(3, 3, 16, 16))
    assert torch.equal(mu, torch.zeros(3, 6))
    assert torch.equal(log_var, torch.zeros(3, 6))


def test_identical_images_identical_rows():
    enc = VariationalEncoder(6, width=16, blocks=2).eval()
    mu, log_var = enc(torch.randn(1, 3, 16, 16).repeat(4, 1, 1, 1))
    assert torch.equal(mu[0], mu[3]) and torch.equal(log_var[1], log_var[2])


def test_output_shapes():
    mu, log_var = VariationalEncoder(12, width=32, blocks=3)(torch.randn(5, 3, 32, 32))
    assert mu.shape == log_var.shape == (5, 12)


def test_log_var_clamped():
    enc = VariationalEncoder(4, width=16, blocks=2).eval()
    with torch.no_grad():
        enc.head_logvar.bias.copy_(torch.tensor([50.0, -50.0, 0.0, 3.0]))
        enc.head_logvar.weight.zero_()
    _, log_var = enc(torch.randn(2, 3, 16, 16))
    assert log_var[:, 0].eq(10).all() and log_var[:, 1].eq(-10).all()


def test_non_finite_activation_names_layer():
    enc = VariationalEncoder(4, width=16, blocks=2).eval()
    with torch.no_grad():
        enc.head_mu.weight[0, 0] = float("nan")
    with pytest.raises(NumericError) as exc:
        enc(torch.randn(2, 3, 16, 16))
    assert exc.value.layer == "head_mu"


def test_encoder_weight_gradient_matches_finite_differences():
    torch.manual_seed(5)
    enc = VariationalEncoder(3, width=8, blocks=2).double().eval()
    x = torch.randn(4, 3, 8, 8, dtype=torch.float64)
    weights = torch.randn(4, 3, dtype=torch.float64)

    def scalar():
        mu, _ = enc(x)
        return (torch.tanh(mu) * weights).sum()

    param = enc.backbone[0].weight
    grad = torch.autograd.grad(scalar(), param)[0][0].flatten()

    h = 1e-3
    fd = []
    with torch.no_grad():
        for i in range(grad.numel()):
            w = param[0].view(-1)
            orig = w[i].item()
            w[i] = orig + h
            up = scalar().item()
            w[i] = orig - h
            down = scalar().item()
            w[i] = orig
            fd.append((up - down) / (2 * h))
    assert rel_err(grad.numpy(), fd) < 1e-3


# ---------------------------------------------------------- reparameterize


def test_near_degenerate_noise():
    mu = torch.randn(1000, 4)
    log_var = torch.full_like(mu, -10.0)
    z = reparameterize(mu, log_var, torch.Generator().manual_seed(0))
    sigma = math.exp(-5.0)
    assert (z - mu).abs().max() <= 5 * sigma


def test_monte_carlo_moments():
    n, d = 100_000, 4
    z = reparameterize(torch.zeros(n, d, dtype=torch.float64), torch.zeros(n, d, dtype=torch.float64),
                       torch.Generator().manual_seed(11))
    assert z.mean(0).abs().max() <= 0.02
    var = z.var(0)
    assert ((var >= 0.97) & (var <= 1.03)).all()


def test_monte_carlo_moments_nonstandard():
    n = 100_000
    mu = torch.tensor([[1.5, -2.0]], dtype=torch.float64).expand(n, 2)
    log_var = torch.tensor([[math.log(4.0), math.log(0.25)]], dtype=torch.float64).expand(n, 2)
    z = reparameterize(mu, log_var, torch.Generator().manual_seed(2))
    # 3-sigma bands: sd of the mean = sigma / sqrt(n), sd of the variance ~ sigma^2 sqrt(2/n)
    sig2 = torch.tensor([4.0, 0.25], dtype=torch.float64)
    assert ((z.mean(0) - mu[0]).abs() <= 3 * sig2.sqrt() / math.sqrt(n)).all()
    assert ((z.var(0) - sig2).abs() <= 3 * sig2 * math.sqrt(2 / n)).all()


def test_same_seed_same_draw():
    mu, log_var = torch.randn(8, 5), torch.randn(8, 5)
    a = reparameterize(mu, log_var, torch.Generator().manual_seed(9))
    b = reparameterize(mu, log_var, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_deterministic_mode_returns_mu_bitwise():
    mu, log_var = torch.randn(8, 5), torch.randn(8, 5)
    z = reparameterize(mu, log_var, deterministic=True)
    assert z is mu


def test_reparameterization_gradients():
    mu = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    log_var = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    gen = torch.Generator().manual_seed(4)
    state = gen.get_state()
    z = reparameterize(mu, log_var, gen)
    eps = (z - mu) / torch.exp(0.5 * log_var)
    g_mu, g_lv = torch.autograd.grad(z.sum(), (mu, log_var))
    assert torch.equal(g_mu, torch.ones_like(mu))
    analytic = 0.5 * torch.exp(0.5 * log_var) * eps
    assert torch.allclose(g_lv, analytic.detach(), rtol=1e-10)

    h = 1e-3
    fd = torch.zeros_like(log_var)
    with torch.no_grad():
        for idx in np.ndindex(*log_var.shape):
            outs = []
            for sign in (1, -1):
                lv = log_var.clone()
                lv[idx] += sign * h
                outs.append(reparameterize(mu, lv, torch.Generator().set_state(state))[idx].item())
            fd[idx] = (outs[0] - outs[1]) / (2 * h)
    assert rel_err(g_lv.numpy(), fd.numpy()) < 1e-3


def test_shape_mismatch():
    with pytest.raises(ContractError):
        reparameterize(torch.zeros(2, 3), torch.zeros(2, 4))


# ---------------------------------------------------------------- decoder


def test_output_range_and_shape():
    dec = TaskDecoder(8, 32, base=4)
    x = dec(torch.randn(6, 8) * 100)
    assert x.shape == (6, 3, 32, 32)
    assert x.abs().max() <= 1.0


def test_full_scale_geometry():
    dec = TaskDecoder(512, 224, base=14).eval()
    assert dec.num_blocks == 4
    assert dec.projection.out_features == 3 * 14 * 14
    assert dec(torch.randn(1, 512)).shape == (1, 3, 224, 224)


@pytest.mark.parametrize("base,res", [(14, 200), (5, 32), (4, 4)])
def test_resolution_contract_checked_at_construction(base, res):
    with pytest.raises(ConfigError):
        TaskDecoder(8, res, base=base)


def test_wrong_latent_width():
    with pytest.raises(ContractError):
        TaskDecoder(8, 16, base=4)(torch.zeros(2, 9))


def test_zero_latent_deterministic():
    dec = TaskDecoder(8, 16, base=4).eval()
    torch.nn.init.zeros_(dec.projection.bias)
    z = torch.zeros(2, 8)
    a, b = dec(z), dec(z)
    assert torch.equal(a, b)
    assert torch.equal(a[0], a[1])


def test_decoder_gradient_matches_finite_differences():
    torch.manual_seed(2)
    dec = TaskDecoder(5, 8, base=4, channels=8).double().eval()
    z = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(dec(z).mean(), z)
    h = 1e-3
    fd = np.zeros(z.numel())
    with torch.no_grad():
        flat = z.detach().reshape(-1)
        for i in range(flat.numel()):
            zp, zm = flat.clone(), flat.clone()
            zp[i] += h
            zm[i] -= h
            fd[i] = (dec(zp.view_as(z)).mean() - dec(zm.view_as(z)).mean()).item() / (2 * h)
    assert rel_err(grad.numpy(), fd) < 1e-3


def test_masked_dimensions_do_not_reach_decoder():
    dec = TaskDecoder(6, 16, base=4).eval()
    mask = torch.tensor([1.0, 0, 1, 0, 0, 1])
    z = torch.randn(3, 6)
    z2 = z.clone()
    z2[:, [1, 3, 4]] += torch.randn(3, 3) * 10
    assert torch.equal(dec(z * mask), dec(z2 * mask))


# ------------------------------------------------------------- renormalize


def test_renormalize_endpoints():
    lo = renormalize_for_target(-torch.ones(1, 3, 2, 2), (0.5,) * 3, (0.5,) * 3)
    hi = renormalize_for_target(torch.ones(1, 3, 2, 2), (0.5,) * 3, (0.5,) * 3)
    assert torch.equal(lo, -torch.ones_like(lo))
    assert torch.equal(hi, torch.ones_like(hi))


def test_renormalize_imagenet_red_channel():
    out = renormalize_for_target(torch.zeros(1, 3, 2, 2, dtype=torch.float64),
                                 (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))
    assert out[0, 0, 0, 0].item() == pytest.approx((0.5 - 0.485) / 0.229, abs=1e-12)
    assert out[0, 0, 0, 0].item() == pytest.approx(0.0655, abs=1e-4)
