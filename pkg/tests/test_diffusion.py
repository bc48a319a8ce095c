import numpy as np
import pytest
import torch
from torch import nn

from fewgen.denoiser import ModelConfig, DenoiserUNet
from fewgen.diffusion import (DiffusionConfig, denoising_loss_given_noise,
                              heun_sample, precondition_coeffs, sample,
                              sample_batch, sample_sigma, sigma_grid,
                              training_loss)
from fewgen.errors import DomainError, SamplingError, ShapeMismatchError
from fewgen.ts2img import EmbedConfig, TimeSeries, delay_embed

CFG = DiffusionConfig()

TINY = ModelConfig(base_channels=8, channel_multipliers=(1, 2), image_side=8,
                   attention_resolutions=(4,), num_res_blocks=1,
                   num_middle_blocks=1, canonical_channels=8)


def test_coeff_values_at_sigma_equal_sigma_data():
    c = precondition_coeffs(0.5, DiffusionConfig(sigma_data=0.5))
    assert c.c_skip == pytest.approx(0.5)
    assert c.c_in == pytest.approx(1 / np.sqrt(0.5))
    assert c.c_out == pytest.approx(0.25 / np.sqrt(0.5))
    assert c.weight == pytest.approx(8.0)
    assert c.c_noise == pytest.approx(np.log(0.5) / 4)


def test_coeff_limits_at_small_sigma():
    c = precondition_coeffs(1e-8, CFG)
    assert c.c_skip == pytest.approx(1.0)
    assert abs(c.c_out) < 1e-7


def test_weight_times_cout_squared_is_one():
    sigmas = np.geomspace(CFG.sigma_min, CFG.sigma_max, 1000)
    c = precondition_coeffs(sigmas, CFG)
    assert np.max(np.abs(c.weight * c.c_out**2 - 1.0)) < 1e-10


def test_nonpositive_sigma_rejected():
    with pytest.raises(DomainError):
        precondition_coeffs(0.0, CFG)
    with pytest.raises(DomainError):
        precondition_coeffs(torch.tensor([1.0, -2.0]), CFG)


def test_sample_sigma_reproducible_and_lognormal():
    a = sample_sigma(np.random.default_rng(11), CFG, size=1000)
    b = sample_sigma(np.random.default_rng(11), CFG, size=1000)
    assert np.array_equal(a, b)
    big = sample_sigma(np.random.default_rng(0), CFG, size=100_000)
    assert np.mean(np.log(big)) == pytest.approx(CFG.p_mean, abs=0.02)
    frozen = DiffusionConfig(p_mean=-1.2, p_std=0.0)
    vals = sample_sigma(np.random.default_rng(1), frozen, size=8)
    assert np.allclose(vals, np.exp(-1.2))


def test_sigma_grid_monotone_with_endpoints():
    grid = sigma_grid(CFG)
    assert len(grid) == CFG.num_steps
    assert grid[0] == pytest.approx(CFG.sigma_max)
    assert grid[-1] == pytest.approx(CFG.sigma_min)
    assert np.all(np.diff(grid) < 0)
    assert sigma_grid(DiffusionConfig(num_steps=1)).tolist() == [CFG.sigma_max]


class _PerfectDenoiser(nn.Module):
    """Raw network whose preconditioned output Gamma equals the clean x0."""

    def __init__(self, x0, cfg):
        super().__init__()
        self.x0, self.cfg = x0, cfg
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, u, c_noise, token_ids, c_out):
        sigma = torch.exp(4.0 * c_noise).view(-1, 1, 1, 1)
        c = precondition_coeffs(sigma, self.cfg)
        return (self.x0 - c.c_skip * u / c.c_in) / c.c_out


class _IdentityGamma(nn.Module):
    """Raw network whose preconditioned output Gamma equals the noisy input."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, u, c_noise, token_ids, c_out):
        sigma = torch.exp(4.0 * c_noise).view(-1, 1, 1, 1)
        c = precondition_coeffs(sigma, self.cfg)
        return u * (1.0 - c.c_skip) / (c.c_out * c.c_in)


def _loss_inputs(batch=64, channels=2, seed=0):
    rng = np.random.default_rng(seed)
    x0 = torch.as_tensor(rng.standard_normal((batch, channels, 8, 8)),
                         dtype=torch.float64)
    mask = torch.ones_like(x0)
    sigma = torch.as_tensor(sample_sigma(rng, CFG, size=batch), dtype=torch.float64)
    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)),
                          dtype=torch.float64) * sigma.view(-1, 1, 1, 1)
    tokens = torch.zeros(batch, dtype=torch.int64)
    return x0, mask, sigma, eps, tokens


def test_perfect_denoiser_gives_zero_loss():
    x0, mask, sigma, eps, tokens = _loss_inputs()
    model = _PerfectDenoiser(x0, CFG)
    losses = denoising_loss_given_noise(model, tokens, x0, mask, sigma, eps, CFG)
    assert torch.allclose(losses, torch.zeros_like(losses), atol=1e-18)


def test_identity_denoiser_matches_analytic_expectation():
    x0, mask, sigma, eps, tokens = _loss_inputs(batch=512)
    model = _IdentityGamma(CFG)
    losses = denoising_loss_given_noise(model, tokens, x0, mask, sigma, eps, CFG)
    # E over eps of each per-sample loss is lambda(sigma) * sigma^2
    expected = (precondition_coeffs(sigma, CFG).weight * sigma**2).mean().item()
    assert losses.mean().item() == pytest.approx(expected, rel=0.02)


def test_fully_masked_sample_contributes_nothing():
    torch.manual_seed(0)
    model = DenoiserUNet(TINY, num_tokens=2).double()
    x0, mask, sigma, eps, tokens = _loss_inputs(batch=3, channels=2)
    mask[1] = 0.0
    losses = denoising_loss_given_noise(model, tokens, x0, mask, sigma, eps, CFG)
    assert losses[1].item() == 0.0
    # gradient of the masked sample's loss alone is exactly zero everywhere
    model.zero_grad()
    losses[1].backward()
    for p in model.parameters():
        assert p.grad is None or torch.all(p.grad == 0)


def test_invalid_pixels_get_zero_output_gradient():
    class Raw(nn.Module):
        def __init__(self, shape):
            super().__init__()
            self.out = nn.Parameter(torch.randn(*shape, dtype=torch.float64))

        def forward(self, u, c_noise, token_ids, c_out):
            return self.out

    x0, mask, sigma, eps, tokens = _loss_inputs(batch=4, channels=1)
    mask[:, :, 4:, :] = 0.0
    model = Raw(tuple(x0.shape))
    loss = denoising_loss_given_noise(model, tokens, x0, mask, sigma, eps,
                                      CFG).mean()
    loss.backward()
    grad = model.out.grad
    assert torch.all(grad[mask == 0] == 0)
    assert grad[mask == 1].abs().sum() > 0


def test_training_loss_runs_on_image_batch():
    torch.manual_seed(0)
    model = DenoiserUNet(TINY, num_tokens=1)
    rng = np.random.default_rng(0)
    batch = [delay_embed(TimeSeries(values=rng.standard_normal((24, 3))))
             for _ in range(4)]
    loss = training_loss(batch, model, [1, 1, 1, 1], rng, CFG)
    assert torch.isfinite(loss)
    bad = batch[:2] + [delay_embed(TimeSeries(values=rng.standard_normal((24, 5))))]
    with pytest.raises(ShapeMismatchError):
        training_loss(bad, model, [1, 1, 1], rng, CFG)


def _gaussian_denoiser(mu, s2):
    def denoise(x, sigma):
        return (s2 * x + sigma**2 * mu) / (s2 + sigma**2)
    return denoise


def test_heun_reproduces_gaussian_statistics():
    mu, s = 1.0, 0.5
    rng = np.random.default_rng(123)
    mask = torch.ones(1, 1, 1, 1)
    x = heun_sample(_gaussian_denoiser(mu, s * s), (10_000, 1, 1, 1), mask, rng, CFG)
    vals = x.numpy().ravel()
    assert abs(vals.mean() - mu) <= 0.03 * max(abs(mu), 1.0)
    assert abs(vals.std() - s) <= 0.03 * s


def test_single_step_schedule_is_one_denoiser_call():
    cfg = DiffusionConfig(num_steps=1)
    calls = []

    def denoise(x, sigma):
        calls.append(float(sigma))
        return torch.full_like(x, 7.0)

    rng = np.random.default_rng(0)
    out = heun_sample(denoise, (5, 1, 1, 1), torch.ones(1, 1, 1, 1), rng, cfg)
    assert calls == [cfg.sigma_max]
    assert torch.allclose(out, torch.full_like(out, 7.0))


def test_sampler_pins_masked_pixels_and_checks_finiteness():
    mask = torch.ones(1, 1, 2, 2)
    mask[..., 1] = 0.0
    rng = np.random.default_rng(4)
    out = heun_sample(_gaussian_denoiser(0.3, 1.0), (8, 1, 2, 2), mask, rng, CFG)
    assert torch.all(out[..., 1] == 0)

    def nan_denoise(x, sigma):
        return torch.full_like(x, float("nan"))

    with pytest.raises(SamplingError):
        heun_sample(nan_denoise, (1, 1, 2, 2), torch.ones(1, 1, 2, 2),
                    np.random.default_rng(0), CFG)


def test_sample_returns_series_and_is_deterministic():
    torch.manual_seed(3)
    model = DenoiserUNet(TINY, num_tokens=1)
    cfg = DiffusionConfig(num_steps=8)
    a = sample(model, 1, 3, 24, np.random.default_rng(9), cfg)
    b = sample(model, 1, 3, 24, np.random.default_rng(9), cfg)
    assert isinstance(a, TimeSeries)
    assert a.values.shape == (24, 3)
    assert np.array_equal(a.values, b.values)
    many = sample_batch(model, 1, 3, 12, 4, np.random.default_rng(1), cfg)
    assert len(many) == 4 and many[0].values.shape == (12, 3)
