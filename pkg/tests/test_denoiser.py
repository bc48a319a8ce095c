import numpy as np
import pytest
import torch

from fewgen.denoiser import (NULL_TOKEN, DenoiserUNet, ModelConfig,
                             count_parameters)
from fewgen.errors import ConfigError, ShapeError, UnknownTokenError

TINY = ModelConfig(base_channels=8, channel_multipliers=(1, 2), image_side=8,
                   attention_resolutions=(4,), num_res_blocks=1,
                   num_middle_blocks=1, canonical_channels=8)


def tiny_model(num_tokens=3, seed=0):
    torch.manual_seed(seed)
    return DenoiserUNet(TINY, num_tokens=num_tokens)


def test_shape_contract_preserves_channels():
    model = tiny_model()
    x = torch.randn(2, 7, 8, 8)
    out = model(x, torch.zeros(2), torch.tensor([1, 2]))
    assert out.shape == (2, 7, 8, 8)
    out5 = model(x, torch.zeros(2), torch.tensor([1, 2]), c_out=5)
    assert out5.shape == (2, 5, 8, 8)


def test_null_token_runs_unconditionally():
    model = tiny_model()
    x = torch.randn(1, 3, 8, 8)
    out = model(x, torch.zeros(1), torch.tensor([NULL_TOKEN]))
    assert torch.isfinite(out).all()


def test_unknown_token_rejected():
    model = tiny_model(num_tokens=2)
    x = torch.randn(1, 3, 8, 8)
    with pytest.raises(UnknownTokenError):
        model(x, torch.zeros(1), torch.tensor([3]))
    with pytest.raises(UnknownTokenError):
        model(x, torch.zeros(1), torch.tensor([-1]))


def test_shape_errors():
    model = tiny_model()
    with pytest.raises(ShapeError):
        model(torch.randn(1, 3, 8, 4), torch.zeros(1), torch.tensor([1]))
    with pytest.raises(ShapeError):
        model(torch.randn(1, 3, 16, 16), torch.zeros(1), torch.tensor([1]))


def test_token_is_a_pure_lookup():
    model = tiny_model()
    x = torch.randn(1, 4, 8, 8)
    noise = torch.zeros(1)
    with torch.no_grad():
        out_a = model(x, noise, torch.tensor([1]))
        out_b = model(x, noise, torch.tensor([2]))
        # swap embedding rows 1 and 2; ids follow the rows
        model.token_table.data[[0, 1]] = model.token_table.data[[1, 0]]
        assert torch.equal(model(x, noise, torch.tensor([2])), out_a)
        assert torch.equal(model(x, noise, torch.tensor([1])), out_b)


def test_forward_finite_for_large_inputs():
    model = tiny_model()
    from fewgen.diffusion import DiffusionConfig, precondition_coeffs
    cfg = DiffusionConfig()
    x = torch.full((1, 2, 8, 8), 1e4)
    for sigma in (cfg.sigma_min, 1.0, cfg.sigma_max):
        c = precondition_coeffs(sigma, cfg)
        out = model(torch.as_tensor(c.c_in, dtype=x.dtype) * x,
                    torch.full((1,), float(c.c_noise)), torch.tensor([1]))
        assert torch.isfinite(out).all()


def test_add_token_extends_table():
    model = tiny_model(num_tokens=1)
    assert model.add_token() == 2
    assert model.token_table.shape[0] == 2
    x = torch.randn(1, 2, 8, 8)
    assert model(x, torch.zeros(1), torch.tensor([2])).shape == (1, 2, 8, 8)


@pytest.mark.parametrize("variant,target", [("base", 6e6), ("medium", 15e6),
                                            ("large", 26e6), ("xl", 40e6)])
def test_variant_parameter_counts(variant, target):
    n = count_parameters(ModelConfig.for_variant(variant), num_tokens=19)
    assert abs(n - target) <= 0.15 * target


def test_degenerate_config_counts_tokens_and_dyconv_only():
    cfg = ModelConfig(base_channels=8, channel_multipliers=(),
                      canonical_channels=4, kernel_size=3)
    dyconv = 2 * (3 * 3 * 4 * 4 + 4)
    assert count_parameters(cfg, num_tokens=0) == dyconv
    assert count_parameters(cfg, num_tokens=5) == dyconv + 5 * cfg.token_channels
    torch.manual_seed(0)
    model = DenoiserUNet(cfg, num_tokens=1)
    out = model(torch.randn(2, 3, 8, 8), torch.zeros(2), torch.tensor([1, 0]))
    assert out.shape == (2, 3, 8, 8)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(base_channels=0)
    with pytest.raises(ConfigError):
        ModelConfig(image_side=6, channel_multipliers=(1, 2, 2))
    with pytest.raises(ConfigError):
        ModelConfig.for_variant("giant")


def test_zero_init_output_layer_makes_gamma_skip_only():
    # conv_out starts at zero, so the raw network output is exactly 0 at init
    model = tiny_model()
    out = model(torch.randn(2, 3, 8, 8), torch.zeros(2), torch.tensor([1, 2]))
    assert torch.all(out == 0)
