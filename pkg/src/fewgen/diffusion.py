"""EDM-style preconditioning, masked denoising loss, and deterministic sampling.

The denoiser is parameterized as
    Gamma(x, sigma) = c_skip(sigma) * x + c_out(sigma) * N(c_in(sigma) * x; c_noise; y)
with the coefficient set of the elucidated-diffusion formulation, a log-normal
noise-level distribution for training, and a 2nd-order Heun ODE sampler on the
rho-spaced sigma grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .errors import DomainError, SamplingError, ShapeMismatchError
from .ts2img import (EmbedConfig, ImageTensor, TimeSeries, build_mask,
                     inverse_delay_embed, padded_length)


@dataclass(frozen=True)
class DiffusionConfig:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    p_mean: float = -1.2
    p_std: float = 1.2
    num_steps: int = 36
    rho: float = 7.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise DomainError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise DomainError("sigma_data must be > 0")
        if self.num_steps < 1:
            raise DomainError("num_steps must be >= 1")


class PreconditionCoeffs(NamedTuple):
    c_skip: object
    c_in: object
    c_out: object
    c_noise: object
    weight: object  # the loss weight lambda(sigma)


def precondition_coeffs(sigma, cfg: DiffusionConfig) -> PreconditionCoeffs:
    """Coefficients (c_skip, c_in, c_out, c_noise, lambda) at noise level sigma.

    Works elementwise on floats, numpy arrays, and torch tensors. Satisfies
    lambda(sigma) * c_out(sigma)^2 = 1 for every sigma > 0.
    """
    if isinstance(sigma, torch.Tensor):
        if (sigma <= 0).any():
            raise DomainError("sigma must be > 0")
        log = torch.log
    else:
        sigma = np.asarray(sigma, dtype=np.float64) if np.ndim(sigma) else float(sigma)
        if np.any(np.asarray(sigma) <= 0):
            raise DomainError("sigma must be > 0")
        log = np.log
    sd = cfg.sigma_data
    denom = sigma**2 + sd**2
    c_skip = sd**2 / denom
    c_in = denom**-0.5
    c_out = sigma * sd * denom**-0.5
    c_noise = log(sigma) / 4.0
    weight = denom / (sigma * sd) ** 2
    return PreconditionCoeffs(c_skip, c_in, c_out, c_noise, weight)


def sample_sigma(rng: np.random.Generator, cfg: DiffusionConfig, size=None):
    """Draw training noise levels: ln(sigma) ~ Normal(P_mean, P_std^2)."""
    return np.exp(rng.normal(cfg.p_mean, cfg.p_std, size=size))


def sigma_grid(cfg: DiffusionConfig) -> np.ndarray:
    """Monotone sampling grid sigma_max = sigma_0 > ... > sigma_{N-1} = sigma_min."""
    if cfg.num_steps == 1:
        return np.array([cfg.sigma_max], dtype=np.float64)
    i = np.arange(cfg.num_steps, dtype=np.float64)
    inv_rho = 1.0 / cfg.rho
    base = cfg.sigma_max**inv_rho + i / (cfg.num_steps - 1) * (
        cfg.sigma_min**inv_rho - cfg.sigma_max**inv_rho
    )
    return base**cfg.rho


def preconditioned_denoiser(model, token_ids, c_out: int, cfg: DiffusionConfig):
    """Wrap a raw network N into the denoiser Gamma(x, sigma)."""

    def gamma(x: torch.Tensor, sigma: float) -> torch.Tensor:
        s = torch.full((x.shape[0],), float(sigma), dtype=x.dtype, device=x.device)
        c = precondition_coeffs(s, cfg)
        shape = (-1, 1, 1, 1)
        out = model(c.c_in.view(shape) * x, c.c_noise, token_ids, c_out)
        return c.c_skip.view(shape) * x + c.c_out.view(shape) * out

    return gamma


def denoising_loss_given_noise(model, token_ids, x0: torch.Tensor, mask: torch.Tensor,
                               sigma: torch.Tensor, eps: torch.Tensor,
                               cfg: DiffusionConfig) -> torch.Tensor:
    """Per-sample masked losses [B] for fixed noise draws (sigma, eps).

    Each sample contributes lambda(sigma) * ||mask * (Gamma(x0+eps) - x0)||^2
    averaged over its valid elements; fully masked samples contribute exactly 0.
    """
    mask = mask.to(x0.dtype).expand_as(x0)
    x_sigma = x0 + eps
    c = precondition_coeffs(sigma, cfg)
    shape = (-1, 1, 1, 1)
    out = model(c.c_in.view(shape) * x_sigma, c.c_noise, token_ids, x0.shape[1])
    gamma = c.c_skip.view(shape) * x_sigma + c.c_out.view(shape) * out
    sq = mask * (gamma - x0) ** 2
    valid = mask.sum(dim=(1, 2, 3))
    return c.weight * sq.sum(dim=(1, 2, 3)) / valid.clamp(min=1.0)


def training_loss(batch: list[ImageTensor], model, tokens, rng: np.random.Generator,
                  cfg: DiffusionConfig) -> torch.Tensor:
    """Masked denoising loss of a batch of equally-shaped images.

    Draws sigma per sample from the log-normal schedule and eps ~ N(0, sigma^2 I),
    then averages the per-sample masked losses over the batch.
    """
    shapes = {img.pixels.shape for img in batch}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"batch mixes image shapes: {sorted(shapes)}")
    p = next(model.parameters())
    x0 = torch.as_tensor(
        np.stack([img.pixels for img in batch]), dtype=p.dtype, device=p.device)
    mask = np.stack([
        img.valid_mask[None] if img.channel_mask is None
        else img.valid_mask[None] & img.channel_mask[:, None, None]
        for img in batch
    ])
    mask = torch.as_tensor(mask, dtype=p.dtype, device=p.device)
    token_ids = torch.as_tensor(np.asarray(tokens, dtype=np.int64), device=p.device)

    sigma_np = sample_sigma(rng, cfg, size=len(batch))
    sigma = torch.as_tensor(sigma_np, dtype=p.dtype, device=p.device)
    eps = torch.as_tensor(
        rng.standard_normal(x0.shape), dtype=p.dtype, device=p.device
    ) * sigma.view(-1, 1, 1, 1)
    return denoising_loss_given_noise(
        model, token_ids, x0, mask, sigma, eps, cfg).mean()


def heun_sample(denoise, shape, mask: torch.Tensor, rng: np.random.Generator,
                cfg: DiffusionConfig) -> torch.Tensor:
    """Deterministic 2nd-order integration of the probability-flow ODE.

    Starts from x ~ N(0, sigma_max^2 I), walks the rho grid down to sigma_min
    and finishes with an Euler step to 0 (the terminal step of the cited
    sampler). Invalid pixels are pinned to 0 after every integration step.
    """
    grid = np.append(sigma_grid(cfg), 0.0)
    mask = mask.to(dtype=torch.get_default_dtype())
    x = torch.as_tensor(rng.standard_normal(shape),
                        dtype=mask.dtype, device=mask.device) * grid[0]
    x = x * mask
    for t_cur, t_next in zip(grid[:-1], grid[1:]):
        d_cur = (x - denoise(x, t_cur)) / t_cur
        x_next = (x + (t_next - t_cur) * d_cur) * mask
        if t_next > 0:
            d_next = (x_next - denoise(x_next, t_next)) / t_next
            x_next = (x + (t_next - t_cur) * 0.5 * (d_cur + d_next)) * mask
        x = x_next
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite state at sigma={t_next:.4g}")
    return x


def sample_batch(model, token: int, c_out: int, length: int, num: int,
                 rng: np.random.Generator, cfg: DiffusionConfig,
                 embed_cfg: EmbedConfig = EmbedConfig(),
                 dataset_id: str = "") -> list[TimeSeries]:
    """Generate `num` series of the requested length with one Heun run."""
    p = next(model.parameters())
    mask_np = build_mask(length, c_out, embed_cfg)
    mask = torch.as_tensor(mask_np, dtype=p.dtype, device=p.device)[None, None]
    token_ids = torch.full((num,), int(token), dtype=torch.int64, device=p.device)
    denoise = preconditioned_denoiser(model, token_ids, c_out, cfg)
    n = embed_cfg.window
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = heun_sample(denoise, (num, c_out, n, n), mask, rng, cfg)
    finally:
        model.train(was_training)
    L = padded_length(length, embed_cfg)
    out = []
    for i in range(num):
        img = ImageTensor(pixels=x[i].cpu().numpy(), valid_mask=mask_np,
                          effective_length=L, source_length=length,
                          dataset_id=dataset_id)
        out.append(inverse_delay_embed(img, embed_cfg, length))
    return out


def sample(model, token: int, c_out: int, length: int, rng: np.random.Generator,
           cfg: DiffusionConfig, embed_cfg: EmbedConfig = EmbedConfig(),
           dataset_id: str = "") -> TimeSeries:
    """Generate a single series (see sample_batch)."""
    return sample_batch(model, token, c_out, length, 1, rng, cfg, embed_cfg,
                        dataset_id)[0]
