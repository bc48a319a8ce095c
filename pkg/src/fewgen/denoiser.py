"""Denoising UNet with DyConv I/O, noise-level embedding, and dataset tokens.

The network maps a [B, C_in, n, n] image to [B, C_out, n, n]. First and last
layers are dynamic convolutions, so C_in/C_out are decided per call; every
residual block is conditioned through adaptive group normalization
    h <- GN(h) * (1 + s) + b,   (s, b) linear in cat(noise_emb, token_emb).
Token id 0 is the reserved null token: an all-zeros, frozen embedding used for
unconditional sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .dyconv import DyConv2d
from .errors import ConfigError, ShapeError, UnknownTokenError

NULL_TOKEN = 0

_VARIANT_WIDTHS = {"base": 32, "medium": 48, "large": 64, "xl": 80}


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 2, 4)
    attention_resolutions: tuple = (8, 4, 2)
    image_side: int = 8
    size_variant: str = None
    num_res_blocks: int = 2
    num_middle_blocks: int = 3
    kernel_size: int = 3
    canonical_channels: int = 128
    emb_channels: int = None    # defaults to 8 * base_channels
    token_channels: int = None  # defaults to 4 * base_channels

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.emb_channels is None:
            object.__setattr__(self, "emb_channels", 8 * self.base_channels)
        if self.token_channels is None:
            object.__setattr__(self, "token_channels", 4 * self.base_channels)
        levels = len(self.channel_multipliers)
        if levels and self.image_side % (2 ** (levels - 1)) != 0:
            raise ConfigError(
                f"image side {self.image_side} cannot be halved {levels - 1} times")

    @classmethod
    def for_variant(cls, name: str, **overrides) -> "ModelConfig":
        """Size variants scale the base width, holding depth fixed."""
        key = name.lower()
        if key not in _VARIANT_WIDTHS:
            raise ConfigError(f"unknown size variant {name!r}")
        return cls(base_channels=_VARIANT_WIDTHS[key], size_variant=key, **overrides)

    @property
    def noise_emb_dim(self) -> int:
        return 4 * self.base_channels


def _num_groups(channels: int, cap: int = 16) -> int:
    for g in range(min(cap, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of a scalar conditioning value (the c_noise input)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half)
    args = x[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """Residual block with AdaGN conditioning."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.norm_in = nn.GroupNorm(_num_groups(c_in), c_in)
        self.conv_in = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm_cond = nn.GroupNorm(_num_groups(c_out), c_out, affine=False)
        self.cond_proj = _zero_init(nn.Linear(cond_dim, 2 * c_out))
        self.conv_out = _zero_init(nn.Conv2d(c_out, c_out, 3, padding=1))
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, h, cond):
        y = self.conv_in(F.silu(self.norm_in(h)))
        scale, shift = self.cond_proj(cond)[..., None, None].chunk(2, dim=1)
        y = self.norm_cond(y) * (1 + scale) + shift
        y = self.conv_out(F.silu(y))
        return y + self.skip(h)


class AttentionBlock(nn.Module):
    """Single-head dot-product self-attention over spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = _zero_init(nn.Conv2d(channels, channels, 1))

    def forward(self, h):
        b, c, height, width = h.shape
        q, k, v = self.qkv(self.norm(h)).reshape(b, 3, c, height * width).unbind(1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bcj,bij->bci", v, w).reshape(b, c, height, width)
        return h + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, h):
        return self.conv(h)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h):
        return self.conv(F.interpolate(h, scale_factor=2, mode="nearest"))


class DenoiserUNet(nn.Module):
    """The denoising network N(c_in * x; c_noise; y) with a growable token table."""

    def __init__(self, cfg: ModelConfig, num_tokens: int = 0):
        super().__init__()
        self.cfg = cfg
        self.num_tokens = num_tokens
        k, cc = cfg.kernel_size, cfg.canonical_channels
        self.conv_in = DyConv2d(k, cc, cc)
        self.conv_out = DyConv2d(k, cc, cc, init_zero=True)
        self.token_table = nn.Parameter(
            torch.randn(num_tokens, cfg.token_channels) * cfg.token_channels**-0.5)
        self.degenerate = len(cfg.channel_multipliers) == 0
        if self.degenerate:
            return

        base = cfg.base_channels
        widths = [base * m for m in cfg.channel_multipliers]
        attn_at = set(cfg.attention_resolutions)
        cond_dim = cfg.emb_channels + cfg.token_channels
        self.noise_mlp = nn.Sequential(
            nn.Linear(cfg.noise_emb_dim, cfg.emb_channels),
            nn.SiLU(),
            nn.Linear(cfg.emb_channels, cfg.emb_channels),
        )

        ch = base
        res = cfg.image_side
        skip_chs = [ch]
        self.down = nn.ModuleList()
        for level, w in enumerate(widths):
            for _ in range(cfg.num_res_blocks):
                block = nn.ModuleDict({"res": ResBlock(ch, w, cond_dim)})
                ch = w
                if res in attn_at:
                    block["attn"] = AttentionBlock(ch)
                self.down.append(block)
                skip_chs.append(ch)
            if level < len(widths) - 1:
                self.down.append(nn.ModuleDict({"down": Downsample(ch)}))
                skip_chs.append(ch)
                res //= 2

        self.middle = nn.ModuleList()
        for _ in range(cfg.num_middle_blocks):
            self.middle.append(ResBlock(ch, ch, cond_dim))
            if res in attn_at and len(self.middle) == 1:
                self.middle.append(AttentionBlock(ch))

        self.up = nn.ModuleList()
        for level, w in reversed(list(enumerate(widths))):
            for i in range(cfg.num_res_blocks + 1):
                block = nn.ModuleDict(
                    {"res": ResBlock(ch + skip_chs.pop(), w, cond_dim)})
                ch = w
                if res in attn_at:
                    block["attn"] = AttentionBlock(ch)
                if level > 0 and i == cfg.num_res_blocks:
                    block["up"] = Upsample(ch)
                    res *= 2
                self.up.append(block)
        assert not skip_chs
        self.norm_out = nn.GroupNorm(_num_groups(ch), ch)
        self.latent_channels = ch

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        token_ids = torch.as_tensor(token_ids, dtype=torch.int64,
                                    device=self.token_table.device)
        if token_ids.numel() and (
                token_ids.min() < 0 or token_ids.max() > self.num_tokens):
            raise UnknownTokenError(
                f"token ids must lie in [0, {self.num_tokens}], got "
                f"{token_ids.min().item()}..{token_ids.max().item()}")
        emb = self.token_table.new_zeros(token_ids.shape[0], self.cfg.token_channels)
        real = token_ids > 0
        if real.any():
            emb[real] = self.token_table[token_ids[real] - 1]
        return emb

    def add_token(self) -> int:
        """Append a randomly initialized embedding row; returns the new token id."""
        row = torch.randn(1, self.cfg.token_channels,
                          dtype=self.token_table.dtype,
                          device=self.token_table.device)
        row *= self.cfg.token_channels**-0.5
        self.token_table = nn.Parameter(torch.cat([self.token_table.data, row]))
        self.num_tokens += 1
        return self.num_tokens

    def forward(self, x: torch.Tensor, noise_cond, token_ids, c_out: int = None):
        if x.ndim != 4 or x.shape[-1] != x.shape[-2]:
            raise ShapeError(f"expected [B, C, n, n] input, got {tuple(x.shape)}")
        if x.shape[-1] != self.cfg.image_side:
            raise ShapeError(
                f"spatial side {x.shape[-1]} != configured {self.cfg.image_side}")
        if c_out is None:
            c_out = x.shape[1]
        base = self.cfg.base_channels
        if self.degenerate:
            return self.conv_out(self.conv_in(x, base), c_out)

        noise_cond = torch.as_tensor(noise_cond, dtype=x.dtype, device=x.device)
        if noise_cond.ndim == 0:
            noise_cond = noise_cond.expand(x.shape[0])
        cond = torch.cat([
            self.noise_mlp(timestep_embedding(noise_cond, self.cfg.noise_emb_dim)),
            self.embed_tokens(token_ids).to(x.dtype),
        ], dim=-1)

        h = self.conv_in(x, base)
        hs = [h]
        for block in self.down:
            if "down" in block:
                h = block["down"](h)
            else:
                h = block["res"](h, cond)
                if "attn" in block:
                    h = block["attn"](h)
            hs.append(h)
        for block in self.middle:
            h = block(h, cond) if isinstance(block, ResBlock) else block(h)
        for block in self.up:
            h = block["res"](torch.cat([h, hs.pop()], dim=1), cond)
            if "attn" in block:
                h = block["attn"](h)
            if "up" in block:
                h = block["up"](h)
        return self.conv_out(F.silu(self.norm_out(h)), c_out)


def count_parameters(cfg: ModelConfig, num_tokens: int = 0) -> int:
    """Exact trainable-parameter count, token table and DyConv kernels included."""
    model = DenoiserUNet(cfg, num_tokens=num_tokens)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
