"""Dynamic 2-D convolution with channel-axis kernel interpolation.

One canonical kernel of shape [K, K, C0, C1] is stored; at call time its two
channel axes are resized by separable cubic (Catmull-Rom, a = -0.5)
interpolation to the caller's (C_in, C_out). The resize is linear in the
canonical weights, so gradients flow straight through it. A static
padded-channel baseline and a closed-form FLOP model live here too.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

CUBIC_A = -0.5  # Catmull-Rom


def _cubic_weights(f: float, a: float = CUBIC_A):
    """Weights of the 4 taps around a sample at fractional offset f in [0, 1)."""

    def w(t):
        t = abs(t)
        if t <= 1.0:
            return (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
        if t < 2.0:
            return a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
        return 0.0

    return [w(1.0 + f), w(f), w(1.0 - f), w(2.0 - f)]


@functools.lru_cache(maxsize=None)
def resample_matrix(src: int, dst: int) -> np.ndarray:
    """[dst, src] cubic-resampling matrix with half-pixel mapping and edge clamp.

    Row j holds the tap weights that produce output sample j from the source
    axis; src == dst yields the exact identity.
    """
    if src < 1 or dst < 1:
        raise ConfigError("axis sizes must be >= 1")
    A = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for j in range(dst):
        x = (j + 0.5) * scale - 0.5
        i0 = int(np.floor(x))
        f = x - i0
        for tap, w in zip(range(i0 - 1, i0 + 3), _cubic_weights(f)):
            A[j, min(max(tap, 0), src - 1)] += w
    return A


class CanonicalKernel(nn.Module):
    """The single learnable kernel [K, K, C0, C1] plus bias of a DyConv layer."""

    def __init__(self, kernel_size: int = 3, ref_in: int = 128, ref_out: int = 128,
                 init_zero: bool = False):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if ref_in < 1 or ref_out < 1:
            raise ConfigError("reference channel counts must be >= 1")
        self.kernel_size = kernel_size
        self.ref_in = ref_in
        self.ref_out = ref_out
        weight = torch.randn(kernel_size, kernel_size, ref_in, ref_out)
        weight *= (kernel_size * kernel_size * ref_in) ** -0.5
        if init_zero:
            weight.zero_()
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(ref_out))


def _matrix_like(src: int, dst: int, ref: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(resample_matrix(src, dst), dtype=ref.dtype,
                           device=ref.device)


def interp_kernel(kernel: CanonicalKernel, c_in: int, c_out: int) -> torch.Tensor:
    """Resize the canonical weights to [K, K, c_in, c_out].

    Separable cubic interpolation over the two channel axes; the K x K spatial
    axes are untouched. (C0, C1) -> (C0, C1) is the exact identity.
    """
    if c_in < 1 or c_out < 1:
        raise ConfigError("target channel counts must be >= 1")
    w = kernel.weight
    if c_in != kernel.ref_in:
        A = _matrix_like(kernel.ref_in, c_in, w)
        w = torch.einsum("ic,klcj->klij", A, w)
    if c_out != kernel.ref_out:
        B = _matrix_like(kernel.ref_out, c_out, w)
        w = torch.einsum("oC,kliC->klio", B, w)
    return w


def interp_bias(kernel: CanonicalKernel, c_out: int) -> torch.Tensor:
    """1-D cubic resize of the canonical bias to length c_out."""
    if c_out == kernel.ref_out:
        return kernel.bias
    B = _matrix_like(kernel.ref_out, c_out, kernel.bias)
    return B @ kernel.bias


def dyconv_forward(x: torch.Tensor, kernel: CanonicalKernel, c_out: int) -> torch.Tensor:
    """Same-padded stride-1 conv of x with the interpolated kernel and bias.

    Accepts [C_in, H, W] or [B, C_in, H, W]; output keeps the spatial size.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] input, got shape {tuple(x.shape)}")
    c_in = x.shape[1]
    w = interp_kernel(kernel, c_in, c_out)  # [K, K, c_in, c_out]
    b = interp_bias(kernel, c_out)
    y = F.conv2d(x, w.permute(3, 2, 0, 1), b, padding=kernel.kernel_size // 2)
    return y[0] if squeeze else y


class DyConv2d(nn.Module):
    """Conv layer whose channel counts are decided per call from one canonical kernel."""

    def __init__(self, kernel_size: int = 3, ref_in: int = 128, ref_out: int = 128,
                 init_zero: bool = False):
        super().__init__()
        self.kernel = CanonicalKernel(kernel_size, ref_in, ref_out, init_zero=init_zero)

    def forward(self, x: torch.Tensor, c_out: int) -> torch.Tensor:
        return dyconv_forward(x, self.kernel, c_out)


class PaddedConv2d(nn.Module):
    """Static-convolution baseline: inputs zero-padded to a fixed max channel count.

    Used by the channel-padding ablation; the cost of its conv grows linearly
    with c_max no matter how many channels the input actually has.
    """

    def __init__(self, c_max: int, c_out: int, kernel_size: int = 3):
        super().__init__()
        if c_max < 1 or c_out < 1:
            raise ConfigError("channel counts must be >= 1")
        self.c_max = c_max
        self.c_out = c_out
        self.kernel_size = kernel_size
        weight = torch.randn(c_out, c_max, kernel_size, kernel_size)
        weight *= (kernel_size * kernel_size * c_max) ** -0.5
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        c_in = x.shape[1]
        if c_in > self.c_max:
            raise ConfigError(f"input has {c_in} channels but c_max is {self.c_max}")
        if c_in < self.c_max:
            pad = x.new_zeros(x.shape[0], self.c_max - c_in, *x.shape[2:])
            x = torch.cat([x, pad], dim=1)
        y = F.conv2d(x, self.weight, self.bias, padding=self.kernel_size // 2)
        return y[0] if squeeze else y


def padded_adapter_forward(x: torch.Tensor, layer: PaddedConv2d) -> torch.Tensor:
    """Apply the padded-channel baseline layer (zero-pad to c_max, static conv)."""
    return layer(x)


def output_channel_mask(c_valid: int, c_out: int) -> torch.Tensor:
    """Boolean [c_out] mask: which output channels carry real (unpadded) data.

    The training loss must zero the contribution of channels past c_valid when
    the padded baseline is used as the output layer.
    """
    if c_valid > c_out:
        raise ConfigError(f"c_valid {c_valid} exceeds c_out {c_out}")
    mask = torch.zeros(c_out, dtype=torch.bool)
    mask[:c_valid] = True
    return mask


# FLOP accounting: 1 multiply-accumulate = 2 FLOPs; the DyConv interpolation
# term uses a 4-tap separable cubic, counted as const = 8 ops per (c_in, c_out)
# weight entry.
INTERP_CONST = 8


@dataclass(frozen=True)
class LayerSpec:
    """Shape description of one adapter layer for closed-form FLOP counting."""

    kind: str  # "dyconv" | "padded"
    c_in: int
    c_out: int
    height: int
    width: int
    kernel_size: int = 3
    c_max: int = None  # padded baseline only


def conv_flops(kernel_size: int, c_in: int, c_out: int, height: int, width: int) -> int:
    return 2 * kernel_size**2 * c_in * c_out * height * width


def interp_flops(kernel_size: int, c_in: int, c_out: int) -> int:
    return INTERP_CONST * kernel_size**2 * c_in * c_out


def flops_estimate(spec: LayerSpec) -> int:
    """Deterministic closed-form FLOP count of one adapter layer.

    DyConv cost is independent of any pre-training maximum channel count; the
    padded baseline convolves all c_max channels regardless of c_in.
    """
    if spec.kind == "dyconv":
        return conv_flops(spec.kernel_size, spec.c_in, spec.c_out, spec.height,
                          spec.width) + interp_flops(spec.kernel_size, spec.c_in,
                                                     spec.c_out)
    if spec.kind == "padded":
        c_max = spec.c_max if spec.c_max is not None else spec.c_in
        if spec.c_in > c_max:
            raise ConfigError(f"c_in {spec.c_in} exceeds c_max {c_max}")
        return conv_flops(spec.kernel_size, c_max, spec.c_out, spec.height, spec.width)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")
