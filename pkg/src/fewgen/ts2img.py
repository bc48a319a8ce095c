"""Bidirectional mapping between masked time series and square image tensors.

Each channel of a length-T series is unrolled into a trajectory matrix whose
column i holds steps [i*m+1 .. i*m+n] (1-based) of the zero-padded series,
then the matrix is zero-padded on the right to an n x n canvas. A boolean
mask marks which pixels encode real time steps; everything else is padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class TimeSeries:
    """A [T, d] real-valued sequence with per-step validity and an origin id."""

    values: np.ndarray
    valid_mask: np.ndarray = None
    dataset_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise ShapeError(f"values must be [T, d], got shape {self.values.shape}")
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape[0], dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != (self.values.shape[0],):
            raise ShapeError("valid_mask must be a length-T vector")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ConfigError("T and d must both be >= 1")
        if not self.valid_mask.any():
            raise ConfigError("valid_mask must have at least one true entry")
        if not np.isfinite(self.values[self.valid_mask]).all():
            raise ConfigError("values contain non-finite entries on valid steps")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class EmbedConfig:
    """Delay-embedding geometry: skip m between windows, window/canvas side n."""

    skip: int = 8
    window: int = 8

    def __post_init__(self):
        if self.skip < 1 or self.window < 1:
            raise ConfigError("skip and window must both be >= 1")


@dataclass
class ImageTensor:
    """A [C, n, n] image plus the pixel-validity mask shared across channels."""

    pixels: np.ndarray
    valid_mask: np.ndarray
    effective_length: int
    source_length: int
    dataset_id: str = ""
    channel_mask: np.ndarray = field(default=None)  # optional per-channel validity

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]


def padded_length(T: int, cfg: EmbedConfig) -> int:
    """Smallest L' >= max(T, n) with (L' - n) divisible by m."""
    m, n = cfg.skip, cfg.window
    overhang = max(0, T - n)
    return n + m * -(-overhang // m)


def _num_columns(T: int, cfg: EmbedConfig) -> int:
    return (padded_length(T, cfg) - cfg.window) // cfg.skip + 1


def delay_embed(series: TimeSeries, cfg: EmbedConfig = EmbedConfig()) -> ImageTensor:
    """Unroll a series into a per-channel n x n trajectory image.

    Column i (0-based) holds steps i*m .. i*m+n-1 (0-based) of the series,
    zero-padded in time up to L'. Columns beyond the q real ones, and pixels
    that map to padded time steps, are zeroed and marked invalid.
    """
    m, n = cfg.skip, cfg.window
    T, d = series.length, series.channels
    q = _num_columns(T, cfg)
    if q > n:
        raise ConfigError(
            f"series of length {T} needs {q} columns but the canvas has only "
            f"{n} (increase skip or window)"
        )
    L = padded_length(T, cfg)

    padded = np.zeros((L, d), dtype=series.values.dtype)
    padded[:T] = series.values
    # column i, row r encodes time step i*m + r
    steps = np.arange(q)[None, :] * m + np.arange(n)[:, None]  # [n, q]
    img = np.zeros((d, n, n), dtype=series.values.dtype)
    img[:, :, :q] = padded[steps, :].transpose(2, 0, 1)

    mask = build_mask(T, d, cfg)
    img *= mask  # padded time steps inside real columns carry zeros already
    return ImageTensor(
        pixels=img,
        valid_mask=mask,
        effective_length=L,
        source_length=T,
        dataset_id=series.dataset_id,
    )


def build_mask(T: int, d: int, cfg: EmbedConfig = EmbedConfig()) -> np.ndarray:
    """Boolean [n, n] mask, true exactly at pixels encoding steps 1..T."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if d < 1:
        raise ConfigError("d must be >= 1")
    m, n = cfg.skip, cfg.window
    q = _num_columns(T, cfg)
    if q > n:
        raise ConfigError(
            f"series of length {T} needs {q} columns but the canvas has only {n}"
        )
    steps = np.arange(n)[None, :] * m + np.arange(n)[:, None]  # [n, n]
    mask = (np.arange(n)[None, :] < q) & (steps < T)
    return mask


def inverse_delay_embed(
    img: ImageTensor, cfg: EmbedConfig = EmbedConfig(), T: int = None
) -> TimeSeries:
    """Map an image back to its first T time steps.

    Overlapping windows (m < n) contribute the arithmetic mean of every pixel
    encoding a step; for m >= n the map is a direct un-stacking.
    """
    m, n = cfg.skip, cfg.window
    pixels = np.asarray(img.pixels)
    if pixels.ndim != 3 or pixels.shape[1] != pixels.shape[2]:
        raise ShapeError(f"expected square [C, n, n] pixels, got {pixels.shape}")
    if pixels.shape[1] != n:
        raise ShapeError(
            f"image side {pixels.shape[1]} does not match window {n}"
        )
    if T is None:
        T = img.source_length
    L = img.effective_length
    if T > L:
        raise ConfigError(f"requested length {T} exceeds encoded length {L}")
    q = (L - n) // m + 1

    d = pixels.shape[0]
    total = np.zeros((T, d), dtype=pixels.dtype)
    count = np.zeros(T, dtype=np.int64)
    for col in range(q):
        start = col * m
        stop = min(start + n, T)
        if stop <= start:
            break
        rows = stop - start
        total[start:stop] += pixels[:, :rows, col].T
        count[start:stop] += 1
    values = total / np.maximum(count, 1)[:, None]
    return TimeSeries(values=values, dataset_id=img.dataset_id)
