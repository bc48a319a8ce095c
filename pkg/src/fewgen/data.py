"""Dataset registry, CSV ingestion, synthetic generators, and subsampling.

Every dataset is described by a DatasetSpec (from a JSON manifest or built in
code) and loaded into (train, test) lists of fixed-length TimeSeries windows.
Normalization statistics are always computed on the train split only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientDataError, ParseError
from .ts2img import TimeSeries


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    channels: int
    window_length: int = 24
    csv_path: str = None
    generator: str = None           # reserved names: "sine", "ar1"
    generator_params: dict = field(default_factory=dict)
    normalization: str = "minmax"   # "minmax" | "zscore"
    split_fractions: tuple = (0.8, 0.2)
    windowing: str = None           # "sliding" | "per_instance"; default by source

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.window_length < 2:
            raise ConfigError("window_length must be >= 2")
        if (self.csv_path is None) == (self.generator is None):
            raise ConfigError(
                f"dataset {self.name!r} needs exactly one of csv_path/generator")
        if self.normalization not in ("minmax", "zscore"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")


@dataclass(frozen=True)
class SubsetSpec:
    """Few-shot subsampling protocol: a percentage, a fixed count, or everything."""

    mode: str  # "percentage" | "fixed_count" | "full"
    value: float = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("percentage", "fixed_count", "full"):
            raise ConfigError(f"unknown subset mode {self.mode!r}")
        if self.mode == "percentage" and not (0 < self.value <= 1):
            raise ConfigError("percentage must lie in (0, 1]")
        if self.mode == "fixed_count" and (self.value is None or int(self.value) < 1):
            raise ConfigError("fixed_count needs a positive integer value")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SubsetSpec":
        """Parse the CLI syntax "pct:0.05" | "count:25" | "full"."""
        if text == "full":
            return cls("full", seed=seed)
        kind, _, value = text.partition(":")
        if kind == "pct":
            return cls("percentage", float(value), seed)
        if kind == "count":
            return cls("fixed_count", int(value), seed)
        raise ConfigError(f"cannot parse subset spec {text!r}")

    def label(self) -> str:
        if self.mode == "full":
            return "100%"
        if self.mode == "percentage":
            return f"{self.value * 100:g}%"
        return f"#{int(self.value)}"


def generate_sine(num_samples: int, length: int, channels: int = 6,
                  rng: np.random.Generator = None,
                  freq_range=(0.0, 0.1), phase_range=(0.0, 0.1),
                  dataset_id: str = "sine") -> list[TimeSeries]:
    """Multivariate sine corpus: x_t = sin(eta * t + theta), values in [0, 1].

    eta and theta are drawn independently per sample and channel from uniform
    ranges (defaults U[0, 0.1]); the raw sines in [-1, 1] are rescaled to [0, 1].
    """
    if num_samples < 1:
        raise ConfigError("num_samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    eta, theta = draw_sine_params(rng, num_samples, channels, freq_range, phase_range)
    t = np.arange(1, length + 1, dtype=np.float64)
    raw = np.sin(eta[..., None] * t + theta[..., None])  # [N, d, T]
    raw = (raw + 1.0) / 2.0
    return [TimeSeries(values=raw[i].T, dataset_id=dataset_id)
            for i in range(num_samples)]


def draw_sine_params(rng: np.random.Generator, num_samples: int, channels: int,
                     freq_range=(0.0, 0.1), phase_range=(0.0, 0.1)):
    eta = rng.uniform(freq_range[0], freq_range[1], size=(num_samples, channels))
    theta = rng.uniform(phase_range[0], phase_range[1], size=(num_samples, channels))
    return eta, theta


def generate_ar1(num_samples: int, length: int, channels: int = 1,
                 rng: np.random.Generator = None, coef: float = 0.9,
                 noise_std: float = 0.3, dataset_id: str = "ar1") -> list[TimeSeries]:
    """Stationary AR(1) corpus: x_t = coef * x_{t-1} + N(0, noise_std^2)."""
    if num_samples < 1:
        raise ConfigError("num_samples must be >= 1")
    if not (-1 < coef < 1):
        raise ConfigError("AR(1) coefficient must satisfy |coef| < 1")
    rng = rng or np.random.default_rng(0)
    x = np.empty((num_samples, length, channels))
    x[:, 0] = rng.normal(0.0, noise_std / np.sqrt(1 - coef**2),
                         size=(num_samples, channels))
    for t in range(1, length):
        x[:, t] = coef * x[:, t - 1] + rng.normal(
            0.0, noise_std, size=(num_samples, channels))
    return [TimeSeries(values=x[i], dataset_id=dataset_id)
            for i in range(num_samples)]


_GENERATORS = {"sine": generate_sine, "ar1": generate_ar1}


def _read_csv(path, expected_channels: int) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ParseError(f"{path}: empty file")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ParseError(
                        f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    data = np.asarray(rows, dtype=np.float64)
    if data.size and not np.isfinite(data).all():
        raise ParseError(f"{path}: missing or non-finite values are rejected")
    if data.ndim != 2 or data.shape[1] != expected_channels:
        raise ParseError(
            f"{path}: expected {expected_channels} channels, got "
            f"{data.shape[1] if data.ndim == 2 else 'malformed rows'}")
    return data


def _fit_normalizer(train_values: np.ndarray, kind: str):
    """Per-channel affine normalizer fitted on train data only."""
    if kind == "minmax":
        lo = train_values.min(axis=0)
        hi = train_values.max(axis=0)
        span = hi - lo
        span[span == 0] = 1.0  # constant channels map to 0
        return lo, span
    mean = train_values.mean(axis=0)
    std = train_values.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def load_dataset(spec: DatasetSpec, rng: np.random.Generator = None):
    """Load, window, split, and normalize one dataset.

    Returns (train, test) lists of TimeSeries. Long CSV series are windowed
    with stride 1 and split chronologically; generator corpora are
    per-instance. Normalization statistics come from the train split alone.
    """
    T = spec.window_length
    if spec.generator is not None:
        if spec.generator not in _GENERATORS:
            raise ConfigError(f"unknown generator {spec.generator!r}")
        params = dict(spec.generator_params)
        num = int(params.pop("num_samples", 1000))
        seed = int(params.pop("seed", 0))
        gen_rng = rng or np.random.default_rng(seed)
        series = _GENERATORS[spec.generator](
            num, T, channels=spec.channels, rng=gen_rng,
            dataset_id=spec.name, **params)
        windows = np.stack([s.values for s in series])
    else:
        data = _read_csv(spec.csv_path, spec.channels)
        if data.shape[0] < T:
            raise InsufficientDataError(
                f"{spec.name}: {data.shape[0]} rows < window length {T}")
        if (spec.windowing or "sliding") == "sliding":
            idx = np.arange(data.shape[0] - T + 1)
            windows = np.stack([data[i:i + T] for i in idx])
        else:
            if data.shape[0] % T:
                raise ConfigError(
                    f"{spec.name}: per-instance windowing needs row count "
                    f"divisible by {T}")
            windows = data.reshape(-1, T, spec.channels)

    if windows.shape[0] < 1:
        raise InsufficientDataError(f"{spec.name}: no complete window")
    n_train = int(round(spec.split_fractions[0] * windows.shape[0]))
    n_train = min(max(n_train, 1), windows.shape[0])
    train_w, test_w = windows[:n_train], windows[n_train:]

    shift, scale = _fit_normalizer(train_w.reshape(-1, spec.channels),
                                   spec.normalization)
    normalize = lambda w: (w - shift) / scale
    train = [TimeSeries(values=normalize(w), dataset_id=spec.name) for w in train_w]
    test = [TimeSeries(values=normalize(w), dataset_id=spec.name) for w in test_w]
    return train, test


def subsample(train: list[TimeSeries], spec: SubsetSpec) -> list[TimeSeries]:
    """Uniform selection without replacement under spec.seed; test is untouched."""
    n = len(train)
    if spec.mode == "full":
        return list(train)
    if spec.mode == "percentage":
        k = max(1, int(round(spec.value * n)))
    else:
        k = int(spec.value)
        if k > n:
            raise ConfigError(f"fixed_count {k} exceeds train size {n}")
    rng = np.random.default_rng(spec.seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [train[i] for i in idx]


def load_manifest(entries) -> dict[str, DatasetSpec]:
    """Build the dataset registry from manifest entries (dicts or a JSON path)."""
    if isinstance(entries, (str, Path)):
        try:
            entries = json.loads(Path(entries).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read manifest: {exc}") from exc
    registry = {}
    for entry in entries:
        entry = dict(entry)
        if "split_fractions" in entry:
            entry["split_fractions"] = tuple(entry["split_fractions"])
        spec = DatasetSpec(**entry)
        if spec.name in registry:
            raise ConfigError(f"duplicate dataset name {spec.name!r}")
        registry[spec.name] = spec
    return registry
