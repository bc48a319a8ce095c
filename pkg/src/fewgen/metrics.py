"""Generation-quality metrics: Discriminative Score, Predictive Score, context-FID.

The first two follow the post-hoc LSTM protocol (train a small net on one set,
test on the other); context-FID compares Gaussian fits of embeddings from a
causal dilated-convolution encoder trained contrastively on the real corpus.
Network capacities are fixed, recorded constants so scores are comparable
across runs of this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InsufficientDataError, NumericalError, ShapeMismatchError
from .ts2img import TimeSeries


@dataclass(frozen=True)
class EvalProtocol:
    num_generated: int = None      # None -> size of the real test set
    classifier_hidden: int = None  # None -> ceil(d*T/8) clamped to [8, 64]
    classifier_epochs: int = 200
    predictor_hidden: int = None
    predictor_epochs: int = 200
    encoder_dim: int = 16
    encoder_hidden: int = 64
    encoder_epochs: int = 60
    batch_size: int = 128
    seeds: tuple = (0, 1, 2)


@dataclass(frozen=True)
class MetricScore:
    mean: float
    std: float

    def __float__(self):
        return float(self.mean)


def _default_hidden(d: int, T: int) -> int:
    return min(64, max(8, math.ceil(d * T / 8)))


def _stack(series: list[TimeSeries]) -> torch.Tensor:
    if not series:
        raise ShapeMismatchError("empty series list")
    shapes = {s.values.shape for s in series}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"series shapes differ: {sorted(shapes)}")
    return torch.as_tensor(np.stack([s.values for s in series]),
                           dtype=torch.float32)


def _paired(real, fake):
    xr, xf = _stack(real), _stack(fake)
    if xr.shape[1:] != xf.shape[1:]:
        raise ShapeMismatchError(
            f"real {tuple(xr.shape[1:])} vs fake {tuple(xf.shape[1:])}")
    return xr, xf


class _LSTMClassifier(nn.Module):
    def __init__(self, d, hidden):
        super().__init__()
        self.lstm = nn.LSTM(d, hidden, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x):
        out, _ = self.lstm(x)
        return self.head(out[:, -1]).squeeze(-1)


class _LSTMPredictor(nn.Module):
    def __init__(self, d, hidden):
        super().__init__()
        self.lstm = nn.LSTM(d, hidden, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x):
        out, _ = self.lstm(x)
        return self.head(out).squeeze(-1)


def _minibatches(rng, n, batch_size):
    order = rng.permutation(n)
    for at in range(0, n, batch_size):
        yield order[at:at + batch_size]


def discriminative_score(real: list[TimeSeries], fake: list[TimeSeries],
                         protocol: EvalProtocol = EvalProtocol(),
                         rng: np.random.Generator = None) -> MetricScore:
    """|0.5 - held-out error| of a real-vs-fake LSTM classifier, over seeds.

    0 means the sets are indistinguishable to the classifier; 0.5 means
    perfectly separable.
    """
    rng = rng or np.random.default_rng(0)
    xr, xf = _paired(real, fake)
    T, d = xr.shape[1], xr.shape[2]
    hidden = protocol.classifier_hidden or _default_hidden(d, T)
    scores = []
    for seed in protocol.seeds:
        torch.manual_seed(seed)
        net = _LSTMClassifier(d, hidden)
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        perm_r, perm_f = rng.permutation(len(xr)), rng.permutation(len(xf))
        cut_r, cut_f = int(0.8 * len(xr)), int(0.8 * len(xf))
        x_train = torch.cat([xr[perm_r[:cut_r]], xf[perm_f[:cut_f]]])
        y_train = torch.cat([torch.ones(cut_r), torch.zeros(cut_f)])
        x_test = torch.cat([xr[perm_r[cut_r:]], xf[perm_f[cut_f:]]])
        y_test = torch.cat([torch.ones(len(xr) - cut_r),
                            torch.zeros(len(xf) - cut_f)])
        net.train()
        for _ in range(protocol.classifier_epochs):
            for idx in _minibatches(rng, len(x_train), protocol.batch_size):
                opt.zero_grad()
                loss = F.binary_cross_entropy_with_logits(
                    net(x_train[idx]), y_train[idx])
                loss.backward()
                opt.step()
        net.eval()
        with torch.no_grad():
            err = ((net(x_test) > 0).float() != y_test).float().mean().item()
        scores.append(abs(0.5 - err))
    return MetricScore(float(np.mean(scores)), float(np.std(scores)))


def predictive_score(real: list[TimeSeries], fake: list[TimeSeries],
                     protocol: EvalProtocol = EvalProtocol(),
                     rng: np.random.Generator = None) -> MetricScore:
    """Train-on-synthetic test-on-real next-step MAE.

    The predictor sees all channels of steps 1..T-1 and forecasts the last
    channel's next value; low MAE on the real set means the synthetic data
    carries usable temporal structure.
    """
    rng = rng or np.random.default_rng(0)
    xr, xf = _paired(real, fake)
    T, d = xr.shape[1], xr.shape[2]
    if T < 2:
        raise ShapeMismatchError("predictive score needs T >= 2")
    hidden = protocol.predictor_hidden or _default_hidden(d, T)
    scores = []
    for seed in protocol.seeds:
        torch.manual_seed(seed)
        net = _LSTMPredictor(d, hidden)
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        net.train()
        for _ in range(protocol.predictor_epochs):
            for idx in _minibatches(rng, len(xf), protocol.batch_size):
                opt.zero_grad()
                pred = net(xf[idx][:, :-1, :])
                loss = F.l1_loss(pred, xf[idx][:, 1:, -1])
                loss.backward()
                opt.step()
        net.eval()
        with torch.no_grad():
            mae = F.l1_loss(net(xr[:, :-1, :]), xr[:, 1:, -1]).item()
        scores.append(mae)
    return MetricScore(float(np.mean(scores)), float(np.std(scores)))


class ContrastiveEncoder(nn.Module):
    """Causal dilated-conv encoder; embeddings are L2-normalized."""

    def __init__(self, channels: int, hidden: int = 32, dim: int = 16,
                 depth: int = 3, kernel_size: int = 3):
        super().__init__()
        self.convs = nn.ModuleList()
        self.pads = []
        c = channels
        for i in range(depth):
            dilation = 2**i
            self.pads.append((kernel_size - 1) * dilation)
            self.convs.append(nn.Conv1d(c, hidden, kernel_size, dilation=dilation))
            c = hidden
        self.head = nn.Linear(hidden, dim)

    def forward(self, x):  # [B, T, d] -> [B, dim]
        h = x.transpose(1, 2)
        for pad, conv in zip(self.pads, self.convs):
            h = F.gelu(conv(F.pad(h, (pad, 0))))
        z = self.head(h.max(dim=-1).values)
        return F.normalize(z, dim=-1)


def train_contrastive_encoder(corpus: list[TimeSeries],
                              protocol: EvalProtocol = EvalProtocol(),
                              rng: np.random.Generator = None) -> ContrastiveEncoder:
    """Triplet training: positives are sub-windows of the anchor, negatives are
    sub-windows of other series. Cosine margin 0.5."""
    rng = rng or np.random.default_rng(0)
    if len(corpus) < 16:
        raise InsufficientDataError(
            f"contrastive encoder needs >= 16 series, got {len(corpus)}")
    x = _stack(corpus)
    n, T, d = x.shape
    torch.manual_seed(int(rng.integers(2**31)))
    enc = ContrastiveEncoder(d, hidden=protocol.encoder_hidden,
                             dim=protocol.encoder_dim)
    opt = torch.optim.Adam(enc.parameters(), lr=1e-3)
    margin = 0.5
    enc.train()
    for _ in range(protocol.encoder_epochs):
        for idx in _minibatches(rng, n, min(64, n)):
            w = int(rng.integers(max(2, T // 2), T + 1))
            starts_p = rng.integers(0, T - w + 1, size=len(idx))
            starts_n = rng.integers(0, T - w + 1, size=len(idx))
            neg = (idx + 1 + rng.integers(0, n - 1, size=len(idx))) % n
            pos_w = torch.stack([x[i, s:s + w] for i, s in zip(idx, starts_p)])
            neg_w = torch.stack([x[j, s:s + w] for j, s in zip(neg, starts_n)])
            za, zp, zn = enc(x[idx]), enc(pos_w), enc(neg_w)
            d_ap = 1.0 - (za * zp).sum(-1)
            d_an = 1.0 - (za * zn).sum(-1)
            loss = F.relu(margin + d_ap - d_an).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    enc.eval()
    return enc


def contrastive_embed(corpus: list[TimeSeries],
                      protocol: EvalProtocol = EvalProtocol(),
                      rng: np.random.Generator = None,
                      encoder: ContrastiveEncoder = None) -> np.ndarray:
    """Embed a set of series; trains an encoder on `corpus` when none is given."""
    if encoder is None:
        encoder = train_contrastive_encoder(corpus, protocol, rng)
    x = _stack(corpus)
    encoder.eval()
    with torch.no_grad():
        out = [encoder(x[at:at + 256]) for at in range(0, len(x), 256)]
    return torch.cat(out).numpy().astype(np.float64)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) via eigen square roots."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    a = _sqrtm_psd(sigma1)
    inner = a @ sigma2 @ a
    sq = _sqrtm_psd((inner + inner.T) / 2.0)
    residual = np.linalg.norm(sq @ sq - inner)
    scale = max(np.linalg.norm(inner), 1.0)
    if residual / scale > 1e-6:
        raise NumericalError(
            f"matrix square root residual {residual / scale:.3e} exceeds 1e-6")
    value = float(np.sum((mu1 - mu2) ** 2)
                  + np.trace(sigma1 + sigma2) - 2.0 * np.trace(sq))
    return max(value, 0.0)


def _gaussian_fit(emb: np.ndarray, jitter: float = 1e-6):
    mu = emb.mean(axis=0)
    cov = np.cov(emb, rowvar=False)
    cov = np.atleast_2d(cov) + jitter * np.eye(emb.shape[1])
    return mu, cov


def context_fid(real: list[TimeSeries], fake: list[TimeSeries],
                protocol: EvalProtocol = EvalProtocol(),
                rng: np.random.Generator = None,
                encoder: ContrastiveEncoder = None) -> float:
    """Frechet distance between embedding Gaussians of real and generated sets."""
    rng = rng or np.random.default_rng(0)
    if encoder is None:
        encoder = train_contrastive_encoder(real, protocol, rng)
    er = contrastive_embed(real, protocol, rng, encoder)
    ef = contrastive_embed(fake, protocol, rng, encoder)
    return frechet_distance(*_gaussian_fit(er), *_gaussian_fit(ef))
