"""Multi-domain pre-training and few-shot fine-tuning loops.

The corpus is delay-embedded once up front; every step then samples a mixed
batch across datasets (proportional to dataset size by default), draws a
log-normal noise level per element, and minimizes the masked preconditioned
denoising loss with AdamW. An EMA shadow of the parameters is maintained
after every step and stored in the checkpoint next to the raw weights.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .checkpoint import CheckpointData, ema_swap  # noqa: F401  (re-exported)
from .data import SubsetSpec, subsample
from .denoiser import DenoiserUNet, ModelConfig
from .diffusion import DiffusionConfig, denoising_loss_given_noise, sample_sigma
from .errors import ConfigError, TokenCollisionError, TrainingDivergedError
from .ts2img import EmbedConfig, delay_embed


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    ema_decay: float = 0.9999
    epochs: int = 1000
    batch_size: int = 2048
    seed: int = 0
    mixing: str = "proportional"  # "proportional" | "uniform"
    grad_clip: float = 1.0

    def __post_init__(self):
        if not (0 <= self.ema_decay < 1):
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.mixing not in ("proportional", "uniform"):
            raise ConfigError(f"unknown mixing mode {self.mixing!r}")


def build_model(model_cfg: ModelConfig, dataset_names, seed: int):
    """Seeded model construction plus a token registry for the given datasets."""
    torch.manual_seed(seed)
    registry = {name: i + 1 for i, name in enumerate(dataset_names)}
    model = DenoiserUNet(model_cfg, num_tokens=len(registry))
    return model, registry


@dataclass
class _ArrayDataset:
    name: str
    token_id: int
    x0: torch.Tensor    # [N, d, n, n]
    mask: torch.Tensor  # [N, 1, n, n]

    def __len__(self):
        return self.x0.shape[0]


def _embed_corpus(corpus, registry, embed_cfg, dtype):
    datasets = []
    for name in sorted(corpus, key=lambda n: registry[n]):
        series = corpus[name]
        if not series:
            raise ConfigError(f"dataset {name!r} is empty")
        imgs = [delay_embed(s, embed_cfg) for s in series]
        x0 = torch.as_tensor(np.stack([im.pixels for im in imgs]), dtype=dtype)
        mask = torch.as_tensor(
            np.stack([im.valid_mask[None] for im in imgs]), dtype=dtype)
        datasets.append(_ArrayDataset(name, registry[name], x0, mask))
    return datasets


class _MetricsLog:
    """Line-oriented CSV training log: step, loss, lr, sigma-mean."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="") if path else None
        if self.fh:
            self.writer = csv.writer(self.fh)
            self.writer.writerow(["step", "loss", "lr", "sigma_mean"])

    def write(self, step, loss, lr, sigma_mean):
        if self.fh:
            self.writer.writerow([step, repr(float(loss)), repr(float(lr)),
                                  repr(float(sigma_mean))])

    def close(self):
        if self.fh:
            self.fh.close()


def _ema_init(model):
    return {k: p.detach().clone() for k, p in model.named_parameters()}


def _ema_update(ema, model, decay):
    with torch.no_grad():
        for k, p in model.named_parameters():
            ema[k].mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def _batches(rng, datasets, batch_size, mixing):
    """Yield one epoch of batches as lists of (dataset_index, row) pairs."""
    sizes = [len(d) for d in datasets]
    pool = [(i, r) for i, size in enumerate(sizes) for r in range(size)]
    total = len(pool)
    if mixing == "proportional":
        order = rng.permutation(total)
        for at in range(0, total, batch_size):
            yield [pool[j] for j in order[at:at + batch_size]]
    else:
        for _ in range(-(-total // batch_size)):
            ds = rng.integers(len(datasets), size=min(batch_size, total))
            yield [(int(i), int(rng.integers(sizes[i]))) for i in ds]


def _train_loop(model, datasets, train_cfg: TrainConfig, diff_cfg: DiffusionConfig,
                log_path=None):
    rng = np.random.default_rng(train_cfg.seed)
    # token rows are excluded from weight decay so tokens absent from every
    # batch stay bitwise untouched
    decayed = [p for n, p in model.named_parameters() if n != "token_table"]
    tokens = [p for n, p in model.named_parameters() if n == "token_table"]
    opt = torch.optim.AdamW(
        [{"params": decayed, "weight_decay": train_cfg.weight_decay},
         {"params": tokens, "weight_decay": 0.0}],
        lr=train_cfg.learning_rate)
    ema = _ema_init(model)
    log = _MetricsLog(log_path)
    dtype = next(model.parameters()).dtype
    model.train()
    step = 0
    try:
        for _ in range(train_cfg.epochs):
            for batch in _batches(rng, datasets, train_cfg.batch_size,
                                  train_cfg.mixing):
                groups: dict[int, list[int]] = {}
                for ds_idx, row in batch:
                    groups.setdefault(ds_idx, []).append(row)
                opt.zero_grad(set_to_none=True)
                total = None
                sigma_sum, n_total = 0.0, 0
                for ds_idx in sorted(groups):
                    ds = datasets[ds_idx]
                    rows = groups[ds_idx]
                    x0 = ds.x0[rows]
                    mask = ds.mask[rows]
                    sigma_np = sample_sigma(rng, diff_cfg, size=len(rows))
                    sigma = torch.as_tensor(sigma_np, dtype=dtype)
                    eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)),
                                          dtype=dtype) * sigma.view(-1, 1, 1, 1)
                    token_ids = torch.full((len(rows),), ds.token_id,
                                           dtype=torch.int64)
                    losses = denoising_loss_given_noise(
                        model, token_ids, x0, mask, sigma, eps, diff_cfg)
                    part = losses.sum()
                    total = part if total is None else total + part
                    sigma_sum += float(sigma_np.sum())
                    n_total += len(rows)
                loss = total / n_total
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()!r} at step {step}")
                loss.backward()
                if train_cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(),
                                                   train_cfg.grad_clip)
                opt.step()
                _ema_update(ema, model, train_cfg.ema_decay)
                log.write(step, loss.item(), train_cfg.learning_rate,
                          sigma_sum / n_total)
                step += 1
    finally:
        log.close()
    return ema


def _snapshot(model, registry, ema, train_cfg, diff_cfg, embed_cfg) -> CheckpointData:
    return CheckpointData(
        model_config=model.cfg,
        token_registry=dict(registry),
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        ema_state={k: v.clone() for k, v in ema.items()},
        extra={
            "train": asdict(train_cfg),
            "diffusion": asdict(diff_cfg),
            "embed": asdict(embed_cfg),
        },
    )


def pretrain(corpus: dict, model: DenoiserUNet, registry: dict,
             train_cfg: TrainConfig, diff_cfg: DiffusionConfig = DiffusionConfig(),
             embed_cfg: EmbedConfig = EmbedConfig(),
             log_path=None) -> CheckpointData:
    """Unified pre-training across a heterogeneous corpus of datasets.

    `corpus` maps dataset name -> list of TimeSeries; every name must be
    registered in `registry` (see build_model). Returns a checkpoint holding
    both raw and EMA parameters.
    """
    if not corpus:
        raise ConfigError("corpus is empty")
    missing = set(corpus) - set(registry)
    if missing:
        raise ConfigError(f"datasets without tokens: {sorted(missing)}")
    datasets = _embed_corpus(corpus, registry, embed_cfg,
                             next(model.parameters()).dtype)
    ema = _train_loop(model, datasets, train_cfg, diff_cfg, log_path)
    return _snapshot(model, registry, ema, train_cfg, diff_cfg, embed_cfg)


def finetune(ckpt: CheckpointData, new_train: list, subset: SubsetSpec,
             train_cfg: TrainConfig, dataset_name: str,
             diff_cfg: DiffusionConfig = None, embed_cfg: EmbedConfig = None,
             log_path=None) -> CheckpointData:
    """Few-shot adaptation: new random token row, full fine-tuning on a subset.

    The effective batch is min(batch_size, N). The EMA shadow restarts from
    the loaded weights so short runs still produce a meaningful average.
    """
    if dataset_name in ckpt.token_registry:
        raise TokenCollisionError(f"dataset {dataset_name!r} already registered")
    diff_cfg = diff_cfg or DiffusionConfig(**ckpt.extra.get("diffusion", {}))
    embed_cfg = embed_cfg or EmbedConfig(**ckpt.extra.get("embed", {}))
    torch.manual_seed(train_cfg.seed)
    model = ckpt.build_model(ema=False)
    new_id = model.add_token()
    registry = {**ckpt.token_registry, dataset_name: new_id}

    chosen = subsample(new_train, subset)
    effective = replace(train_cfg, batch_size=min(train_cfg.batch_size, len(chosen)))
    datasets = _embed_corpus({dataset_name: chosen}, registry, embed_cfg,
                             next(model.parameters()).dtype)
    ema = _train_loop(model, datasets, effective, diff_cfg, log_path)
    return _snapshot(model, registry, ema, effective, diff_cfg, embed_cfg)


def train_from_scratch(dataset_name: str, train_series: list, subset: SubsetSpec,
                       model_cfg: ModelConfig, train_cfg: TrainConfig,
                       diff_cfg: DiffusionConfig = DiffusionConfig(),
                       embed_cfg: EmbedConfig = EmbedConfig(),
                       log_path=None) -> CheckpointData:
    """Baseline: same architecture and subset, no pre-trained initialization."""
    model, registry = build_model(model_cfg, [dataset_name], train_cfg.seed)
    chosen = subsample(train_series, subset)
    effective = replace(train_cfg, batch_size=min(train_cfg.batch_size, len(chosen)))
    return pretrain({dataset_name: chosen}, model, registry, effective,
                    diff_cfg, embed_cfg, log_path)
