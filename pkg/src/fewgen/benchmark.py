"""Few-shot benchmark protocol over (model, dataset, subset) cells.

Each cell fine-tunes a pre-trained checkpoint (or trains an identically-sized
model from scratch when no checkpoint is given), generates as many series as
the held-out test set, and scores them with all three metrics. Failures are
recorded per cell and the run continues.
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointData, load_checkpoint
from .config import derive_seed
from .data import DatasetSpec, SubsetSpec, load_dataset
from .denoiser import ModelConfig
from .diffusion import DiffusionConfig, sample_batch
from .metrics import (EvalProtocol, context_fid, discriminative_score,
                      predictive_score, train_contrastive_encoder)
from .trainer import TrainConfig, finetune, train_from_scratch
from .ts2img import EmbedConfig

RESULT_COLUMNS = ["model", "dataset", "subset", "disc", "disc_std",
                  "pred", "pred_std", "cfid"]


def _adapted_checkpoint(base: CheckpointData | None, spec: DatasetSpec,
                        train_series, subset: SubsetSpec, model_cfg: ModelConfig,
                        train_cfg: TrainConfig, diff_cfg, embed_cfg):
    """Fine-tune from a checkpoint, or train from scratch when base is None."""
    if base is None:
        ckpt = train_from_scratch(spec.name, train_series, subset, model_cfg,
                                  train_cfg, diff_cfg, embed_cfg)
        return ckpt, ckpt.token_registry[spec.name]
    token_name = spec.name
    if token_name in base.token_registry:
        token_name = f"{spec.name}+ft"  # already seen in pre-training: new token
    ckpt = finetune(base, train_series, subset, train_cfg, token_name,
                    diff_cfg, embed_cfg)
    return ckpt, ckpt.token_registry[token_name]


def run_benchmark(model_checkpoints: dict, datasets: list[DatasetSpec],
                  subsets: list[SubsetSpec], protocol: EvalProtocol,
                  *, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  diff_cfg: DiffusionConfig = DiffusionConfig(),
                  embed_cfg: EmbedConfig = EmbedConfig(),
                  root_seed: int = 0, use_ema: bool = True, out_dir=None):
    """Run every (model, dataset, subset) cell; returns (rows, failures).

    `model_checkpoints` maps model name -> checkpoint path/CheckpointData/None
    (None = from-scratch baseline). When out_dir is given, writes results.csv
    and a JSON summary there.
    """
    bases = {}
    for name, src in model_checkpoints.items():
        if src is None or isinstance(src, CheckpointData):
            bases[name] = src
        else:
            bases[name] = load_checkpoint(src)

    rows, failures = [], []
    encoders = {}
    for spec in datasets if subsets else []:
        train_series, test_series = load_dataset(spec)
        enc_rng = np.random.default_rng(derive_seed(root_seed, "encoder", spec.name))
        try:
            encoders[spec.name] = train_contrastive_encoder(
                test_series, protocol, enc_rng)
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            encoders[spec.name] = None
            failures.append({"dataset": spec.name, "stage": "encoder",
                             "error": f"{type(exc).__name__}: {exc}"})
        for subset in subsets:
            for model_name, base in bases.items():
                cell = {"model": model_name, "dataset": spec.name,
                        "subset": subset.label()}
                cell_seed = derive_seed(root_seed, "cell", model_name, spec.name,
                                        subset.label())
                try:
                    cell_train = replace(train_cfg, seed=cell_seed)
                    ckpt, token = _adapted_checkpoint(
                        base, spec, train_series, subset, model_cfg,
                        cell_train, diff_cfg, embed_cfg)
                    model = ckpt.build_model(ema=use_ema)
                    num = protocol.num_generated or len(test_series)
                    fake = sample_batch(
                        model, token, spec.channels, spec.window_length, num,
                        np.random.default_rng(derive_seed(cell_seed, "sample")),
                        diff_cfg, embed_cfg, dataset_id=spec.name)
                    rng = np.random.default_rng(derive_seed(cell_seed, "metrics"))
                    disc = discriminative_score(test_series, fake, protocol, rng)
                    pred = predictive_score(test_series, fake, protocol, rng)
                    cfid = context_fid(test_series, fake, protocol, rng,
                                       encoder=encoders[spec.name])
                    rows.append({**cell,
                                 "disc": disc.mean, "disc_std": disc.std,
                                 "pred": pred.mean, "pred_std": pred.std,
                                 "cfid": cfid})
                except Exception as exc:  # noqa: BLE001 - recorded, run continues
                    failures.append(
                        {**cell, "stage": "cell",
                         "error": f"{type(exc).__name__}: {exc}"})
    if out_dir is not None:
        write_results(Path(out_dir), rows, failures)
    return rows, failures


def write_results(out_dir: Path, rows, failures):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in row.items()})
    summary = {"rows": rows, "failures": failures}
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return out_dir / "results.csv"
