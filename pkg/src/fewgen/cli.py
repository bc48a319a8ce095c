"""Command-line entry point: pretrain, finetune, sample, evaluate, benchmark, profile.

Every run validates its JSON experiment config up front, derives all component
seeds from the single --seed flag, and writes its artifacts (checkpoints,
metrics CSVs, plots, resolved-config snapshot) under --output-dir
(default: $FEWGEN_OUTPUT_DIR or ./fewgen-out). Exit codes: 0 ok, 1 runtime
failure (structured JSON error on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmark as bench
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (apply_overrides, derive_seed, diffusion_config_from,
                     embed_config_from, eval_protocol_from, load_experiment,
                     model_config_from, subset_from, train_config_from)
from .data import load_dataset, load_manifest
from .denoiser import NULL_TOKEN
from .diffusion import sample_batch
from .dyconv import LayerSpec, flops_estimate
from .errors import ConfigError, FewgenError
from .metrics import context_fid, discriminative_score, predictive_score
from .plots import emit_plots
from .trainer import build_model, finetune, pretrain

DEFAULT_OUTPUT_DIR = "fewgen-out"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewgen",
        description="Few-shot time-series generation via delay-embedding diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=0, help="root seed")
        p.add_argument("--output-dir", default=None,
                       help="artifact directory (default: $FEWGEN_OUTPUT_DIR)")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="config override, repeatable")

    common(sub.add_parser("pretrain", help="multi-domain pre-training"))

    p = sub.add_parser("finetune", help="few-shot adaptation of a checkpoint")
    common(p)
    p.add_argument("--subset", default=None,
                   help='subset spec: "pct:0.05" | "count:25" | "full"')

    p = sub.add_parser("sample", help="generate series from a checkpoint")
    common(p)
    p.add_argument("--length", type=int, default=None, help="series length T")
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True,
                   help="sample with EMA weights (default) or raw weights")

    p = sub.add_parser("evaluate", help="score a checkpoint against a dataset")
    common(p)
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("benchmark", help="full few-shot benchmark grid")
    common(p)
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("profile", help="closed-form FLOP comparison of adapters")
    common(p, config_required=False)
    p.add_argument("--channels", default=None,
                   help="comma-separated pre-train max channel counts "
                        "(default 16,32,64,128)")
    return parser


def _out_dir(args) -> Path:
    root = args.output_dir or os.environ.get("FEWGEN_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot_config(out: Path, args, config: dict) -> None:
    snapshot = {
        "command": args.command,
        "seed": args.seed,
        "overrides": list(args.override),
        "config": config,
    }
    (out / "resolved_config.json").write_text(
        json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8")


def _load_for(args) -> dict:
    return load_experiment(args.config, args.override)


def _dataset_registry(config):
    return load_manifest(config.get("datasets", []))


def _cmd_pretrain(args) -> int:
    config = _load_for(args)
    out = _out_dir(args)
    _snapshot_config(out, args, config)
    specs = _dataset_registry(config)
    names = config.get("pretrain", {}).get("corpus") or list(specs)
    unknown = [n for n in names if n not in specs]
    if unknown:
        raise ConfigError(f"pretrain corpus references unknown datasets {unknown}")
    corpus = {name: load_dataset(specs[name])[0] for name in names}
    model_cfg = model_config_from(config.get("model"))
    model, registry = build_model(model_cfg, names,
                                  derive_seed(args.seed, "model-init"))
    train_section = {**(config.get("train") or {}),
                     **config.get("pretrain", {}).get("train", {})}
    ckpt = pretrain(
        corpus, model, registry,
        train_config_from(train_section, derive_seed(args.seed, "pretrain")),
        diffusion_config_from(config.get("diffusion")),
        embed_config_from(config.get("embed")),
        log_path=out / "train_log.csv")
    save_checkpoint(out / "pretrained.fgc", ckpt)
    print(f"wrote {out / 'pretrained.fgc'}")
    return 0


def _cmd_finetune(args) -> int:
    config = _load_for(args)
    out = _out_dir(args)
    _snapshot_config(out, args, config)
    section = config.get("finetune")
    if not section:
        raise ConfigError("config has no finetune section")
    specs = _dataset_registry(config)
    if section["dataset"] not in specs:
        raise ConfigError(f"unknown dataset {section['dataset']!r}")
    spec = specs[section["dataset"]]
    base = load_checkpoint(section["checkpoint"])
    subset = subset_from(args.subset or section.get("subset"),
                         derive_seed(args.seed, "subset"))
    train_series, _ = load_dataset(spec)
    ckpt = finetune(
        base, train_series, subset,
        train_config_from(config.get("train"), derive_seed(args.seed, "finetune")),
        section.get("token_name", spec.name),
        diffusion_config_from(config.get("diffusion")) if config.get("diffusion") else None,
        embed_config_from(config.get("embed")) if config.get("embed") else None,
        log_path=out / "train_log.csv")
    save_checkpoint(out / "finetuned.fgc", ckpt)
    print(f"wrote {out / 'finetuned.fgc'}")
    return 0


def _resolve_token(ckpt, section) -> int:
    if not section.get("conditional", True):
        return NULL_TOKEN
    name = section.get("token_name") or section.get("dataset")
    if name is None:
        raise ConfigError("conditional sampling needs a dataset/token_name")
    if name not in ckpt.token_registry:
        raise ConfigError(f"checkpoint has no token for {name!r}; "
                          f"known: {sorted(ckpt.token_registry)}")
    return ckpt.token_registry[name]


def _cmd_sample(args) -> int:
    config = _load_for(args)
    out = _out_dir(args)
    _snapshot_config(out, args, config)
    section = config.get("sample")
    if not section:
        raise ConfigError("config has no sample section")
    ckpt = load_checkpoint(section["checkpoint"])
    specs = _dataset_registry(config)
    spec = specs.get(section.get("dataset"))
    channels = section.get("channels") or (spec.channels if spec else None)
    length = args.length or section.get("length") or (
        spec.window_length if spec else None)
    if channels is None or length is None:
        raise ConfigError("sample needs channels and length "
                          "(from the dataset entry or explicit keys)")
    token = _resolve_token(ckpt, section)
    model = ckpt.build_model(ema=args.ema)
    series = sample_batch(
        model, token, channels, length, section.get("num_samples", 16),
        np.random.default_rng(derive_seed(args.seed, "sample")),
        diffusion_config_from(ckpt.extra.get("diffusion", {})),
        embed_config_from(ckpt.extra.get("embed", {})),
        dataset_id=section.get("dataset", ""))
    values = np.stack([s.values for s in series])
    np.savez(out / "samples.npz", values=values)
    meta = {"num_samples": int(values.shape[0]), "length": int(values.shape[1]),
            "channels": int(values.shape[2]), "ema": bool(args.ema),
            "token": int(token)}
    (out / "samples.json").write_text(json.dumps(meta, indent=2, sort_keys=True),
                                      encoding="utf-8")
    print(f"wrote {out / 'samples.npz'}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_for(args)
    out = _out_dir(args)
    _snapshot_config(out, args, config)
    section = config.get("evaluate")
    if not section:
        raise ConfigError("config has no evaluate section")
    specs = _dataset_registry(config)
    if section["dataset"] not in specs:
        raise ConfigError(f"unknown dataset {section['dataset']!r}")
    spec = specs[section["dataset"]]
    ckpt = load_checkpoint(section["checkpoint"])
    protocol = eval_protocol_from(config.get("eval"))
    _, test_series = load_dataset(spec)
    token = _resolve_token(ckpt, section)
    model = ckpt.build_model(ema=args.ema)
    num = protocol.num_generated or len(test_series)
    fake = sample_batch(
        model, token, spec.channels, spec.window_length, num,
        np.random.default_rng(derive_seed(args.seed, "sample")),
        diffusion_config_from(ckpt.extra.get("diffusion", {})),
        embed_config_from(ckpt.extra.get("embed", {})),
        dataset_id=spec.name)
    rng = np.random.default_rng(derive_seed(args.seed, "metrics"))
    disc = discriminative_score(test_series, fake, protocol, rng)
    pred = predictive_score(test_series, fake, protocol, rng)
    cfid = context_fid(test_series, fake, protocol, rng)
    report = {"dataset": spec.name, "conditional": section.get("conditional", True),
              "num_generated": num, "disc": disc.mean, "disc_std": disc.std,
              "pred": pred.mean, "pred_std": pred.std, "cfid": cfid}
    (out / "evaluation.json").write_text(
        json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_benchmark(args) -> int:
    config = _load_for(args)
    out = _out_dir(args)
    _snapshot_config(out, args, config)
    section = config.get("benchmark")
    if not section:
        raise ConfigError("config has no benchmark section")
    specs = _dataset_registry(config)
    datasets = []
    for name in section["datasets"]:
        if name not in specs:
            raise ConfigError(f"unknown dataset {name!r}")
        datasets.append(specs[name])
    subsets = [subset_from(s, derive_seed(args.seed, "subset", s))
               for s in section["subsets"]]
    checkpoints = {m["name"]: m.get("checkpoint") for m in section["models"]}
    rows, failures = bench.run_benchmark(
        checkpoints, datasets, subsets, eval_protocol_from(config.get("eval")),
        model_cfg=model_config_from(config.get("model")),
        train_cfg=train_config_from(config.get("train")),
        diff_cfg=diffusion_config_from(config.get("diffusion")),
        embed_cfg=embed_config_from(config.get("embed")),
        root_seed=args.seed, use_ema=args.ema, out_dir=out)
    emit_plots(out / "results.csv", out)
    print(f"{len(rows)} cells ok, {len(failures)} failed; wrote {out / 'results.csv'}")
    return 0


def _cmd_profile(args) -> int:
    config = load_experiment(args.config, args.override) if args.config else \
        apply_overrides({}, args.override)
    out = _out_dir(args)
    _snapshot_config(out, args, config)
    section = config.get("profile", {})
    c_in = section.get("c_in", 7)
    c_out = section.get("c_out", 32)
    height = section.get("height", 8)
    width = section.get("width", 8)
    k = section.get("kernel_size", 3)
    if args.channels is not None:
        try:
            channel_list = [int(c) for c in str(args.channels).split(",") if c]
        except ValueError as exc:
            raise ConfigError(
                f"bad --channels list {args.channels!r}: {exc}") from exc
    else:
        channel_list = section.get("channels", [16, 32, 64, 128])
    rows = []
    for c_max in channel_list:
        dy = flops_estimate(LayerSpec("dyconv", c_in, c_out, height, width, k))
        pad = flops_estimate(LayerSpec("padded", c_in, c_out, height, width, k,
                                       c_max=c_max))
        rows.append({"c_max": c_max, "dyconv_flops": dy, "padded_flops": pad})
    with open(out / "flops.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["c_max", "dyconv_flops",
                                                "padded_flops"])
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"c_max={row['c_max']}: dyconv={row['dyconv_flops']} "
              f"padded={row['padded_flops']}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "sample": _cmd_sample,
    "evaluate": _cmd_evaluate,
    "benchmark": _cmd_benchmark,
    "profile": _cmd_profile,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage/help; keep its code
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except FewgenError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - structured report for operators
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
