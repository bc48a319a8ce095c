"""Static comparison plots from a benchmark results table."""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import SchemaError

# Fixed left-to-right axis ordering of subset sizes.
SUBSET_ORDER = ["#10", "#25", "#50", "5%", "10%", "15%", "100%"]

_REQUIRED = {"model", "dataset", "subset", "disc", "cfid"}


def _subset_key(label: str):
    try:
        return (0, SUBSET_ORDER.index(label))
    except ValueError:
        return (1, label)


def emit_plots(results_csv, output_dir) -> list[Path]:
    """Render mean-Disc and c-FID vs. subset size, one line per model.

    Returns the written file paths; an empty results table produces no files
    (a warning is issued instead).
    """
    results_csv, output_dir = Path(results_csv), Path(output_dir)
    with open(results_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not _REQUIRED.issubset(reader.fieldnames):
            raise SchemaError(
                f"results table must carry columns {sorted(_REQUIRED)}, "
                f"got {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        warnings.warn(f"no rows in {results_csv}; skipping plots")
        return []

    subsets = sorted({r["subset"] for r in rows}, key=_subset_key)
    models = sorted({r["model"] for r in rows})
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, ylabel, fname in [("disc", "mean Disc.", "disc_vs_subset.png"),
                                  ("cfid", "contextFID", "cfid_vs_subset.png")]:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for model in models:
            ys = []
            for s in subsets:
                vals = [float(r[metric]) for r in rows
                        if r["model"] == model and r["subset"] == s]
                ys.append(sum(vals) / len(vals) if vals else float("nan"))
            ax.plot(range(len(subsets)), ys, marker="o", label=model)
        ax.set_xticks(range(len(subsets)))
        ax.set_xticklabels(subsets)
        ax.set_xlabel("Train subset size")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = output_dir / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
