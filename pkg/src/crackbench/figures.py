"""Matplotlib figures written next to the report tables."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402

# PNG metadata carries the matplotlib version by default; dropping it keeps
# regenerated figures byte-identical.
_SAVE_KW = dict(dpi=120, metadata={"Software": None})

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.autolayout": True,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def metric_bars(summaries: dict, title: str, path) -> Path:
    """Grouped bars of mean metric per backbone with +/- std error bars."""
    models = list(summaries)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.2))
        width = 0.8 / len(METRIC_NAMES)
        x = np.arange(len(models))
        for k, metric in enumerate(METRIC_NAMES):
            means = [summaries[m][metric].mean or 0.0 for m in models]
            stds = [summaries[m][metric].std or 0.0 for m in models]
            ax.bar(x + (k - 1.5) * width, means, width, yerr=stds, capsize=2, label=metric)
        ax.set_xticks(x)
        ax.set_xticklabels(models)
        lo = min((summaries[m][t].mean or 0.0) for m in models for t in METRIC_NAMES)
        ax.set_ylim(max(0.0, lo - 0.05), 1.005)
        ax.set_ylabel("score")
        ax.set_title(title)
        ax.legend(ncol=4, fontsize=7, loc="lower right")
        return _save(fig, path)


def training_curves(docs: Sequence[dict], path) -> Path | None:
    """Validation accuracy per epoch, one line per run. None when no run logged epochs."""
    runs = [d for d in docs if d.get("per_epoch")]
    if not runs:
        return None
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 3.2))
        for d in runs:
            ep = [e["epoch"] for e in d["per_epoch"]]
            val = [e["val_accuracy"] if e["val_accuracy"] is not None else e["train_accuracy"]
                   for e in d["per_epoch"]]
            ax.plot(ep, val, marker="o", ms=2, lw=1,
                    label=f"{d['backbone']} {d['mode']} s{d['seed']}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation accuracy")
        if len(runs) <= 10:
            ax.legend(fontsize=6)
        return _save(fig, path)


def gallery_grid(entries: Sequence[dict], image_root, path, cols: int = 5) -> Path | None:
    """Thumbnail grid of misclassified patches titled with their scores."""
    if not entries:
        return None
    rows = (len(entries) + cols - 1) // cols
    with plt.rc_context({"font.size": 7}):
        fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.8 * rows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for ax, e in zip(axes.flat, entries):
            with Image.open(Path(image_root) / e["path"]) as im:
                ax.imshow(np.asarray(im.convert("RGB")))
            ax.set_title(f"{e['kind'].replace('_', ' ')}\n{e['backbone']} p={e['score']:.3f}")
        fig.tight_layout()
        return _save(fig, path)
