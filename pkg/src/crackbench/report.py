"""Render persisted run results into tables, ANOVA summaries, figures and a gallery.

Everything here is a pure function of the result files, so regenerating a
report from the same directory yields identical bytes.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from . import figures
from .errors import DataError
from .metrics import METRIC_NAMES, to_csv, to_markdown
from .stats import anova_markdown, compare_models
from .training import aggregate_results, load_results

log = logging.getLogger(__name__)

MODE_TITLES = {
    "frozen_features": "Pretrained backbones, frozen",
    "fine_tune_all": "Fine-tuned backbones",
}


@dataclass
class Report:
    tables: dict = field(default_factory=dict)  # mode -> backbone -> metric -> Summary
    anova: dict = field(default_factory=dict)  # mode -> metric -> AnovaResult, or a skip reason
    gallery: list = field(default_factory=list)


def compare_by_mode(results_dir, metric_names=METRIC_NAMES, alpha: float = 0.05) -> dict:
    """ANOVA across backbones within each mode.

    A mode with fewer than two backbones gets a string explaining why no
    test was run instead of an AnovaResult.
    """
    out = {}
    by_mode: dict = {}
    for d in load_results(results_dir):
        by_mode.setdefault(d["mode"], []).append(Path(results_dir) / d["_file"])
    for mode in sorted(by_mode):
        files = by_mode[mode]
        models = {json.loads(p.read_text())["backbone"] for p in files}
        if len(models) < 2:
            out[mode] = f"skipped: one-way ANOVA needs at least 2 models, found {sorted(models)}"
            continue
        out[mode] = compare_models(files, metric_names, alpha)
    return out


def _entry(r):
    return r if isinstance(r, str) else r.to_dict()


def comparison_doc(comparisons: dict) -> dict:
    return {mode: (res if isinstance(res, str) else {m: _entry(r) for m, r in res.items()})
            for mode, res in comparisons.items()}


def _confidence(e: dict) -> float:
    return e["score"] if e["kind"] == "false_positive" else 1.0 - e["score"]


def collect_gallery(docs, limit: int | None = None) -> list[dict]:
    rows = []
    for d in docs:
        for e in d.get("misclassified", []):
            rows.append(dict(e, backbone=d["backbone"], mode=d["mode"], seed=d["seed"],
                             root=d.get("dataset_root", "")))
    rows.sort(key=lambda e: (-_confidence(e), e["backbone"], e["mode"], e["seed"], e["path"]))
    return rows[:limit] if limit is not None else rows


def build_report(results_dir, out_dir, alpha: float = 0.05, gallery_limit: int = 50) -> Report:
    results_dir, out_dir = Path(results_dir), Path(out_dir)
    docs = load_results(results_dir)
    if not docs:
        raise DataError(f"no run result files in {results_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = Report(tables=aggregate_results(docs), anova=compare_by_mode(results_dir, alpha=alpha),
                 gallery=collect_gallery(docs, gallery_limit))

    lines = ["# Concrete crack detection benchmark", ""]
    n_runs = len(docs)
    lines += [f"{n_runs} run result file(s) from `{results_dir.name}`.", ""]

    for mode, table in rep.tables.items():
        (out_dir / "tables").mkdir(exist_ok=True)
        (out_dir / "tables" / f"{mode}.csv").write_text(to_csv(table))
        md = to_markdown(table)
        (out_dir / "tables" / f"{mode}.md").write_text(md)
        fig = figures.metric_bars(table, MODE_TITLES.get(mode, mode),
                                  out_dir / "figures" / f"metrics_{mode}.png")
        runs = {b: table[b]["accuracy"].n + table[b]["accuracy"].excluded for b in table}
        lines += [f"## {MODE_TITLES.get(mode, mode)} (`{mode}`)", "",
                  "Cells are mean±std over runs (sample std, n-1).", "", md,
                  "Runs per model: " + ", ".join(f"{b} {n}" for b, n in runs.items()), "",
                  f"![{mode} metrics]({fig.relative_to(out_dir).as_posix()})", ""]

    curves = figures.training_curves(docs, out_dir / "figures" / "training_curves.png")
    if curves:
        lines += ["## Training curves", "", f"![training curves]({curves.relative_to(out_dir).as_posix()})", ""]

    lines += ["## Model comparison (one-way ANOVA)", "", f"Significance level alpha = {alpha}.", ""]
    for mode, res in rep.anova.items():
        lines.append(f"### `{mode}`")
        lines.append("")
        lines.append(res if isinstance(res, str) else anova_markdown(res))
        lines.append("")
    (out_dir / "comparison.json").write_text(
        json.dumps(comparison_doc(rep.anova), indent=2, sort_keys=True) + "\n")

    lines += ["## Misclassified test patches", ""]
    gdir = out_dir / "gallery"
    if gdir.exists():
        shutil.rmtree(gdir)
    gdir.mkdir()
    if not rep.gallery:
        lines += ["No misclassified test patches.", ""]
    else:
        lines += ["Sorted by confidence of the wrong decision.", "",
                  "| # | kind | model | mode | seed | score | low confidence | file |",
                  "|---|---|---|---|---|---|---|---|"]
        for i, e in enumerate(rep.gallery, 1):
            src = Path(e["root"]) / e["path"]
            name = (f"{i:03d}_{e['kind']}_{e['score']:.4f}_{e['backbone']}_{e['mode']}"
                    f"_seed{e['seed']}_{Path(e['path']).name}")
            if src.is_file():
                shutil.copyfile(src, gdir / name)
            else:
                log.warning("gallery source missing: %s", src)
            e["file"] = f"gallery/{name}"
            lines.append(f"| {i} | {e['kind']} | {e['backbone']} | {e['mode']} | {e['seed']} | "
                         f"{e['score']:.4f} | {'yes' if e.get('low_confidence') else 'no'} | "
                         f"[{name}](gallery/{name}) |")
        lines.append("")
        shown = [dict(e, path=str((Path(e["root"]) / e["path"]).resolve()))
                 for e in rep.gallery if (Path(e["root"]) / e["path"]).is_file()][:20]
        if shown:
            grid = figures.gallery_grid(shown, "/", out_dir / "figures" / "gallery.png")
            lines += [f"![misclassified patches]({grid.relative_to(out_dir).as_posix()})", ""]
    (out_dir / "report.md").write_text("\n".join(lines))
    return rep

