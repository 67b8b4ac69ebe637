"""``crackbench`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import dataset as D
from . import model as M
from .errors import CrackBenchError, DataError, UsageError
from .localize import WindowConfig, annotate, detection_doc, localize, write_detections
from .report import build_report, compare_by_mode, comparison_doc
from .stats import anova_markdown
from .training import TrainConfig, aggregate_results, run_experiment
from .metrics import to_csv, to_markdown

log = logging.getLogger("crackbench")

MANIFEST_DEFAULTS = {
    "dataset_root": None,
    "split_manifest": None,
    "split": {},
    "patch_size": D.DEFAULT_PATCH_SIZE,
    "limit_per_class": None,
    "backbones": ["EfficientNetV2"],
    "modes": [M.FINE_TUNE],
    "n_runs": 5,
    "train_config": {},
    "output_dir": "results",
    "weight_store": None,
    "save_models": False,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


# -- commands -----------------------------------------------------------------

def cmd_ingest(args) -> int:
    ds = D.load_patch_dataset(args.root, args.patch_size, limit_per_class=args.limit_per_class)
    print(ds.summary())
    print(f"skipped: {ds.skipped}")
    return 0


def cmd_split(args) -> int:
    ds = D.load_patch_dataset(args.root, args.patch_size, limit_per_class=args.limit_per_class)
    spec = D.SplitSpec(args.train_fraction, args.val_fraction, args.seed, not args.no_stratify)
    res = D.split(ds, spec)
    out = D.write_split_manifest(ds, res, args.out)
    print(f"{out}: train {len(res.train)}, val {len(res.val)}, test {len(res.test)}")
    return 0


def cmd_patchify(args) -> int:
    """Cut high-resolution source images into patches under ``out/<ClassDir>/``."""
    src = Path(args.images)
    files = [src] if src.is_file() else D._list_images(src)
    if not files:
        raise DataError(f"no images found at {src}")
    total = 0
    for f in files:
        img = D.SourceImage.open(f)
        patches = D.extract_patches(img, args.patch_size, args.stride or args.patch_size)
        D.save_patches(patches, args.out, args.label)
        total += len(patches)
    print(f"{total} patches from {len(files)} image(s) -> {Path(args.out) / D.CLASS_DIRS[args.label]}")
    return 0


def load_manifest(path, overrides: dict | None = None) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise DataError(f"experiment manifest not found: {path}") from None
    except yaml.YAMLError as e:
        raise UsageError(f"cannot parse manifest {path}: {e}") from None
    unknown = set(doc) - set(MANIFEST_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown manifest keys: {sorted(unknown)}")
    eff = {**MANIFEST_DEFAULTS, **doc}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "train_config":
            eff["train_config"] = {**eff["train_config"], **v}
        else:
            eff[k] = v
    base = path.parent
    for key in ("dataset_root", "split_manifest", "output_dir", "weight_store"):
        if eff[key] is not None:
            eff[key] = str((base / eff[key]).resolve()) if not Path(eff[key]).is_absolute() else eff[key]
    if not eff["dataset_root"]:
        raise UsageError("manifest must set dataset_root")
    if int(eff["n_runs"]) < 1:
        raise UsageError("n_runs must be >= 1")
    for b in eff["backbones"]:
        M.get_backbone(b)
    for m in eff["modes"]:
        if m not in M.TRAIN_MODES:
            raise UsageError(f"unknown mode {m!r}; expected one of {M.TRAIN_MODES}")
    return eff


def cmd_run(args) -> int:
    tc_over = {k: v for k, v in {"epochs": args.epochs, "seed": args.seed,
                                 "batch_size": args.batch_size}.items() if v is not None}
    eff = load_manifest(args.manifest, {
        "output_dir": args.output_dir, "n_runs": args.n_runs,
        "weight_store": args.weights, "train_config": tc_over or None,
    })
    try:
        cfg = TrainConfig.from_dict(eff["train_config"])
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad train_config: {e}") from None
    ds = D.load_patch_dataset(eff["dataset_root"], eff["patch_size"],
                              limit_per_class=eff["limit_per_class"])
    out = Path(eff["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if eff["split_manifest"] and Path(eff["split_manifest"]).is_file():
        parts = D.read_split_manifest(eff["split_manifest"], ds)
    else:
        sp = eff["split"]
        spec = D.SplitSpec(sp.get("train_fraction", 0.8), sp.get("val_fraction_of_train", 0.1),
                           sp.get("seed", 0), sp.get("stratified", True))
        parts = D.split(ds, spec)
        target = eff["split_manifest"] or out / "split.json"
        D.write_split_manifest(ds, parts, target)
        eff["split_manifest"] = str(target)
    (out / "experiment.json").write_text(json.dumps(eff, indent=2, sort_keys=True) + "\n")

    results = run_experiment(eff["backbones"], eff["modes"], int(eff["n_runs"]), cfg, ds, parts,
                             out, weight_store=eff["weight_store"], save_models=eff["save_models"],
                             extra={"experiment": eff})
    tables = aggregate_results(out)
    for mode, table in tables.items():
        (out / f"aggregate_{mode}.csv").write_text(to_csv(table))
        (out / f"aggregate_{mode}.md").write_text(to_markdown(table))
        print(f"{mode}\n{to_markdown(table)}")
    failed = sum(1 for _ in out.glob("*.error.json"))
    expected = len(eff["backbones"]) * len(eff["modes"]) * int(eff["n_runs"])
    done = sum(len(v) for v in results.values())
    print(f"{done}/{expected} runs completed; results in {out}")
    return 0 if failed == 0 and done == expected else 3


def cmd_compare(args) -> int:
    comps = compare_by_mode(args.results_dir, args.metrics, args.alpha)
    if not comps:
        raise DataError(f"no run result files in {args.results_dir}")
    doc = comparison_doc(comps)
    out = Path(args.out) if args.out else Path(args.results_dir) / "comparison.json"
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for mode, res in comps.items():
        print(f"## {mode}")
        print(res if isinstance(res, str) else anova_markdown(res))
    print(f"written {out}")
    return 0


def cmd_localize(args) -> int:
    model = M.load_model(args.model)
    try:
        image = D.SourceImage.open(args.image)
    except (OSError, FileNotFoundError) as e:
        raise DataError(f"cannot read image {args.image}: {e}") from None
    cfg = WindowConfig(args.window, args.stride, args.threshold, args.cover_edges,
                       args.batch_size, args.iou)
    n_windows = len(D.grid_offsets(*image.pixels.shape[:2], cfg.window_size, cfg.stride, cfg.cover_edges))
    dets = localize(model, image, cfg, merge=not args.no_merge)
    doc = detection_doc(Path(args.image).name, cfg, dets, raw_windows=n_windows)
    out = Path(args.out or Path(args.image).with_suffix(".detections.json"))
    write_detections(out, doc)
    if args.annotate:
        annotate(image, dets, args.annotate)
    print(f"{len(dets)} detection(s) from {n_windows} windows -> {out}")
    return 0


def cmd_report(args) -> int:
    rep = build_report(args.results_dir, args.out_dir, args.alpha, args.gallery_limit)
    print(f"report with {len(rep.tables)} table(s), {len(rep.gallery)} gallery entries -> "
          f"{Path(args.out_dir) / 'report.md'}")
    return 0


def cmd_weights(args) -> int:
    index = M.create_weight_store(args.store, args.backbones, args.seed, args.source)
    for name, info in index.items():
        print(f"{name}: {info['origin']} ({info['checksum'][:12]})")
    return 0


def cmd_backbones(args) -> int:
    print(f"{'name':<16}{'layers':>8}{'params(M)':>11}{'input':>7}  preprocessing")
    for d in M.list_backbones():
        print(f"{d.name:<16}{d.declared_layers:>8}{d.declared_params_millions:>11g}"
              f"{d.native_input_size:>7}  {d.preprocessing_id}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crackbench", description="Concrete crack detection benchmark harness.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="load a patch corpus and print class counts")
    s.add_argument("root")
    s.add_argument("--patch-size", type=int, default=D.DEFAULT_PATCH_SIZE)
    s.add_argument("--limit-per-class", type=int)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="write a seeded train/val/test split manifest")
    s.add_argument("root")
    s.add_argument("--out", required=True)
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--val-fraction", type=float, default=0.1, help="fraction of the train portion")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-stratify", action="store_true")
    s.add_argument("--patch-size", type=int, default=D.DEFAULT_PATCH_SIZE)
    s.add_argument("--limit-per-class", type=int)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("patchify", help="cut high-resolution images into patches")
    s.add_argument("images", help="image file or directory")
    s.add_argument("out", help="dataset root to write into")
    s.add_argument("--label", choices=D.LABELS, required=True)
    s.add_argument("--patch-size", type=int, default=D.DEFAULT_PATCH_SIZE)
    s.add_argument("--stride", type=int)
    s.set_defaults(func=cmd_patchify)

    s = sub.add_parser("run", help="train and evaluate every (backbone, mode, seed) in a manifest")
    s.add_argument("manifest")
    s.add_argument("--output-dir")
    s.add_argument("--n-runs", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--weights", help=f"weight store directory (default: ${M.WEIGHTS_ENV})")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("compare", help="one-way ANOVA across models per metric")
    s.add_argument("results_dir")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--metrics", nargs="+", default=["accuracy", "precision", "recall", "f1"],
                   choices=["accuracy", "precision", "recall", "f1"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("localize", help="slide a trained model over a large image")
    s.add_argument("model", help="model artifact path (.pt with .json sidecar)")
    s.add_argument("image")
    s.add_argument("--window", type=int, default=D.DEFAULT_PATCH_SIZE)
    s.add_argument("--stride", type=int, default=D.DEFAULT_PATCH_SIZE // 2)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--iou", type=float, default=0.1)
    s.add_argument("--cover-edges", action="store_true")
    s.add_argument("--no-merge", action="store_true")
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--out")
    s.add_argument("--annotate", help="write a copy of the image with boxes drawn")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("report", help="render tables, ANOVA, figures and gallery")
    s.add_argument("results_dir")
    s.add_argument("out_dir")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--gallery-limit", type=int, default=50)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("weights", help="populate a weight store")
    s.add_argument("store")
    s.add_argument("--source", choices=["pretrained", "random"], default="pretrained")
    s.add_argument("--backbones", nargs="+")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("backbones", help="list registered backbones")
    s.set_defaults(func=cmd_backbones)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CrackBenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return UsageError.exit_code
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
