"""Training runs, held-out evaluation, and the multi-seed experiment driver."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import model as M
from .dataset import NEGATIVE, POSITIVE, ImagePatch, PatchDataset, SplitResult, SplitSpec, normalize, split
from .errors import CrackBenchError, DataError, TrainingError
from .metrics import ConfusionMatrix, MetricVector, aggregate
from .model import FINE_TUNE, FROZEN, classify

log = logging.getLogger(__name__)

DEFAULT_LR = {FINE_TUNE: 1e-4, FROZEN: 1e-3}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    learning_rate: Optional[float] = None  # None picks the per-mode default
    optimizer_id: str = "adam"
    loss_id: str = "binary_cross_entropy"
    seed: int = 0
    margin: float = 0.2  # recorded only; feeds the report's abstain band
    sampling: str = "random_shuffle_per_epoch"
    train_head: bool = True  # False = frozen backbone with the seed-initialized head, no training
    patience: Optional[int] = None
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer_id not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer_id {self.optimizer_id!r}")
        if self.loss_id != "binary_cross_entropy":
            raise ValueError(f"unknown loss_id {self.loss_id!r}")
        if self.sampling != "random_shuffle_per_epoch":
            raise ValueError(f"unknown sampling {self.sampling!r}")

    def lr_for(self, mode: str) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[mode]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train_config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainRunRecord:
    config: TrainConfig
    model_id: str
    mode: str
    per_epoch: list = field(default_factory=list)
    final_weights_ref: str = ""
    wall_clock_seconds: float = 0.0
    learning_rate: float = 0.0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["config"] = self.config.to_dict()
        return d


# -- tensors ------------------------------------------------------------------

def _pixels_to_input(model, patches: Sequence[ImagePatch]) -> torch.Tensor:
    arrays = [normalize(p, getattr(model, "normalization", "unit_range")) for p in patches]
    return model.to_input(arrays)


def _targets(patches) -> torch.Tensor:
    return torch.tensor([p.target for p in patches], dtype=torch.float32)


def _check_trainable_set(patches):
    if not patches:
        raise DataError("training set is empty")
    labels = {p.label for p in patches}
    if labels != {POSITIVE, NEGATIVE}:
        raise DataError(f"training set must contain both classes, found {sorted(labels)}")


@torch.no_grad()
def _backbone_features(model, patches, batch_size: int) -> torch.Tensor:
    model.backbone.eval()
    chunks = [model.features(_pixels_to_input(model, patches[i:i + batch_size]))
              for i in range(0, len(patches), batch_size)]
    return torch.cat(chunks) if chunks else torch.empty(0, model.head.in_features)


class FeatureCache:
    """Pooled frozen-backbone features, keyed by pretrained checksum and patch paths.

    Only valid while the backbone is untouched, which holds in frozen mode.
    """

    def __init__(self):
        self._store = {}

    def get(self, model, patches, batch_size):
        key = None
        if model.pretrained_checksum and all(p.path for p in patches):
            key = (model.pretrained_checksum, tuple(p.path for p in patches))
            if key in self._store:
                return self._store[key]
        feats = _backbone_features(model, patches, batch_size)
        if key is not None:
            self._store[key] = feats
        return feats


def train(model, train_set: Sequence[ImagePatch], val_set: Sequence[ImagePatch],
          config: TrainConfig, feature_cache: Optional[FeatureCache] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainRunRecord:
    """Fit ``model`` on ``train_set``; only parameters marked trainable move.

    In frozen mode the backbone runs once over each split and the head is
    fitted on the cached pooled features, which is numerically the same
    as running the frozen backbone every step.
    """
    train_set, val_set = list(train_set), list(val_set)
    _check_trainable_set(train_set)
    lr = config.lr_for(model.mode)
    record = TrainRunRecord(config, model.descriptor.name, model.mode, learning_rate=lr)
    if config.epochs == 0 or (model.mode == FROZEN and not config.train_head):
        return record

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    frozen = model.mode == FROZEN
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer_id == "adam":
        opt = torch.optim.Adam(params, lr=lr)
    else:
        opt = torch.optim.SGD(params, lr=lr, momentum=0.9)
    loss_fn = nn.BCEWithLogitsLoss(reduction="sum")
    y_train = _targets(train_set)

    if frozen:
        cache = feature_cache or FeatureCache()
        x_train = cache.get(model, train_set, config.eval_batch_size)
        x_val = cache.get(model, val_set, config.eval_batch_size) if val_set else None

    def val_accuracy():
        if not val_set:
            return None
        if frozen:
            with torch.no_grad():
                logits = model.head(x_val).squeeze(1)
            pred = (torch.sigmoid(logits.double()) >= model.decision_threshold).float()
            return float((pred == _targets(val_set)).float().mean())
        return _accuracy_of(model, val_set, config.eval_batch_size)

    started = time.perf_counter()
    best, since_best = -1.0, 0
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        total_loss, correct = 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            if frozen:
                logits = model.head(x_train[idx]).squeeze(1)
            else:
                logits = model(_pixels_to_input(model, [train_set[j] for j in idx.tolist()]))
            y = y_train[idx]
            loss = loss_fn(logits, y)
            if not torch.isfinite(loss):
                record.wall_clock_seconds = time.perf_counter() - started
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}; last finite epoch "
                    f"{record.per_epoch[-1]['epoch'] if record.per_epoch else 0}", record)
            opt.zero_grad()
            (loss / len(idx)).backward()
            opt.step()
            total_loss += float(loss.detach())
            correct += int(((torch.sigmoid(logits.detach().double()) >= model.decision_threshold).float() == y).sum())
        stats = {"epoch": epoch, "train_loss": total_loss / n, "train_accuracy": correct / n,
                 "val_accuracy": val_accuracy()}
        record.per_epoch.append(stats)
        if progress:
            progress(stats)
        if config.patience and stats["val_accuracy"] is not None:
            if stats["val_accuracy"] > best:
                best, since_best = stats["val_accuracy"], 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    record.stopped_early = True
                    break
    model.eval()
    record.wall_clock_seconds = time.perf_counter() - started
    record.final_weights_ref = M.state_checksum(model.state_dict())
    return record


def score_patches(model, patches: Sequence[ImagePatch], batch_size: int = 64) -> list[float]:
    scheme = getattr(model, "normalization", "unit_range")
    scores = []
    for i in range(0, len(patches), batch_size):
        batch = [normalize(p, scheme) for p in patches[i:i + batch_size]]
        scores.extend(model.predict(batch))
    return scores


def _accuracy_of(model, patches, batch_size):
    cm = evaluate(model, patches, batch_size=batch_size)
    return (cm.tp + cm.tn) / cm.total


def evaluate(model, test_set: Sequence[ImagePatch], threshold: Optional[float] = None,
             batch_size: int = 64, scores: Optional[list] = None) -> ConfusionMatrix:
    """Confusion counts of ``classify(predict(...))`` against labels; positive = cracked.

    Pass a list as ``scores`` to receive the per-patch probabilities.
    """
    test_set = list(test_set)
    if not test_set:
        raise DataError("test set is empty")
    if threshold is None:
        threshold = getattr(model, "decision_threshold", 0.5)
    probs = score_patches(model, test_set, batch_size)
    cm = ConfusionMatrix.from_predictions((p.target for p in test_set),
                                          (classify(s, threshold) for s in probs))
    assert cm.total == len(test_set)
    if scores is not None:
        scores.extend(probs)
    return cm


# -- experiments --------------------------------------------------------------

def result_filename(backbone: str, mode: str, seed: int) -> str:
    return f"{backbone}__{mode}__seed{seed}.json"


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_experiment(backbones: Sequence[str], modes: Sequence[str], n_runs: int,
                   base_config: TrainConfig, data: PatchDataset, split_spec,
                   output_dir, weight_store=None, save_models: bool = False,
                   extra: Optional[dict] = None) -> dict:
    """Train and evaluate ``n_runs`` seeds for every (backbone, mode) cell.

    Seeds are ``base_config.seed + i``. Each run writes one result file;
    a failing run writes ``<name>.error.json`` and the sibling runs go on.
    Returns ``{(backbone, mode): [MetricVector, ...]}``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if isinstance(split_spec, SplitResult):
        parts = split_spec
    else:
        parts = split(data, split_spec or SplitSpec())
    train_set, val_set, test_set = (data.subset(parts.train), data.subset(parts.val),
                                    data.subset(parts.test))
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    store_index = _store_index(weight_store)

    results: dict = {}
    for backbone in backbones:
        cache = FeatureCache()
        for mode in modes:
            cell = results.setdefault((backbone, mode), [])
            for i in range(n_runs):
                seed = base_config.seed + i
                cfg = dataclasses.replace(base_config, seed=seed)
                name = result_filename(backbone, mode, seed)
                started = time.time()
                try:
                    model = M.build_classifier(backbone, mode, seed=seed, weight_store=weight_store)
                    record = train(model, train_set, val_set, cfg, feature_cache=cache)
                    scores: list = []
                    cm = evaluate(model, test_set, scores=scores, batch_size=cfg.eval_batch_size)
                except (CrackBenchError, RuntimeError, ValueError) as e:
                    log.error("%s failed: %s", name, e)
                    err = {"backbone": backbone, "mode": mode, "seed": seed, "error": str(e),
                           "type": type(e).__name__}
                    rec = getattr(e, "record", None)
                    if rec is not None:
                        err["per_epoch"] = rec.per_epoch
                    _write_json(out / name.replace(".json", ".error.json"), err)
                    continue
                mv = MetricVector.from_confusion(cm)
                cell.append(mv)
                doc = {
                    "backbone": backbone,
                    "mode": mode,
                    "seed": seed,
                    "config": cfg.to_dict(),
                    "learning_rate": record.learning_rate,
                    "confusion": cm.to_dict(),
                    "metrics": mv.to_dict(),
                    "per_epoch": record.per_epoch,
                    "wall_clock_seconds": record.wall_clock_seconds,
                    "timestamps": {"started": started, "finished": time.time()},
                    "n_test": len(test_set),
                    "decision_threshold": model.decision_threshold,
                    "preprocessing_id": model.preprocessing_id,
                    "weights": store_index.get(backbone, {}),
                    "dataset_root": data.root,
                    "split": {"seed": parts.spec.seed, "train": len(train_set),
                              "val": len(val_set), "test": len(test_set)},
                    "misclassified": _misclassified(test_set, scores, model.decision_threshold,
                                                    cfg.margin),
                }
                if extra:
                    doc.update(extra)
                if save_models:
                    M.save_model(model, out / "models" / name.replace(".json", ""), cfg.digest())
                _write_json(out / name, doc)
                log.info("%s: %s", name, mv)
                del model
    return results


def _store_index(weight_store) -> dict:
    try:
        p = M.weight_store_path(weight_store) / "store.json"
    except CrackBenchError:
        return {}
    return json.loads(p.read_text()) if p.is_file() else {}


def _misclassified(patches, scores, threshold, margin) -> list[dict]:
    rows = []
    for p, s in zip(patches, scores):
        pred = classify(s, threshold)
        if pred != p.target:
            rows.append({"path": p.path, "label": p.label, "score": s,
                         "kind": "false_positive" if pred else "false_negative",
                         "low_confidence": M.low_confidence(s, threshold, margin)})
    return rows


def load_results(results_dir) -> list[dict]:
    from .stats import load_result_file

    files = sorted(p for p in Path(results_dir).glob("*.json")
                   if "__seed" in p.name and not p.name.endswith(".error.json"))
    return [load_result_file(p) | {"_file": p.name} for p in files]


def aggregate_results(results) -> dict:
    """Re-aggregate persisted run results: ``{mode: {backbone: {metric: Summary}}}``.

    ``results`` is a results directory or a list of loaded result documents.
    Backbones appear in registry order, then alphabetically for unknown names.
    """
    docs = load_results(results) if isinstance(results, (str, Path)) else results
    grouped: dict = {}
    for d in docs:
        grouped.setdefault(d["mode"], {}).setdefault(d["backbone"], []).append(
            (d["seed"], MetricVector.from_dict(d["metrics"])))
    order = {d.name: i for i, d in enumerate(M.list_backbones())}
    out = {}
    for mode in sorted(grouped, key=lambda m: M.TRAIN_MODES.index(m) if m in M.TRAIN_MODES else 99):
        cells = grouped[mode]
        out[mode] = {b: aggregate([mv for _, mv in sorted(cells[b], key=lambda t: t[0])])
                     for b in sorted(cells, key=lambda b: (order.get(b, math.inf), b))}
    return out
