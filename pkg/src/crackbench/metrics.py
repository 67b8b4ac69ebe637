"""Confusion-matrix metrics and mean +/- std aggregation.

A metric whose denominator is zero is ``None`` (undefined) rather than 0 or
NaN. Aggregation drops undefined values and reports how many it dropped.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")
TABLE_HEADER = ("Model", "Accuracy", "Precision", "Recall", "F1")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, truth: Iterable[int], predicted: Iterable[int]) -> "ConfusionMatrix":
        tp = fp = tn = fn = 0
        for t, p in zip(truth, predicted):
            if p:
                tp, fp = (tp + 1, fp) if t else (tp, fp + 1)
            else:
                fn, tn = (fn + 1, tn) if t else (fn, tn + 1)
        return cls(tp, fp, tn, fn)

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def accuracy(cm: ConfusionMatrix) -> Optional[float]:
    return _ratio(cm.tp + cm.tn, cm.total)


def precision(cm: ConfusionMatrix) -> Optional[float]:
    return _ratio(cm.tp, cm.tp + cm.fp)


def recall(cm: ConfusionMatrix) -> Optional[float]:
    return _ratio(cm.tp, cm.tp + cm.fn)


def f1(cm: ConfusionMatrix) -> Optional[float]:
    return f1_from(precision(cm), recall(cm))


def f1_from(p: Optional[float], r: Optional[float]) -> Optional[float]:
    if p is None or r is None:
        return None
    if p + r == 0:
        return None
    return 2 * (p * r) / (p + r)


@dataclass(frozen=True)
class MetricVector:
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "MetricVector":
        return cls(accuracy(cm), precision(cm), recall(cm), f1(cm))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricVector":
        return cls(*(d.get(k) for k in METRIC_NAMES))


@dataclass(frozen=True)
class Summary:
    mean: Optional[float]
    std: Optional[float]
    n: int
    excluded: int

    def cell(self) -> str:
        return format_cell(self.mean, self.std)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0.0 for a single value."""
    n = len(values)
    # fsum keeps the result independent of value order
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    ss = math.fsum((v - mean) ** 2 for v in values)
    return mean, math.sqrt(ss / (n - 1))


def aggregate(runs: Sequence[MetricVector]) -> dict[str, Summary]:
    if not runs:
        raise ValueError("aggregate needs at least one run")
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(r, name) for r in runs]
        defined = [v for v in vals if v is not None]
        excluded = len(vals) - len(defined)
        if defined:
            m, s = mean_std(defined)
            out[name] = Summary(m, s, len(defined), excluded)
        else:
            out[name] = Summary(None, None, 0, excluded)
    return out


def format_cell(mean: Optional[float], std: Optional[float]) -> str:
    """Table cell in the ``0.996±0.0042`` style: mean to 3 decimals, std to 2 significant digits."""
    if mean is None:
        return "undefined"
    if std is None or std == 0:
        return f"{mean:.3f}±0"
    return f"{mean:.3f}±{std:#.2g}"


def table_rows(summaries: dict[str, dict[str, Summary]]) -> list[list[str]]:
    return [[model] + [s[m].cell() for m in METRIC_NAMES] for model, s in summaries.items()]


def to_markdown(summaries: dict[str, dict[str, Summary]]) -> str:
    rows = [list(TABLE_HEADER)] + table_rows(summaries)
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_HEADER))]
    fmt = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    lines = [fmt(rows[0]), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt(r) for r in rows[1:]]
    return "\n".join(lines) + "\n"


def to_csv(summaries: dict[str, dict[str, Summary]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model"] + [f"{m}_{k}" for m in METRIC_NAMES for k in ("mean", "std", "n", "excluded")])
    for model, s in summaries.items():
        row = [model]
        for m in METRIC_NAMES:
            x = s[m]
            row += [_num(x.mean), _num(x.std), x.n, x.excluded]
        w.writerow(row)
    return buf.getvalue()


def _num(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))
