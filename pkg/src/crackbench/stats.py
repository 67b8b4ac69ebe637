"""One-way ANOVA with an in-house F-distribution tail.

The upper tail uses the identity

    P(F > f) = I_x(d2/2, d1/2),   x = d2 / (d2 + d1 * f)

with the regularized incomplete beta evaluated by a modified-Lentz
continued fraction. Target accuracy is 1e-10 absolute for d1, d2 <= 200
and f <= 1e6.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError
from .metrics import METRIC_NAMES

log = logging.getLogger(__name__)

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 10_000


def _beta_cf(a: float, b: float, x: float) -> float:
    # Continued fraction for I_x(a, b), Numerical-Recipes form, modified Lentz.
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # The fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_upper_tail(f: float, d1: int, d2: int) -> float:
    """P(F_{d1,d2} > f)."""
    if not (isinstance(d1, int) and isinstance(d2, int)) or d1 < 1 or d2 < 1:
        raise ValueError(f"degrees of freedom must be positive integers, got ({d1}, {d2})")
    if not math.isfinite(f):
        if f == math.inf:
            return 0.0
        raise ValueError(f"f must be finite, got {f}")
    if f <= 0:
        return 1.0
    x = d2 / (d2 + d1 * f)
    p = betainc_regularized(d2 / 2.0, d1 / 2.0, x)
    return min(1.0, max(0.0, p))


@dataclass(frozen=True)
class MetricSample:
    group_label: str
    metric_name: str
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError(f"group {self.group_label!r} has no values")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"group {self.group_label!r} has non-finite values")


@dataclass(frozen=True)
class AnovaResult:
    f_statistic: float
    df_between: int
    df_within: int
    p_value: float
    alpha: float
    significant: bool
    ss_between: float = 0.0
    ss_within: float = 0.0
    flags: tuple[str, ...] = ()
    groups: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "F": None if math.isinf(self.f_statistic) else self.f_statistic,
            "df": [self.df_between, self.df_within],
            "p": self.p_value,
            "alpha": self.alpha,
            "significant": self.significant,
            "flags": list(self.flags),
            "groups": dict(self.groups),
        }


def one_way_anova(groups: Sequence[MetricSample], alpha: float = 0.05) -> AnovaResult:
    k = len(groups)
    if k < 2:
        raise ValueError("one-way ANOVA needs at least 2 groups")
    if len({g.metric_name for g in groups}) != 1:
        raise ValueError("all groups must share one metric_name")
    n_total = sum(len(g.values) for g in groups)
    df_b, df_w = k - 1, n_total - k
    if df_w < 1:
        raise ValueError("need more observations than groups (N - k >= 1)")

    grand = math.fsum(v for g in groups for v in g.values) / n_total
    means = [math.fsum(g.values) / len(g.values) for g in groups]
    ssb = math.fsum(len(g.values) * (m - grand) ** 2 for g, m in zip(groups, means))
    ssw = math.fsum((v - m) ** 2 for g, m in zip(groups, means) for v in g.values)

    # Rounding noise in sums of squares is treated as zero relative to the data scale.
    scale = math.fsum((v - grand) ** 2 for g in groups for v in g.values)
    flags = []
    if scale == 0.0:
        f_stat, p = 0.0, 1.0
        flags.append("degenerate")
    elif ssw <= 1e-14 * scale:
        f_stat, p = math.inf, 0.0
        flags.append("exact_separation")
    else:
        f_stat = (ssb / df_b) / (ssw / df_w)
        p = f_upper_tail(f_stat, df_b, df_w)
    counts = {g.group_label: len(g.values) for g in groups}
    return AnovaResult(f_stat, df_b, df_w, p, alpha, p < alpha, ssb, ssw, tuple(flags), counts)


def load_result_file(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise DataError(f"result file not found: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"malformed result file {path}: {e}") from e
    if not isinstance(doc, dict) or "backbone" not in doc or "metrics" not in doc:
        raise DataError(f"malformed result file {path}: missing backbone/metrics")
    return doc


def compare_models(result_files: Iterable, metric_names: Sequence[str] = METRIC_NAMES,
                   alpha: float = 0.05) -> dict[str, AnovaResult | str]:
    """Group per-run metrics by backbone and run one ANOVA per metric.

    A metric left with too few defined values (fewer than two groups, or no
    within-group degrees of freedom) maps to a string saying why it was skipped.
    """
    by_model: dict[str, list[dict]] = {}
    for path in sorted(map(Path, result_files)):
        doc = load_result_file(path)
        by_model.setdefault(doc["backbone"], []).append(doc["metrics"])
    if len(by_model) < 2:
        raise DataError(f"need at least 2 model groups to compare, found {sorted(by_model)}")

    out = {}
    for metric in metric_names:
        if metric not in METRIC_NAMES:
            raise ValueError(f"unknown metric {metric!r}")
        samples, dropped = [], 0
        for model in sorted(by_model):
            vals = [m.get(metric) for m in by_model[model]]
            defined = tuple(float(v) for v in vals if v is not None)
            dropped += len(vals) - len(defined)
            if defined:
                samples.append(MetricSample(model, metric, defined))
        if dropped:
            log.info("%s: excluded %d undefined values", metric, dropped)
        n_defined = sum(len(s.values) for s in samples)
        if len(samples) < 2 or n_defined - len(samples) < 1:
            out[metric] = (f"skipped: {n_defined} defined values in {len(samples)} groups "
                           f"({dropped} undefined excluded)")
            continue
        out[metric] = one_way_anova(samples, alpha)
    return out


def anova_markdown(results: dict) -> str:
    lines = ["| Metric | F | df | p-value | significant |", "|---|---|---|---|---|"]
    for metric, r in results.items():
        if isinstance(r, str):
            lines.append(f"| {metric} | {r} | | | |")
            continue
        f = "inf" if math.isinf(r.f_statistic) else f"{r.f_statistic:.4g}"
        lines.append(f"| {metric} | {f} | ({r.df_between}, {r.df_within}) | "
                     f"{r.p_value:.3g} | {'yes' if r.significant else 'no'} |")
    return "\n".join(lines) + "\n"
