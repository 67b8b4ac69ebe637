import random
import statistics

import pytest
from hypothesis import given, strategies as st

from crackbench.metrics import (ConfusionMatrix, MetricVector, accuracy, aggregate, f1, f1_from,
                                format_cell, precision, recall, to_csv, to_markdown)

counts = st.integers(0, 50)


def test_worked_example():
    cm = ConfusionMatrix(tp=90, fp=10, tn=80, fn=20)
    assert accuracy(cm) == pytest.approx(0.85, abs=1e-12)
    assert precision(cm) == pytest.approx(0.9, abs=1e-12)
    assert recall(cm) == pytest.approx(90 / 110, abs=1e-12)
    assert recall(cm) == pytest.approx(0.818182, abs=1e-6)
    assert f1(cm) == pytest.approx(0.857143, abs=1e-6)


@pytest.mark.parametrize("cm, expected", [
    (ConfusionMatrix(10, 0, 0, 0), 1.0),
    (ConfusionMatrix(0, 0, 0, 0), None),
])
def test_accuracy_cases(cm, expected):
    assert accuracy(cm) == expected


def test_undefined_cases():
    assert precision(ConfusionMatrix(0, 0, 5, 5)) is None
    assert recall(ConfusionMatrix(0, 5, 5, 0)) is None
    assert precision(ConfusionMatrix(5, 0, 1, 1)) == 1.0
    assert recall(ConfusionMatrix(5, 1, 1, 0)) == 1.0
    assert f1(ConfusionMatrix(0, 3, 3, 3)) is None  # precision = recall = 0
    assert f1_from(1.0, 0.0) == 0.0
    assert f1_from(0.7, 0.7) == pytest.approx(0.7)
    assert f1_from(None, 0.5) is None


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)


@given(counts, counts, counts, counts)
def test_f1_bounds(tp, fp, tn, fn):
    cm = ConfusionMatrix(tp, fp, tn, fn)
    p, r, f = precision(cm), recall(cm), f1(cm)
    if f is not None:
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
        assert f <= (p + r) / 2 + 1e-12


@given(counts, counts, counts, counts)
def test_perfect_accuracy_iff_no_errors(tp, fp, tn, fn):
    cm = ConfusionMatrix(tp, fp, tn, fn)
    if cm.total:
        assert (accuracy(cm) == 1.0) == (fp == 0 and fn == 0)


def test_from_predictions():
    cm = ConfusionMatrix.from_predictions([1, 1, 0, 0, 1], [1, 0, 1, 0, 1])
    assert cm == ConfusionMatrix(tp=2, fp=1, tn=1, fn=1)


def test_aggregate_two_runs():
    runs = [MetricVector(0.9, 1, 1, 1), MetricVector(1.0, 1, 1, 1)]
    agg = aggregate(runs)
    assert agg["accuracy"].mean == pytest.approx(0.95)
    assert agg["accuracy"].std == pytest.approx(0.070711, abs=1e-6)
    assert agg["precision"].std == 0.0


def test_aggregate_single_run_std_zero():
    agg = aggregate([MetricVector(0.7, 0.6, 0.5, 0.4)])
    assert all(s.std == 0.0 and s.n == 1 for s in agg.values())


def test_aggregate_excludes_undefined():
    agg = aggregate([MetricVector(0.5, None, 1.0, None), MetricVector(0.7, 0.8, 1.0, 0.9)])
    assert agg["precision"].n == 1 and agg["precision"].excluded == 1
    assert agg["accuracy"].n + agg["accuracy"].excluded == 2
    none = aggregate([MetricVector(0.5, None, None, None)])
    assert none["f1"].mean is None and none["f1"].excluded == 1


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_permutation_invariant():
    rng = random.Random(0)
    runs = [MetricVector(rng.random(), rng.random(), rng.random(), rng.random()) for _ in range(9)]
    base = aggregate(runs)
    for _ in range(20):
        rng.shuffle(runs)
        assert aggregate(runs) == base


def test_aggregate_matches_statistics_module():
    vals = [0.91, 0.93, 0.925, 0.94, 0.918]
    agg = aggregate([MetricVector(v, v, v, v) for v in vals])
    assert agg["f1"].mean == pytest.approx(statistics.mean(vals), abs=1e-15)
    assert agg["f1"].std == pytest.approx(statistics.stdev(vals), abs=1e-15)


@pytest.mark.parametrize("mean, std, cell", [
    (0.996, 0.0042, "0.996±0.0042"),
    (0.922, 0.0028, "0.922±0.0028"),
    (0.947, 0.0020, "0.947±0.0020"),
    (0.989, 0.00098, "0.989±0.00098"),
    (0.973, 0.016, "0.973±0.016"),
    (0.5, 0.0, "0.500±0"),
    (None, None, "undefined"),
])
def test_cell_format(mean, std, cell):
    assert format_cell(mean, std) == cell


def test_table_exports():
    agg = {"VGG19": aggregate([MetricVector(0.9, 1.0, 0.8, 0.85), MetricVector(0.95, 1.0, 0.9, 0.9)])}
    md = to_markdown(agg)
    assert md.splitlines()[0].replace(" ", "") == "|Model|Accuracy|Precision|Recall|F1|"
    assert "0.925±0.035" in md
    csv_text = to_csv(agg)
    assert csv_text.splitlines()[0].startswith("model,accuracy_mean,accuracy_std")
    assert csv_text.splitlines()[1].startswith("VGG19,0.925")
