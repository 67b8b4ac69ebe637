import json

import numpy as np
from PIL import Image

from crackbench.report import build_report


def write_doc(results, root, backbone, mode, seed, acc, misclassified=()):
    doc = {"backbone": backbone, "mode": mode, "seed": seed, "dataset_root": str(root),
           "metrics": {"accuracy": acc, "precision": acc, "recall": acc, "f1": acc},
           "confusion": {"tp": 1, "fp": 0, "tn": 1, "fn": 0},
           "per_epoch": [{"epoch": 1, "train_loss": 0.5, "train_accuracy": 0.8, "val_accuracy": acc}],
           "misclassified": list(misclassified)}
    (results / f"{backbone}__{mode}__seed{seed}.json").write_text(json.dumps(doc))


def setup(tmp_path, with_fp):
    root = tmp_path / "data"
    (root / "Negative").mkdir(parents=True)
    Image.fromarray(np.full((8, 8, 3), 90, np.uint8)).save(root / "Negative" / "n1.png")
    results = tmp_path / "results"
    results.mkdir()
    fp = [{"path": "Negative/n1.png", "label": "negative", "score": 0.8125, "kind": "false_positive",
           "low_confidence": False}] if with_fp else []
    write_doc(results, root, "VGG19", "fine_tune_all", 0, 0.92, fp)
    write_doc(results, root, "VGG19", "fine_tune_all", 1, 0.924)
    write_doc(results, root, "ResNet50", "fine_tune_all", 0, 0.99)
    write_doc(results, root, "ResNet50", "fine_tune_all", 1, 0.996)
    return results


def test_empty_gallery_section(tmp_path):
    rep = build_report(setup(tmp_path, False), tmp_path / "rep")
    text = (tmp_path / "rep" / "report.md").read_text()
    assert rep.gallery == []
    assert "## Misclassified test patches" in text and "No misclassified test patches." in text


def test_single_false_positive_gallery(tmp_path):
    rep = build_report(setup(tmp_path, True), tmp_path / "rep")
    assert len(rep.gallery) == 1
    files = list((tmp_path / "rep" / "gallery").iterdir())
    assert [f.name for f in files] == ["001_false_positive_0.8125_VGG19_fine_tune_all_seed0_n1.png"]
    assert files[0].read_bytes() == (tmp_path / "data" / "Negative" / "n1.png").read_bytes()
    assert (tmp_path / "rep" / "figures" / "gallery.png").is_file()


def test_table_cells_and_column_order(tmp_path):
    build_report(setup(tmp_path, False), tmp_path / "rep")
    md = (tmp_path / "rep" / "tables" / "fine_tune_all.md").read_text().splitlines()
    assert md[0].replace(" ", "") == "|Model|Accuracy|Precision|Recall|F1|"
    # registry order: VGG19 before ResNet50
    assert md[2].startswith("| VGG19") and md[3].startswith("| ResNet50")
    assert "0.922±0.0028" in md[2]


def test_report_regenerates_byte_identical(tmp_path):
    results = setup(tmp_path, True)
    build_report(results, tmp_path / "a")
    build_report(results, tmp_path / "b")
    build_report(results, tmp_path / "a")
    fa = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    fb = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert fa == fb and any(str(p).endswith(".png") for p in fa)
    for rel in fa:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_anova_section(tmp_path):
    rep = build_report(setup(tmp_path, False), tmp_path / "rep")
    assert set(rep.anova["fine_tune_all"]) == {"accuracy", "precision", "recall", "f1"}
    doc = json.loads((tmp_path / "rep" / "comparison.json").read_text())
    assert doc["fine_tune_all"]["accuracy"]["df"] == [1, 2]
