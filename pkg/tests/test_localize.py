import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crackbench.dataset import SourceImage, grid_offsets
from crackbench.localize import (Detection, WindowConfig, detection_doc, iou, localize,
                                 merge_boxes, score_windows, slide)

from conftest import ConstModel, MarkerModel


def marked_image(h, w, y, x):
    px = np.full((h, w, 3), 128, np.uint8)
    px[y, x] = (255, 0, 0)
    return SourceImage(px, "marked")


def brute_union(h, w, win, stride, y, x):
    hits = [(r, c) for r in range(0, h - win + 1, stride) for c in range(0, w - win + 1, stride)
            if r <= y < r + win and c <= x < c + win]
    if not hits:
        return None
    r0, c0 = min(r for r, _ in hits), min(c for _, c in hits)
    r1, c1 = max(r for r, _ in hits) + win, max(c for _, c in hits) + win
    return Detection(c0, r0, c1 - c0, r1 - r0, 1.0)


def test_all_negative_stub():
    img = SourceImage(np.zeros((500, 500, 3), np.uint8))
    assert slide(ConstModel(0.0), img, WindowConfig(227, 100)) == []


def test_window_count_1000_by_800():
    img = SourceImage(np.zeros((1000, 800, 3), np.uint8))
    stub = ConstModel(1.0)
    dets = slide(stub, img, WindowConfig(227, 100))
    assert stub.calls == 48 == 8 * 6
    assert len(dets) == 48
    assert [(d.y, d.x) for d in dets] == sorted((d.y, d.x) for d in dets)


def test_image_smaller_than_window():
    assert slide(ConstModel(1.0), SourceImage(np.zeros((100, 300, 3), np.uint8)), WindowConfig(227, 50)) == []


def test_marked_pixel_boxes_contain_it():
    img = marked_image(800, 700, 300, 300)
    cfg = WindowConfig(227, 100)
    dets = slide(MarkerModel(), img, cfg)
    assert dets
    assert all(d.contains_point(300, 300) for d in dets)
    expected = {(r, c) for r, c in grid_offsets(800, 700, 227, 100)
                if r <= 300 < r + 227 and c <= 300 < c + 227}
    assert {(d.y, d.x) for d in dets} == expected


def test_batching_does_not_change_scores():
    rng = np.random.default_rng(0)
    img = SourceImage(rng.integers(0, 256, (400, 350, 3), dtype=np.uint8))

    class Mean:
        normalization = "unit_range"

        def predict(self, batch):
            return [float(a.mean()) for a in batch]

    a = score_windows(Mean(), img, WindowConfig(64, 30, batch_size=1))
    b = score_windows(Mean(), img, WindowConfig(64, 30, batch_size=1000))
    assert a == b


def test_cover_edges():
    img = SourceImage(np.zeros((300, 300, 3), np.uint8))
    stub = ConstModel(1.0)
    dets = slide(stub, img, WindowConfig(227, 227, cover_edges=True))
    assert stub.calls == 4
    assert max(d.x2 for d in dets) == 300 and max(d.y2 for d in dets) == 300


# -- IoU / merging -----------------------------------------------------------------

def test_iou_cases():
    a = Detection(0, 0, 100, 100, 0.9)
    b = Detection(50, 50, 100, 100, 0.8)
    assert iou(a, a) == 1.0
    assert iou(a, Detection(200, 200, 10, 10, 0.5)) == 0.0
    assert iou(a, Detection(100, 0, 10, 10, 0.5)) == 0.0  # touching edges
    assert iou(a, b) == pytest.approx(2500 / 17500, abs=1e-9)
    assert iou(a, b) == pytest.approx(0.142857, abs=1e-6)


def test_merge_examples():
    a = Detection(0, 0, 100, 100, 0.9)
    b = Detection(50, 50, 100, 100, 0.8)
    assert merge_boxes([]) == []
    assert merge_boxes([a, Detection(0, 0, 100, 100, 0.3)]) == [a]
    assert merge_boxes([a, b], 0.2) == [a, b]
    assert merge_boxes([a, b], 0.1) == [Detection(0, 0, 150, 150, 0.9)]


def random_boxes(rng, n):
    out = []
    for _ in range(n):
        w, h = rng.randint(1, 60), rng.randint(1, 60)
        out.append(Detection(rng.randint(0, 200), rng.randint(0, 200), w, h, rng.random()))
    return out


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(0, 25), thr=st.floats(0.01, 1.0))
def test_merge_properties(seed, n, thr):
    boxes = random_boxes(random.Random(seed), n)
    merged = merge_boxes(boxes, thr)
    assert len(merged) <= len(boxes)
    assert merge_boxes(merged, thr) == merged
    for b in boxes:
        assert any(m.contains(b) for m in merged)
    for i in range(len(merged)):
        for j in range(i + 1, len(merged)):
            assert iou(merged[i], merged[j]) < thr


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_iou_symmetric_and_identity(seed):
    rng = random.Random(seed)
    a, b = random_boxes(rng, 2)
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    same_geometry = (a.x, a.y, a.width, a.height) == (b.x, b.y, b.width, b.height)
    assert (iou(a, b) == 1.0) == same_geometry


def test_localize_merges_to_union_of_hits():
    img = marked_image(900, 900, 410, 377)
    cfg = WindowConfig(227, 100, iou_threshold=0.1)
    merged = localize(MarkerModel(), img, cfg)
    assert len(merged) == 1
    assert merged[0] == brute_union(900, 900, 227, 100, 410, 377)


def test_detection_doc_schema():
    doc = detection_doc("img.png", WindowConfig(), [Detection(1, 2, 3, 4, 0.5)])
    assert doc["image_id"] == "img.png"
    assert doc["detections"] == [{"x": 1, "y": 2, "width": 3, "height": 4, "score": 0.5}]
    assert doc["config"]["window_size"] == 227
