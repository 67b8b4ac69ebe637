"""Sliding-window crack localization and union-merging of overlapping boxes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import DEFAULT_PATCH_SIZE, SourceImage, grid_offsets, normalize


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_PATCH_SIZE // 2
    score_threshold: float = 0.5
    cover_edges: bool = False
    batch_size: int = 32
    iou_threshold: float = 0.1

    def __post_init__(self):
        if self.window_size < 1 or self.stride < 1:
            raise ValueError("window_size and stride must be >= 1")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class Detection:
    x: int
    y: int
    width: int
    height: int
    score: float

    @property
    def x2(self) -> int:
        return self.x + self.width

    @property
    def y2(self) -> int:
        return self.y + self.height

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains_point(self, x: int, y: int) -> bool:
        return self.x <= x < self.x2 and self.y <= y < self.y2

    def contains(self, other: "Detection") -> bool:
        return self.x <= other.x and self.y <= other.y and other.x2 <= self.x2 and other.y2 <= self.y2


def score_windows(model, image: SourceImage, cfg: WindowConfig) -> list[tuple[int, int, float]]:
    """(row, col, score) for every grid window, in row-major grid order."""
    px = image.pixels
    h, w = px.shape[:2]
    offsets = grid_offsets(h, w, cfg.window_size, cfg.stride, cfg.cover_edges)
    scheme = getattr(model, "normalization", "unit_range")
    ws = cfg.window_size
    out = []
    for i in range(0, len(offsets), cfg.batch_size):
        chunk = offsets[i:i + cfg.batch_size]
        batch = [normalize(px[r:r + ws, c:c + ws], scheme) for r, c in chunk]
        scores = model.predict(batch)
        if len(scores) != len(chunk):
            raise RuntimeError(f"model returned {len(scores)} scores for {len(chunk)} windows")
        out.extend((r, c, float(s)) for (r, c), s in zip(chunk, scores))
    return out


def slide(model, image: SourceImage, cfg: WindowConfig = WindowConfig()) -> list[Detection]:
    ws = cfg.window_size
    dets = [Detection(c, r, ws, ws, s) for r, c, s in score_windows(model, image, cfg)
            if s >= cfg.score_threshold]
    return sorted(dets, key=lambda d: (d.y, d.x))


def iou(a: Detection, b: Detection) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _union_box(members: Sequence[Detection]) -> Detection:
    x1 = min(d.x for d in members)
    y1 = min(d.y for d in members)
    x2 = max(d.x2 for d in members)
    y2 = max(d.y2 for d in members)
    return Detection(x1, y1, x2 - x1, y2 - y1, max(d.score for d in members))


def _merge_once(boxes: list[Detection], thr: float) -> list[Detection]:
    parent = list(range(len(boxes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if iou(boxes[i], boxes[j]) >= thr:
                parent[find(j)] = find(i)
    comps: dict[int, list[Detection]] = {}
    for i, b in enumerate(boxes):
        comps.setdefault(find(i), []).append(b)
    return [_union_box(m) for m in comps.values()]


def merge_boxes(detections: Sequence[Detection], iou_threshold: float = 0.1) -> list[Detection]:
    """Replace each connected group of boxes (IoU >= threshold) by its bounding union.

    Unions can newly overlap other boxes, so merging repeats until every
    output pair is below the threshold. The result is sorted by (y, x).
    """
    boxes = list(detections)
    while True:
        merged = _merge_once(boxes, iou_threshold)
        if len(merged) == len(boxes):
            break
        boxes = merged
    return sorted(merged, key=lambda d: (d.y, d.x, d.height, d.width))


def localize(model, image: SourceImage, cfg: WindowConfig = WindowConfig(),
             merge: bool = True) -> list[Detection]:
    dets = slide(model, image, cfg)
    return merge_boxes(dets, cfg.iou_threshold) if merge else dets


def detection_doc(image_id: str, cfg: WindowConfig, detections: Sequence[Detection],
                  raw_windows: Optional[int] = None) -> dict:
    doc = {
        "image_id": image_id,
        "config": asdict(cfg),
        "detections": [asdict(d) for d in detections],
    }
    if raw_windows is not None:
        doc["windows_evaluated"] = raw_windows
    return doc


def write_detections(path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def annotate(image: SourceImage, detections: Sequence[Detection], out_path,
             color=(255, 0, 0), width: int = 4) -> Path:
    """Burn detection boxes and scores into a copy of the image."""
    im = Image.fromarray(np.ascontiguousarray(image.pixels, dtype=np.uint8))
    draw = ImageDraw.Draw(im)
    for d in detections:
        draw.rectangle([d.x, d.y, d.x2 - 1, d.y2 - 1], outline=color, width=width)
        draw.text((d.x + width + 2, d.y + width + 2), f"{d.score:.2f}", fill=color)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    im.save(out_path)
    return out_path
