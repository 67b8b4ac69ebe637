"""Procedural concrete-like patches with and without cracks.

Stand-in data for tests, demos and offline smoke runs when the real patch
corpus is not on disk. Backgrounds are smoothed gray noise with small dark
pores present in both classes; positives add one dark meandering crack.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .dataset import CLASS_DIRS, DEFAULT_PATCH_SIZE, NEGATIVE, POSITIVE


def _background(rng: np.random.Generator, h: int, w: int) -> Image.Image:
    base = rng.uniform(140, 205)
    tint = rng.normal(0, 4, size=3)
    noise = rng.normal(0, 1, size=(h, w)).astype(np.float32)
    im = Image.fromarray(np.uint8(np.clip(128 + 40 * noise, 0, 255)))
    im = im.filter(ImageFilter.GaussianBlur(rng.uniform(1.0, 2.5)))
    g = (np.asarray(im, dtype=np.float32) - 128) * rng.uniform(0.5, 1.2) + base
    rgb = np.clip(g[..., None] + tint, 0, 255).astype(np.uint8)
    out = Image.fromarray(rgb)
    draw = ImageDraw.Draw(out)
    for _ in range(int(rng.integers(0, 25))):
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(0.5, 2.5)
        v = int(rng.uniform(70, 130))
        draw.ellipse([x - r, y - r, x + r, y + r], fill=(v, v, v))
    return out


def _crack_path(rng: np.random.Generator, w: int, h: int) -> list:
    # start on one border, walk roughly across
    if rng.random() < 0.5:
        x, y, ang = 0.0, rng.uniform(0.2, 0.8) * h, rng.uniform(-0.6, 0.6)
    else:
        x, y, ang = rng.uniform(0.2, 0.8) * w, 0.0, np.pi / 2 + rng.uniform(-0.6, 0.6)
    pts = [(x, y)]
    step = max(3.0, w / 40)
    while 0 <= x <= w and 0 <= y <= h and len(pts) < 400:
        ang += rng.normal(0, 0.35)
        x += step * np.cos(ang)
        y += step * np.sin(ang)
        pts.append((x, y))
    return pts


def _crack(rng: np.random.Generator, im: Image.Image) -> None:
    w, h = im.size
    draw = ImageDraw.Draw(im)
    pts = _crack_path(rng, w, h)
    for _ in range(10):
        if len(pts) >= 15:
            break
        pts = _crack_path(rng, w, h)
    width = rng.uniform(1.5, 5.0)
    shade = int(rng.uniform(25, 80))
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        lw = max(1, int(round(width * rng.uniform(0.6, 1.3))))
        draw.line([(x0, y0), (x1, y1)], fill=(shade, shade, shade), width=lw)


def make_patch(rng: np.random.Generator, cracked: bool, size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    im = _background(rng, size, size)
    if cracked:
        _crack(rng, im)
        im = im.filter(ImageFilter.GaussianBlur(0.6))
    return np.asarray(im, dtype=np.uint8)


def write_corpus(root, n_per_class: int, size: int = DEFAULT_PATCH_SIZE, seed: int = 0) -> Path:
    """Write ``root/Positive`` and ``root/Negative`` with ``n_per_class`` PNG patches each."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label in (NEGATIVE, POSITIVE):
        d = root / CLASS_DIRS[label]
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            px = make_patch(rng, label == POSITIVE, size)
            Image.fromarray(px).save(d / f"{i:05d}.png")
    return root


def make_source_image(rng: np.random.Generator, height: int, width: int,
                      cracks: int = 1) -> np.ndarray:
    im = _background(rng, height, width)
    for _ in range(cracks):
        _crack(rng, im)
    return np.asarray(im, dtype=np.uint8)
