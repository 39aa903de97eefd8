"""Datasets: a built-in synthetic shape generator and an image-folder loader."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "diamond", "star")


def _shape_mask(kind: str, yy, xx, cy, cx, r, theta):
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy  # rotated coords
    if kind == "disk":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    if kind == "triangle":
        # equilateral, circumradius r
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = theta + math.pi / 2 + 2 * math.pi * k / 3
            inside &= (dx * math.cos(a) + dy * math.sin(a)) <= r / 2
        return inside
    if kind == "cross":
        arm = r * 0.3
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= r * 0.3)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= r
    if kind == "star":
        ang = np.arctan2(v, u)
        rad = r * (0.55 + 0.45 * np.cos(5 * ang))
        return dx ** 2 + dy ** 2 <= rad ** 2
    raise ValueError(kind)


def make_shapes(n: int, n_classes: int = 4, size: int = 64, seed: int = 0,
                noise: float = 0.06, rotate: bool = False, dark_background: bool = True):
    """Colored-shape images, class = shape kind.

    Foreground color, position and scale (and rotation if `rotate`) are random
    and carry no class information. With `dark_background` the background is
    a dim gray so the shape is always the brighter region; otherwise the
    background color is random too. Returns (uint8 images (n, 3, size, size),
    int64 labels (n,)); labels are balanced.
    """
    if not 1 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [1, {len(SHAPES)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    images = np.empty((n, 3, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        if dark_background:
            bg = np.full(3, rng.uniform(0.05, 0.25))
            fg = rng.uniform(0.0, 1.0, 3)
            fg = 0.45 + 0.55 * fg / fg.max()
        else:
            bg = rng.uniform(0.0, 1.0, 3)
            fg = rng.uniform(0.0, 1.0, 3)
            while np.abs(fg - bg).sum() < 0.6:
                fg = rng.uniform(0.0, 1.0, 3)
        r = rng.uniform(0.2, 0.34) * size
        cy, cx = rng.uniform(r, size - r, 2)
        theta = rng.uniform(0, 2 * math.pi) if rotate else 0.0
        m = _shape_mask(SHAPES[lab], yy, xx, cy, cx, r, theta)
        img = np.where(m[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def load_image_folder(root, labels_file="labels.csv", size: int | None = None):
    """Load images listed in ``labels.csv`` (columns: filename,label) under `root`."""
    from PIL import Image

    root = Path(root)
    images, labels = [], []
    with open(root / labels_file, newline="") as fh:
        for row in csv.DictReader(fh):
            im = Image.open(root / row["filename"]).convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.uint8).transpose(2, 0, 1))
            labels.append(int(row["label"]))
    return np.stack(images), np.asarray(labels, dtype=np.int64)
