"""Procedural shape dataset so every test and smoke run works offline.

Each class is a (shape, colour) pair; instances vary in position, size,
colours and background noise.  Output follows the directory-per-class layout
read by :func:`mavrl.data.load_dataset`.
"""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SPLITS, write_manifest

SHAPES = (
    "disc", "ring", "square", "frame", "triangle", "plus", "cross", "diamond",
    "hstripes", "vstripes", "checker", "dots",
)
COLOURS = {
    "red": (0.85, 0.2, 0.2),
    "green": (0.2, 0.75, 0.25),
    "blue": (0.25, 0.35, 0.9),
    "yellow": (0.85, 0.8, 0.2),
    "cyan": (0.2, 0.75, 0.8),
    "magenta": (0.8, 0.25, 0.75),
    "white": (0.85, 0.85, 0.85),
    "orange": (0.9, 0.55, 0.15),
}


def _mask(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2
    cy = c + rng.uniform(-size / 8, size / 8)
    cx = c + rng.uniform(-size / 8, size / 8)
    r = size * rng.uniform(0.26, 0.36)
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        m = np.hypot(dy, dx) <= r
    elif shape == "ring":
        d = np.hypot(dy, dx)
        m = (d <= r) & (d >= r * 0.55)
    elif shape == "square":
        m = (abs(dy) <= r * 0.85) & (abs(dx) <= r * 0.85)
    elif shape == "frame":
        a = np.maximum(abs(dy), abs(dx))
        m = (a <= r * 0.9) & (a >= r * 0.5)
    elif shape == "triangle":
        m = (dy <= r * 0.7) & (dy >= -r) & (abs(dx) <= (dy + r) * 0.6)
    elif shape == "plus":
        w = r * 0.3
        m = ((abs(dy) <= w) & (abs(dx) <= r)) | ((abs(dx) <= w) & (abs(dy) <= r))
    elif shape == "cross":
        w = r * 0.35
        m = ((abs(dy - dx) <= w) | (abs(dy + dx) <= w)) & (np.maximum(abs(dy), abs(dx)) <= r)
    elif shape == "diamond":
        m = abs(dy) + abs(dx) <= r * 1.2
    elif shape == "hstripes":
        m = (np.floor(yy / 3) % 2 == 0) & (np.maximum(abs(dy), abs(dx)) <= r * 1.1)
    elif shape == "vstripes":
        m = (np.floor(xx / 3) % 2 == 0) & (np.maximum(abs(dy), abs(dx)) <= r * 1.1)
    elif shape == "checker":
        m = ((np.floor(yy / 3) + np.floor(xx / 3)) % 2 == 0) & (np.maximum(abs(dy), abs(dx)) <= r * 1.1)
    elif shape == "dots":
        m = ((yy % 4) < 2) & ((xx % 4) < 2) & (np.hypot(dy, dx) <= r * 1.2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def draw_image(shape: str, colour: str, size: int, rng: np.random.Generator, noise: float = 0.06) -> np.ndarray:
    """One H×W×3 float image in [0, 1]."""
    bg = rng.uniform(0.1, 0.35, size=3)
    fg = np.clip(np.asarray(COLOURS[colour]) + rng.normal(0, 0.05, size=3), 0, 1)
    m = _mask(shape, size, rng)[..., None]
    img = np.where(m, fg, bg) + rng.normal(0, noise, size=(size, size, 3))
    return np.clip(img, 0, 1)


def class_names(n_classes: int, seed: int = 0) -> list[str]:
    combos = [f"{s}_{c}" for s, c in itertools.product(SHAPES, COLOURS)]
    if n_classes > len(combos):
        raise ValueError(f"at most {len(combos)} fixture classes available, asked for {n_classes}")
    order = np.random.default_rng(seed).permutation(len(combos))
    return [combos[i] for i in order[:n_classes]]


def default_split_counts(n_classes: int) -> tuple[int, int, int]:
    # same 64/16/20 proportions as CIFAR-FS
    val = round(n_classes * 0.16)
    test = round(n_classes * 0.20)
    return n_classes - val - test, val, test


def make_fixture(
    out_dir: str | Path,
    n_classes: int = 8,
    images_per_class: int = 30,
    size: int = 16,
    split_counts: tuple[int, int, int] | None = None,
    seed: int = 0,
    noise: float = 0.06,
) -> Path:
    """Write a synthetic dataset plus ``splits.txt`` and ``fixture.json``.

    Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names(n_classes, seed)
    counts = split_counts or default_split_counts(n_classes)
    if sum(counts) != n_classes:
        raise ValueError(f"split counts {counts} do not sum to {n_classes}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    for name in names:
        shape, colour = name.split("_")
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        for i in range(images_per_class):
            arr = draw_image(shape, colour, size, rng, noise)
            Image.fromarray((arr * 255).round().astype(np.uint8)).save(cdir / f"{i:04d}.png")
    sections, start = {}, 0
    for split, k in zip(SPLITS, counts):
        sections[split] = names[start:start + k]
        start += k
    manifest = out / "splits.txt"
    write_manifest(manifest, sections)
    meta = {
        "n_classes": n_classes,
        "images_per_class": images_per_class,
        "image_shape": [size, size, 3],
        "seed": seed,
        "noise": noise,
        "splits": {s: len(v) for s, v in sections.items()},
    }
    (out / "fixture.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest
