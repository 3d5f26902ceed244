"""Procedurally drawn two-class corpus for smoke tests and demos.

Peer images are soft ellipses on plain backgrounds; target images are
triangles. Both are drawn at 4x and downsampled so edges are antialiased.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw


def _color(rng: np.random.Generator) -> tuple[int, int, int]:
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def draw_shape(kind: str, resolution: int, rng: np.random.Generator) -> Image.Image:
    size = resolution * 4
    img = Image.new("RGB", (size, size), _color(rng))
    draw = ImageDraw.Draw(img)
    cx, cy = rng.uniform(0.3, 0.7, size=2) * size
    r = rng.uniform(0.15, 0.35) * size
    if kind == "ellipse":
        aspect = rng.uniform(0.6, 1.4)
        draw.ellipse([cx - r, cy - r * aspect, cx + r, cy + r * aspect], fill=_color(rng))
    elif kind == "triangle":
        angle = rng.uniform(0, 2 * np.pi)
        pts = [(cx + r * np.cos(angle + k * 2 * np.pi / 3), cy + r * np.sin(angle + k * 2 * np.pi / 3))
               for k in range(3)]
        draw.polygon(pts, fill=_color(rng))
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return img.resize((resolution, resolution), Image.LANCZOS)


def make_synthetic_corpus(root: str | Path, n_peer: int = 500, n_target: int = 10, resolution: int = 32,
                          seed: int = 0) -> Path:
    """Write ``root/peer``, ``root/target`` and ``root/labels.txt``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for name, kind, count in (("peer", "ellipse", n_peer), ("target", "triangle", n_target)):
        sub = root / name
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            draw_shape(kind, resolution, rng).save(sub / f"{i:05d}.png")
    (root / "labels.txt").write_text("a photo of a round blob\na photo of a triangle\n")
    return root
