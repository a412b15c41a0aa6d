"""Synthetic oriented-shapes caption dataset.

Every image shows one upright shape (arrow, triangle, tee, ell) in one of
six colors on a dark featureless background, so the only orientation cue
is the shape itself; rotation prediction stays well posed while shape
class and color drive captions and probe labels.  Output is byte-stable
per seed: an ``images/`` directory, a ``manifest.tsv`` of caption records,
and a ``labels.tsv`` of shape classes.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import derive_seed, new_rng
from .errors import DataError
from .imageio import save_image

SHAPES = ("arrow", "triangle", "tee", "ell")

COLORS = {
    "red": (220, 45, 45),
    "green": (45, 200, 70),
    "blue": (55, 95, 230),
    "yellow": (235, 215, 55),
    "magenta": (210, 60, 200),
    "cyan": (60, 205, 215),
}

# One phrasing per shape class, so a caption is a pure function of image
# content (color + shape) and same-looking images never get conflicting
# captions; the four templates also give four distinct token lengths.
CAPTION_TEMPLATES = {
    "arrow": "a {color} arrow pointing up .",
    "triangle": "a {color} triangle on a dark background .",
    "tee": "there is a {color} tee in the picture .",
    "ell": "the image shows a {color} ell shape .",
}


def _shape_mask(shape: str, size: int, cy: float, cx: float, a: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    if shape == "arrow":
        head = (dy >= -a) & (dy <= -0.1 * a) & (np.abs(dx) <= 0.62 * (dy + a) / 0.9)
        shaft = (np.abs(dx) <= 0.18 * a) & (dy >= -0.1 * a) & (dy <= a)
        return head | shaft
    if shape == "triangle":
        return (dy >= -a) & (dy <= a) & (np.abs(dx) <= 0.85 * a * (dy + a) / (2 * a))
    if shape == "tee":
        bar = (np.abs(dy + 0.7 * a) <= 0.22 * a) & (np.abs(dx) <= 0.85 * a)
        stem = (np.abs(dx) <= 0.22 * a) & (dy >= -0.7 * a) & (dy <= a)
        return bar | stem
    if shape == "ell":
        stem = (np.abs(dx + 0.55 * a) <= 0.22 * a) & (dy >= -a) & (dy <= a)
        foot = (np.abs(dy - 0.78 * a) <= 0.22 * a) & (dx >= -0.55 * a) & (dx <= 0.85 * a)
        return stem | foot
    raise DataError(f"unknown shape {shape!r}")


def render_shape_image(shape: str, color: tuple[int, int, int], size: int,
                       cy: float, cx: float, a: float, background: int) -> np.ndarray:
    pixels = np.full((size, size, 3), background, dtype=np.uint8)
    mask = _shape_mask(shape, size, cy, cx, a)
    pixels[mask] = np.array(color, dtype=np.uint8)
    return pixels


def make_synthetic(out_dir: str | Path, n: int, seed: int, size: int = 32,
                   image_format: str = "ppm") -> dict:
    """Generate the dataset; returns summary counts for logging."""
    if n < 1:
        raise DataError(f"need at least one image, got n={n}")
    if size < 16:
        raise DataError(f"image size must be >= 16, got {size}")
    if image_format not in ("ppm", "png"):
        raise DataError(f"image format must be 'ppm' or 'png', got {image_format!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = new_rng(derive_seed(seed, "synthetic"))
    color_names = sorted(COLORS)
    manifest_lines: list[str] = []
    label_lines: list[str] = []
    for i in range(n):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        color_name = color_names[int(rng.integers(0, len(color_names)))]
        cy = size / 2 + float(rng.uniform(-size / 10, size / 10))
        cx = size / 2 + float(rng.uniform(-size / 10, size / 10))
        a = float(rng.uniform(0.28, 0.38)) * size
        background = int(rng.integers(8, 40))
        pixels = render_shape_image(shape, COLORS[color_name], size, cy, cx, a, background)
        rel = f"images/img_{i:04d}.{image_format}"
        save_image(out_dir / rel, pixels)
        caption = CAPTION_TEMPLATES[shape].format(color=color_name)
        manifest_lines.append(f"{rel}\t{caption}")
        label_lines.append(f"{rel}\t{shape}")
    (out_dir / "manifest.tsv").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    (out_dir / "labels.tsv").write_text("\n".join(label_lines) + "\n", encoding="utf-8")
    return {"images": n, "size": size, "classes": len(SHAPES), "format": image_format}


def load_labels(path: str | Path) -> dict[str, str]:
    """Read a ``<relative_image_path>\\t<class>`` label file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"labels file not found: {path}")
    labels: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise DataError(f"{path}:{lineno}: expected '<image>\\t<class>'")
        labels[parts[0].strip()] = parts[1].strip()
    if not labels:
        raise DataError(f"{path}: no labels found")
    return labels
