"""Raster primitives for the synthetic shapes datasets.

One filled shape on a flat background. Rendering is pure numpy, fills use
exact RGB values with no anti-aliasing, so attributes can be recovered from
pixels: the shape classifier re-renders each candidate shape into the
observed bounding box and picks the best IoU.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

BACKGROUND_RGB = (245, 245, 245)

COLOR_TABLE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (45, 80, 220),
    "yellow": (235, 200, 40),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
}

SHAPE_NAMES = ("circle", "square", "triangle", "cross")

# Alternate words a captioner might use for each shape. Canonical name first.
SHAPE_SYNONYMS: dict[str, tuple[str, ...]] = {
    "circle": ("circle", "disc"),
    "square": ("square", "box"),
    "triangle": ("triangle", "wedge"),
    "cross": ("cross", "plus"),
}

# Reverse lookup: any shape word -> canonical shape name.
SHAPE_WORD_TO_SHAPE: dict[str, str] = {
    word: shape for shape, words in SHAPE_SYNONYMS.items() for word in words
}


def shape_mask(shape: str, size: int, cx: int, cy: int, r: int) -> np.ndarray:
    """Boolean mask for ``shape`` centered at (cx, cy) with half-extent r."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if shape == "square":
        return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    if shape == "triangle":
        # isoceles, apex at top center, base along the bottom edge
        inside = (yy >= cy - r) & (yy <= cy + r)
        half_width = (yy - (cy - r)) / 2.0
        return inside & (np.abs(xx - cx) <= half_width)
    if shape == "cross":
        arm = max(1, int(round(r / 3)))
        horiz = (np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= r)
        vert = (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= r)
        return horiz | vert
    raise ValueError(f"unknown shape: {shape!r}")


def render_shape(shape: str, color: str, size: int, seed: int) -> np.ndarray:
    """Render one filled shape with seeded position/scale jitter.

    Jitter bounds keep the shape fully inside the frame. Returns an
    (size, size, 3) uint8 array.
    """
    if shape not in SHAPE_NAMES:
        raise ValueError(f"unknown shape: {shape!r}")
    if color not in COLOR_TABLE:
        raise ValueError(f"unknown color: {color!r}")
    rng = np.random.default_rng(seed)
    r = int(round(size * rng.uniform(0.20, 0.36)))
    cx = int(round(size / 2 + rng.uniform(-0.10, 0.10) * size))
    cy = int(round(size / 2 + rng.uniform(-0.10, 0.10) * size))
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    img[shape_mask(shape, size, cx, cy, max(2, r))] = COLOR_TABLE[color]
    return img


def classify_shape_image(img: np.ndarray) -> tuple[str, str]:
    """Recover (shape, color) from a rendered image.

    Color is the exact fill RGB of the foreground; shape is whichever
    candidate re-rendered into the observed bounding box overlaps best.
    Raises ValueError when the image does not look like a rendered shape.
    """
    fg = np.any(img != np.array(BACKGROUND_RGB, dtype=img.dtype), axis=-1)
    if not fg.any():
        raise ValueError("no foreground pixels")
    ys, xs = np.nonzero(fg)
    fill = img[ys[0], xs[0]]
    color = next(
        (name for name, rgb in COLOR_TABLE.items() if np.array_equal(fill, np.array(rgb))),
        None,
    )
    if color is None:
        raise ValueError(f"foreground color {tuple(int(v) for v in fill)} not in color table")

    size = img.shape[0]
    cx = int(round((xs.min() + xs.max()) / 2))
    cy = int(round((ys.min() + ys.max()) / 2))
    r = int(round(max(xs.max() - xs.min(), ys.max() - ys.min()) / 2))
    best_shape, best_iou = None, 0.0
    for shape in SHAPE_NAMES:
        cand = shape_mask(shape, size, cx, cy, max(2, r))
        inter = np.logical_and(fg, cand).sum()
        union = np.logical_or(fg, cand).sum()
        iou = inter / union if union else 0.0
        if iou > best_iou:
            best_shape, best_iou = shape, iou
    if best_shape is None or best_iou < 0.7:
        raise ValueError(f"foreground does not match any known shape (best IoU {best_iou:.2f})")
    return best_shape, color


def save_png(img: np.ndarray, path) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
