"""Class palette and overlay rendering for inference dumps."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

# label id -> RGB; drivable water is deliberately red
PALETTE = {
    0: (0, 0, 0),
    1: (70, 140, 255),   # boat
    2: (255, 200, 40),   # buoy
    3: (170, 90, 220),   # pier
    4: (230, 40, 40),    # drivable
}
_FALLBACK = (200, 200, 200)


def palette_color(label: int) -> tuple:
    return PALETTE.get(int(label), _FALLBACK)


def to_display(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    arr = np.clip(image, 0.0, 1.0)
    return (arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def overlay_mask(img: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend palette colors over labeled pixels; label 0 stays untouched."""
    out = img.astype(np.float64).copy()
    for label in np.unique(mask):
        if label == 0:
            continue
        color = np.array(palette_color(int(label)), dtype=np.float64)
        sel = mask == label
        out[sel] = (1 - alpha) * out[sel] + alpha * color
    return (out + 0.5).astype(np.uint8)


def draw_box(img: np.ndarray, box, color: tuple, thickness: int = 1) -> None:
    """In-place 1px-or-thicker rectangle, clipped to the canvas."""
    h, w = img.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, x2 = sorted((max(0, min(w - 1, x1)), max(0, min(w - 1, x2))))
    y1, y2 = sorted((max(0, min(h - 1, y1)), max(0, min(h - 1, y2))))
    c = np.array(color, dtype=img.dtype)
    for t in range(thickness):
        xa, xb = min(x1 + t, x2), max(x2 - t, x1)
        ya, yb = min(y1 + t, y2), max(y2 - t, y1)
        img[ya, xa:xb + 1] = c
        img[yb, xa:xb + 1] = c
        img[ya:yb + 1, xa] = c
        img[ya:yb + 1, xb] = c


def overlay_boxes(img: np.ndarray, boxes: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Detector boxes (0-based class ids) on a copy of the image."""
    out = img.copy()
    for box, cls in zip(np.asarray(boxes).reshape(-1, 4), np.atleast_1d(classes)):
        draw_box(out, box, palette_color(int(cls) + 1))
    return out


def save_png(path: str, arr: np.ndarray) -> None:
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_overlays(out_dir: str, image: np.ndarray, pred_mask: np.ndarray,
                   boxes: np.ndarray, classes: np.ndarray) -> dict:
    """Render mask and box overlays into out_dir; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    base = to_display(image)
    paths = {"mask": os.path.join(out_dir, "mask_overlay.png"),
             "boxes": os.path.join(out_dir, "box_overlay.png")}
    save_png(paths["mask"], overlay_mask(base, pred_mask))
    save_png(paths["boxes"], overlay_boxes(base, boxes, classes))
    return paths
