"""PNG overlay rendering for human inspection of session outputs."""
from __future__ import annotations

import numpy as np

from irsis.backends import Detection
from irsis.mask import BinaryMask, BoundingBox

__all__ = ["overlay_mask", "draw_box", "render_session_overlay", "mask_to_image"]

MASK_COLOR = (255, 80, 60)
OK_BOX_COLOR = (90, 220, 90)
LOW_BOX_COLOR = (255, 60, 60)
CLINICIAN_BOX_COLOR = (80, 150, 255)


def mask_to_image(mask: BinaryMask) -> np.ndarray:
    """Binary mask as an 8-bit grayscale-looking RGB image."""
    a = mask.to_array().astype(np.uint8) * 255
    return np.stack([a, a, a], axis=-1)


def overlay_mask(image: np.ndarray, mask: BinaryMask,
                 color: tuple[int, int, int] = MASK_COLOR,
                 alpha: float = 0.45) -> np.ndarray:
    """Alpha-blend a mask tint onto a copy of the image."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    out = np.asarray(image).astype(np.float64).copy()
    sel = mask.to_array()
    tint = np.asarray(color, dtype=np.float64)
    out[sel] = (1.0 - alpha) * out[sel] + alpha * tint
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def draw_box(image: np.ndarray, box: BoundingBox,
             color: tuple[int, int, int], thickness: int = 1) -> np.ndarray:
    """Outline a half-open box in place-copy; the outline sits inside the box."""
    out = np.asarray(image).copy()
    h, w = out.shape[:2]
    x0, y0 = max(0, box.x0), max(0, box.y0)
    x1, y1 = min(w, box.x1), min(h, box.y1)
    t = max(1, thickness)
    c = np.asarray(color, dtype=np.uint8)
    out[y0:min(y0 + t, y1), x0:x1] = c
    out[max(y1 - t, y0):y1, x0:x1] = c
    out[y0:y1, x0:min(x0 + t, x1)] = c
    out[y0:y1, max(x1 - t, x0):x1] = c
    return out


def render_session_overlay(image: np.ndarray, mask: BinaryMask,
                           detections: list[Detection] = (),
                           low_boxes: tuple[int, ...] = ()) -> np.ndarray:
    """Mask tint plus detection outlines; low-overlap boxes drawn in red,
    clinician boxes in blue, the rest in green."""
    out = overlay_mask(image, mask)
    low = set(low_boxes)
    for i, det in enumerate(detections):
        if i in low:
            color = LOW_BOX_COLOR
        elif det.label == "clinician":
            color = CLINICIAN_BOX_COLOR
        else:
            color = OK_BOX_COLOR
        out = draw_box(out, det.box, color)
    return out
