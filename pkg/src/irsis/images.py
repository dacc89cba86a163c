"""PNG and base64 helpers for the 8-bit RGB images crossing module boundaries."""
from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image

__all__ = ["encode_png", "decode_png", "image_to_b64", "image_from_b64"]


def encode_png(img: np.ndarray) -> bytes:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3 or a.dtype != np.uint8:
        raise ValueError(f"expected an HxWx3 uint8 image, got shape {a.shape} dtype {a.dtype}")
    buf = io.BytesIO()
    Image.fromarray(a, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    if not data:
        raise ValueError("empty PNG payload")
    try:
        with Image.open(io.BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise ValueError(f"undecodable PNG payload: {exc}") from exc


def image_to_b64(img: np.ndarray) -> str:
    return base64.b64encode(encode_png(img)).decode("ascii")


def image_from_b64(text: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception as exc:
        raise ValueError(f"invalid base64 image payload: {exc}") from exc
    return decode_png(raw)
