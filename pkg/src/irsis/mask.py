"""Bit-packed binary rasters with exact set algebra, morphology and run-length IO.

A mask is stored row-major in a single arbitrary-precision integer: bit
``y * width + x`` holds pixel ``(x, y)``.  Set operations are single bitwise
ops on the packed word, so areas and overlaps are exact integer counts by
construction.  Boxes are half-open: ``x0 <= x < x1`` and ``y0 <= y < y1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BinaryMask",
    "BoundingBox",
    "StructuringElement",
    "IrleError",
    "erode",
    "dilate",
]


class IrleError(ValueError):
    """Raised when an IRLE v1 payload cannot be parsed or is inconsistent."""


# ---------------------------------------------------------------------------
# packed-word helpers
# ---------------------------------------------------------------------------

@lru_cache(maxsize=2048)
def _full(w: int, h: int) -> int:
    return (1 << (w * h)) - 1


@lru_cache(maxsize=2048)
def _row_replicator(w: int, h: int) -> int:
    # 1 bit set at column 0 of every row
    return _full(w, h) // ((1 << w) - 1)


@lru_cache(maxsize=8192)
def _keep_after_left(w: int, h: int, d: int) -> int:
    # After << d, bits that crossed a row boundary land in columns < d.
    if d >= w:
        return 0
    return _full(w, h) ^ (((1 << d) - 1) * _row_replicator(w, h))


@lru_cache(maxsize=8192)
def _keep_after_right(w: int, h: int, d: int) -> int:
    if d >= w:
        return 0
    return _full(w, h) ^ ((((1 << d) - 1) << (w - d)) * _row_replicator(w, h))


def _shift_x(bits: int, w: int, h: int, d: int) -> int:
    """Translate content by d pixels along x; bits leaving the raster vanish."""
    if d == 0:
        return bits
    if d > 0:
        return (bits << d) & _keep_after_left(w, h, d)
    return (bits >> (-d)) & _keep_after_right(w, h, -d)


def _shift_y(bits: int, w: int, h: int, d: int) -> int:
    if d == 0:
        return bits
    if d > 0:
        return (bits << (d * w)) & _full(w, h)
    return bits >> ((-d) * w)


def _erode_bits(bits: int, w: int, h: int, r: int) -> int:
    """Erosion by a (2r+1)-sided square; outside the raster counts as background."""
    acc = bits
    for d in range(1, r + 1):
        acc &= _shift_x(bits, w, h, d) & _shift_x(bits, w, h, -d)
    out = acc
    for d in range(1, r + 1):
        out &= _shift_y(acc, w, h, d) & _shift_y(acc, w, h, -d)
    return out


def _dilate_bits(bits: int, w: int, h: int, r: int) -> int:
    acc = bits
    for d in range(1, r + 1):
        acc |= _shift_x(bits, w, h, d) | _shift_x(bits, w, h, -d)
    out = acc
    for d in range(1, r + 1):
        out |= _shift_y(acc, w, h, d) | _shift_y(acc, w, h, -d)
    return out


def _embed(bits: int, w: int, h: int, pad: int) -> int:
    """Copy a raster into the centre of a canvas padded by `pad` background pixels."""
    ww = w + 2 * pad
    row_mask = (1 << w) - 1
    out = 0
    for y in range(h):
        row = (bits >> (y * w)) & row_mask
        if row:
            out |= row << ((y + pad) * ww + pad)
    return out


def _extract(bits: int, w: int, h: int, pad: int) -> int:
    ww = w + 2 * pad
    row_mask = (1 << w) - 1
    out = 0
    for y in range(h):
        row = (bits >> ((y + pad) * ww + pad)) & row_mask
        if row:
            out |= row << (y * w)
    return out


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuringElement:
    """Square structuring element with an odd side length."""

    side: int = 5

    def __post_init__(self) -> None:
        if self.side < 1 or self.side % 2 == 0:
            raise ValueError(f"structuring element side must be odd and >= 1, got {self.side}")

    @property
    def radius(self) -> int:
        return self.side // 2


@dataclass(frozen=True)
class BoundingBox:
    """Half-open axis-aligned box: pixels with x0 <= x < x1 and y0 <= y < y1."""

    x0: int
    y0: int
    x1: int
    y1: int
    label: str | None = None
    confidence: float | None = None

    def __post_init__(self) -> None:
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise ValueError(f"box coordinate {name} must be an integer, got {v!r}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"box origin must be non-negative, got ({self.x0}, {self.y0})")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(
                f"box must satisfy x0 < x1 and y0 < y1, got ({self.x0},{self.y0},{self.x1},{self.y1})"
            )
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def within(self, width: int, height: int) -> bool:
        return self.x1 <= width and self.y1 <= height

    def require_within(self, width: int, height: int) -> None:
        if not self.within(width, height):
            raise ValueError(
                f"box ({self.x0},{self.y0},{self.x1},{self.y1}) exceeds raster {width}x{height}"
            )

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def scaled(self, s: int) -> "BoundingBox":
        return BoundingBox(self.x0 * s, self.y0 * s, self.x1 * s, self.y1 * s,
                           label=self.label, confidence=self.confidence)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_dict(cls, d: dict, label: str | None = None, confidence: float | None = None) -> "BoundingBox":
        try:
            return cls(int(d["x0"]), int(d["y0"]), int(d["x1"]), int(d["y1"]),
                       label=label, confidence=confidence)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed box payload: {d!r}") from exc


def _box_bits(box: BoundingBox, w: int, h: int) -> int:
    row = ((1 << (box.x1 - box.x0)) - 1) << box.x0
    out = 0
    for y in range(box.y0, box.y1):
        out |= row << (y * w)
    return out


@dataclass(frozen=True)
class BinaryMask:
    """Immutable bit-packed binary raster."""

    width: int
    height: int
    bits: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"mask dimensions must be positive, got {self.width}x{self.height}")
        if self.bits < 0 or self.bits > _full(self.width, self.height):
            raise ValueError("mask bits fall outside the raster")

    # -- construction -------------------------------------------------------

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(width, height, 0)

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(width, height, _full(width, height))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        a = np.asarray(arr)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-d array, got shape {a.shape}")
        h, w = a.shape
        flat = np.ascontiguousarray(a.astype(bool).reshape(-1))
        packed = np.packbits(flat, bitorder="little")
        return cls(w, h, int.from_bytes(packed.tobytes(), "little"))

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels: Iterable[tuple[int, int]]) -> "BinaryMask":
        bits = 0
        for x, y in pixels:
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError(f"pixel ({x},{y}) outside {width}x{height} raster")
            bits |= 1 << (y * width + x)
        return cls(width, height, bits)

    @classmethod
    def from_rows(cls, rows: Sequence[str]) -> "BinaryMask":
        """Build from strings of '0'/'1', one per row.  Handy in tests."""
        h = len(rows)
        w = len(rows[0])
        bits = 0
        for y, row in enumerate(rows):
            if len(row) != w:
                raise ValueError("rows must share one width")
            for x, ch in enumerate(row):
                if ch == "1":
                    bits |= 1 << (y * w + x)
                elif ch != "0":
                    raise ValueError(f"row characters must be 0 or 1, got {ch!r}")
        return cls(w, h, bits)

    @classmethod
    def from_box(cls, width: int, height: int, box: BoundingBox) -> "BinaryMask":
        box.require_within(width, height)
        return cls(width, height, _box_bits(box, width, height))

    # -- basic queries ------------------------------------------------------

    @property
    def area(self) -> int:
        return self.bits.bit_count()

    def get(self, x: int, y: int) -> bool:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"pixel ({x},{y}) outside {self.width}x{self.height} raster")
        return bool((self.bits >> (y * self.width + x)) & 1)

    def to_array(self) -> np.ndarray:
        n = self.width * self.height
        raw = self.bits.to_bytes((n + 7) // 8, "little")
        flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:n]
        return flat.reshape(self.height, self.width).astype(bool)

    def _check_dims(self, other: "BinaryMask") -> None:
        if (self.width, self.height) != (other.width, other.height):
            raise ValueError(
                f"mask dimensions differ: {self.width}x{self.height} vs {other.width}x{other.height}"
            )

    # -- set algebra --------------------------------------------------------

    def union(self, other: "BinaryMask") -> "BinaryMask":
        self._check_dims(other)
        return BinaryMask(self.width, self.height, self.bits | other.bits)

    def intersect(self, other: "BinaryMask") -> "BinaryMask":
        self._check_dims(other)
        return BinaryMask(self.width, self.height, self.bits & other.bits)

    def difference(self, other: "BinaryMask") -> "BinaryMask":
        self._check_dims(other)
        return BinaryMask(self.width, self.height, self.bits & ~other.bits)

    __or__ = union
    __and__ = intersect
    __sub__ = difference

    def intersect_box(self, box: BoundingBox) -> "BinaryMask":
        box.require_within(self.width, self.height)
        return BinaryMask(self.width, self.height, self.bits & _box_bits(box, self.width, self.height))

    def subtract_box(self, box: BoundingBox) -> "BinaryMask":
        box.require_within(self.width, self.height)
        return BinaryMask(self.width, self.height, self.bits & ~_box_bits(box, self.width, self.height))

    # -- geometry -----------------------------------------------------------

    def tight_box(self, label: str | None = None, confidence: float | None = None) -> BoundingBox | None:
        """Smallest half-open box containing every set pixel, or None if empty."""
        if self.bits == 0:
            return None
        a = self.to_array()
        ys, xs = np.nonzero(a)
        return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1,
                           label=label, confidence=confidence)

    def morph_open(self, se: StructuringElement | None = None) -> "BinaryMask":
        """Erosion then dilation; trims protrusions thinner than the element."""
        se = se or StructuringElement()
        r = se.radius
        if r == 0 or self.bits == 0:
            return self
        e = _erode_bits(self.bits, self.width, self.height, r)
        d = _dilate_bits(e, self.width, self.height, r)
        return BinaryMask(self.width, self.height, d)

    def morph_close(self, se: StructuringElement | None = None) -> "BinaryMask":
        """Dilation then erosion; fills gaps narrower than the element.

        Computed on a canvas padded with background so that content reaching
        the border is preserved (the raster edge itself never erodes pixels).
        """
        se = se or StructuringElement()
        r = se.radius
        if r == 0 or self.bits == 0:
            return self
        w, h = self.width + 2 * r, self.height + 2 * r
        padded = _embed(self.bits, self.width, self.height, r)
        d = _dilate_bits(padded, w, h, r)
        e = _erode_bits(d, w, h, r)
        return BinaryMask(self.width, self.height, _extract(e, self.width, self.height, r))

    def connected_components(self) -> list[tuple["BinaryMask", int]]:
        """8-connected components with areas, largest first.

        Grown word-parallel: each component is flooded by repeated one-pixel
        dilation intersected with the foreground until a fixed point.
        Ties in area break on the lowest set bit, so order is deterministic.
        """
        w, h = self.width, self.height
        remaining = self.bits
        comps: list[tuple[int, int, int]] = []
        while remaining:
            comp = remaining & -remaining
            while True:
                grown = _dilate_bits(comp, w, h, 1) & self.bits
                if grown == comp:
                    break
                comp = grown
            comps.append((comp.bit_count(), comp & -comp, comp))
            remaining &= ~comp
        comps.sort(key=lambda t: (-t[0], t[1]))
        return [(BinaryMask(w, h, c), a) for a, _, c in comps]

    # -- run-length wire format --------------------------------------------

    def rle_encode(self) -> bytes:
        """Serialize as IRLE v1: header line then alternating run lengths.

        Runs are row-major over the flat raster, background first (the leading
        background run may be zero), and always sum to width * height.
        """
        flat = self.to_array().reshape(-1).astype(np.int8)
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate(([0], change))
        ends = np.concatenate((change, [flat.size]))
        runs = (ends - starts).tolist()
        if flat[0]:
            runs.insert(0, 0)
        header = f"IRLE1 {self.width} {self.height}\n"
        return (header + ",".join(str(r) for r in runs) + "\n").encode("ascii")

    @classmethod
    def rle_decode(cls, payload: bytes | str) -> "BinaryMask":
        if isinstance(payload, bytes):
            try:
                text = payload.decode("ascii")
            except UnicodeDecodeError as exc:
                raise IrleError("IRLE payload is not ASCII") from exc
        else:
            text = payload
        lines = text.split("\n")
        if len(lines) < 2:
            raise IrleError("IRLE payload must carry a header line and a runs line")
        head = lines[0].split(" ")
        if len(head) != 3 or head[0] != "IRLE1":
            raise IrleError(f"malformed IRLE header: {lines[0]!r}")
        try:
            w, h = int(head[1]), int(head[2])
        except ValueError as exc:
            raise IrleError(f"malformed IRLE header: {lines[0]!r}") from exc
        if w < 1 or h < 1:
            raise IrleError(f"IRLE dimensions must be positive, got {w}x{h}")
        try:
            runs = [int(tok) for tok in lines[1].split(",")]
        except ValueError as exc:
            raise IrleError(f"malformed IRLE run list: {lines[1]!r}") from exc
        if any(r < 0 for r in runs):
            raise IrleError("IRLE runs must be non-negative")
        if sum(runs) != w * h:
            raise IrleError(f"IRLE runs sum to {sum(runs)}, expected {w * h}")
        values = np.fromiter(((i & 1) for i in range(len(runs))), dtype=np.uint8, count=len(runs))
        flat = np.repeat(values, runs)
        return cls.from_array(flat.reshape(h, w))


# ---------------------------------------------------------------------------
# standalone morphology steps (used by the corruption model)
# ---------------------------------------------------------------------------

def erode(m: BinaryMask, se: StructuringElement | None = None) -> BinaryMask:
    se = se or StructuringElement(3)
    if se.radius == 0:
        return m
    return BinaryMask(m.width, m.height, _erode_bits(m.bits, m.width, m.height, se.radius))


def dilate(m: BinaryMask, se: StructuringElement | None = None) -> BinaryMask:
    se = se or StructuringElement(3)
    if se.radius == 0:
        return m
    return BinaryMask(m.width, m.height, _dilate_bits(m.bits, m.width, m.height, se.radius))
