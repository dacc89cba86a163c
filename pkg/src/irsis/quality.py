"""Mask quality scoring against detected boxes, and the pass/fail gate.

Coverage is the fraction of the pixel-set union of all boxes that the mask
covers; overlapping boxes are never double counted because the union is a
single bit set.  Per-box overlap is the covered fraction of each box.  The
gate requires coverage strictly above tau_c and every per-box overlap
strictly above tau_o; sitting exactly on a threshold fails.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from irsis.mask import BinaryMask, BoundingBox

__all__ = [
    "QualityThresholds",
    "QualityReport",
    "coverage",
    "box_overlap",
    "evaluate",
    "select_target_boxes",
]


@dataclass(frozen=True)
class QualityThresholds:
    tau_c: float = 0.85
    tau_o: float = 0.50

    def __post_init__(self) -> None:
        for name in ("tau_c", "tau_o"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")


@dataclass(frozen=True)
class QualityReport:
    coverage: float
    per_box_overlap: tuple[tuple[int, float], ...]
    gate: bool
    low_boxes: tuple[int, ...]
    box_union_area: int

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "per_box_overlap": [[i, o] for i, o in self.per_box_overlap],
            "gate": self.gate,
            "low_boxes": list(self.low_boxes),
            "box_union_area": self.box_union_area,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        return cls(
            coverage=float(d["coverage"]),
            per_box_overlap=tuple((int(i), float(o)) for i, o in d["per_box_overlap"]),
            gate=bool(d["gate"]),
            low_boxes=tuple(int(i) for i in d["low_boxes"]),
            box_union_area=int(d["box_union_area"]),
        )


def _union_bits(boxes: Sequence[BoundingBox], width: int, height: int) -> int:
    bits = 0
    for b in boxes:
        bits |= BinaryMask.from_box(width, height, b).bits
    return bits


def coverage(mask: BinaryMask, boxes: Sequence[BoundingBox]) -> float:
    """Covered fraction of the pixel-set union of boxes."""
    if not boxes:
        raise ValueError("coverage needs at least one box; route empty detections separately")
    union = _union_bits(boxes, mask.width, mask.height)
    return (mask.bits & union).bit_count() / union.bit_count()


def box_overlap(mask: BinaryMask, box: BoundingBox) -> float:
    """Covered fraction of one box."""
    return mask.intersect_box(box).area / box.area


def evaluate(
    mask: BinaryMask,
    boxes: Sequence[BoundingBox],
    thresholds: QualityThresholds | None = None,
) -> QualityReport:
    """Score a mask against boxes and decide the gate.

    Indices in the report refer to positions in the supplied box sequence.
    """
    if not boxes:
        raise ValueError("evaluate needs at least one box; route empty detections separately")
    th = thresholds or QualityThresholds()
    for b in boxes:
        b.require_within(mask.width, mask.height)
    cov = coverage(mask, boxes)
    overlaps = tuple((i, box_overlap(mask, b)) for i, b in enumerate(boxes))
    low = tuple(i for i, o in overlaps if o <= th.tau_o)
    gate = cov > th.tau_c and not low
    return QualityReport(
        coverage=cov,
        per_box_overlap=overlaps,
        gate=gate,
        low_boxes=low,
        box_union_area=_union_bits(boxes, mask.width, mask.height).bit_count(),
    )


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def select_target_boxes(labels: Sequence[str | None], query: str) -> list[int]:
    """Indices of labels containing any query token; all indices when none match.

    Matching is case-insensitive substring containment of whole query tokens,
    so a narrow query gates only the boxes it names while a broad query that
    matches nothing falls back to gating every box.
    """
    tokens = _TOKEN_RE.findall(query.lower())
    matched = [
        i
        for i, lab in enumerate(labels)
        if lab is not None and any(tok in lab.lower() for tok in tokens)
    ]
    return matched if matched else list(range(len(labels)))
