"""Segmentation scoring and the directory-against-directory evaluation harness.

Dice and IoU are computed from the same integer pixel counts, so their
algebraic relationship (iou = dice / (2 - dice)) holds to machine precision.
Two empty masks score 1.0 on both: agreeing on absence is agreement.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from irsis.mask import BinaryMask, IrleError

__all__ = ["ScorePair", "dice", "iou", "score_pair", "batch_eval", "format_report"]


@dataclass(frozen=True)
class ScorePair:
    dice: float
    iou: float


def _counts(a: BinaryMask, b: BinaryMask) -> tuple[int, int, int]:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")
    inter = (a.bits & b.bits).bit_count()
    return inter, a.area, b.area


def dice(a: BinaryMask, b: BinaryMask) -> float:
    inter, na, nb = _counts(a, b)
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    inter, na, nb = _counts(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


def score_pair(a: BinaryMask, b: BinaryMask) -> ScorePair:
    return ScorePair(dice=dice(a, b), iou=iou(a, b))


def _load_masks(directory: Path) -> tuple[dict[str, BinaryMask], list[str]]:
    masks: dict[str, BinaryMask] = {}
    bad: list[str] = []
    for path in sorted(directory.glob("*.irle")):
        try:
            masks[path.name] = BinaryMask.rle_decode(path.read_bytes())
        except IrleError:
            bad.append(path.name)
    return masks, bad


def batch_eval(pred_dir: str | Path, gt_dir: str | Path,
               labels: dict[str, str] | None = None) -> dict:
    """Score every *.irle file present in both directories, matched by name.

    labels optionally maps file names to class labels; per-class IoU averages
    over the files carrying that label and mean_class_iou is their unweighted
    macro mean.  The report is a plain dict with fully deterministic content:
    identical inputs produce byte-identical serializations.
    """
    preds, bad_pred = _load_masks(Path(pred_dir))
    gts, bad_gt = _load_masks(Path(gt_dir))
    matched = sorted(set(preds) & set(gts))
    unmatched = sorted((set(preds) ^ set(gts)) | set(bad_pred) | set(bad_gt))

    dices, ious = [], []
    by_class: dict[str, list[float]] = {}
    for name in matched:
        s = score_pair(preds[name], gts[name])
        dices.append(s.dice)
        ious.append(s.iou)
        if labels and name in labels:
            by_class.setdefault(labels[name], []).append(s.iou)

    def mean(xs: list[float]) -> float:
        return sum(xs) / len(xs) if xs else 0.0

    per_class = [
        {"label": lab, "iou": mean(vals), "n": len(vals)}
        for lab, vals in sorted(by_class.items())
    ]
    return {
        "n_images": len(matched),
        "mean_dice": mean(dices),
        "mean_iou": mean(ious),
        "per_class": per_class,
        "mean_class_iou": mean([c["iou"] for c in per_class]) if per_class else None,
        "unmatched": unmatched,
        "undecodable": sorted(set(bad_pred) | set(bad_gt)),
    }


def format_report(report: dict) -> str:
    """Canonical serialization: sorted keys, newline-terminated."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
