"""Training numerics: composite loss terms with analytic gradients, assignment
matching, and the learning-rate schedule generator.

Nothing here runs gradient descent.  The point is verifiable math: every
gradient is checked against finite differences, the matcher against brute
force, and the schedule against hand arithmetic, so an external trainer can
consume these numbers with confidence.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import cos, pi
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

__all__ = [
    "LossWeights",
    "FocalParams",
    "MatchSpec",
    "LrSchedule",
    "ParamGroup",
    "focal_loss",
    "dice_loss",
    "presence_loss",
    "composite_loss",
    "hungarian_match",
    "one_to_many_augment",
    "group_peak_lr",
    "lr_at",
    "emit_schedule",
    "format_schedule",
    "train_config",
    "P_CLAMP",
    "DICE_SMOOTH",
]

P_CLAMP = 1e-6
DICE_SMOOTH = 1.0


# =====================================================================
# configuration types
# =====================================================================

@dataclass(frozen=True)
class LossWeights:
    """Per-term weights of the composite loss.  Defaults are the large-scale
    preset; tenth_scale() is the same ratios at one tenth the magnitude."""

    w_mask: float = 50.0
    w_dice: float = 10.0
    w_ce: float = 20.0
    w_presence: float = 20.0

    def __post_init__(self) -> None:
        for name in ("w_mask", "w_dice", "w_ce", "w_presence"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def tenth_scale(cls) -> "LossWeights":
        return cls(5.0, 1.0, 2.0, 2.0)

    def to_dict(self) -> dict:
        return {"w_mask": self.w_mask, "w_dice": self.w_dice,
                "w_ce": self.w_ce, "w_presence": self.w_presence}


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma_f: float = 2.0

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma_f < 0:
            raise ValueError(f"gamma_f must be >= 0, got {self.gamma_f}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "gamma_f": self.gamma_f}


@dataclass(frozen=True)
class MatchSpec:
    """Matching configuration; the cost matrix travels separately as data."""

    topk: int = 4
    one_to_many_weight: float = 2.0

    def __post_init__(self) -> None:
        if self.topk < 0:
            raise ValueError("topk must be >= 0")
        if self.one_to_many_weight < 0:
            raise ValueError("one_to_many_weight must be >= 0")

    def to_dict(self) -> dict:
        return {"topk": self.topk, "one_to_many_weight": self.one_to_many_weight}


@dataclass(frozen=True)
class LrSchedule:
    decoder_lr: float = 8e-5
    backbone_lr: float = 2.5e-5
    layer_decay: float = 0.98
    warmup_epochs: int = 30
    decay_epochs: int = 30
    cooldown_epochs: int = 30
    floor_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.decoder_lr < 0 or self.backbone_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not (0.0 < self.layer_decay <= 1.0):
            raise ValueError("layer_decay must lie in (0, 1]")
        for name in ("warmup_epochs", "decay_epochs", "cooldown_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0.0 <= self.floor_fraction <= 1.0):
            raise ValueError("floor_fraction must lie in [0, 1]")

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.decay_epochs + self.cooldown_epochs

    def to_dict(self) -> dict:
        return {
            "decoder_lr": self.decoder_lr,
            "backbone_lr": self.backbone_lr,
            "layer_decay": self.layer_decay,
            "warmup_epochs": self.warmup_epochs,
            "decay_epochs": self.decay_epochs,
            "cooldown_epochs": self.cooldown_epochs,
            "floor_fraction": self.floor_fraction,
        }


GROUP_KINDS = ("decoder", "backbone", "text")


@dataclass(frozen=True)
class ParamGroup:
    name: str
    kind: str
    depth_from_top: int = 0

    def __post_init__(self) -> None:
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"kind must be one of {GROUP_KINDS}, got {self.kind!r}")
        if self.depth_from_top < 0:
            raise ValueError("depth_from_top must be >= 0")


# =====================================================================
# loss terms
# =====================================================================

def _check_pair(p, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs targets {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("targets must be binary")
    return p, y


def focal_loss(p, y, fp: FocalParams | None = None) -> tuple[float, np.ndarray]:
    """Mean focal loss over pixels and its analytic gradient wrt p.

    Probabilities are clamped to [P_CLAMP, 1 - P_CLAMP]; at clamped entries
    the gradient is 0 (the clamp is flat there).
    """
    fp = fp or FocalParams()
    p, y = _check_pair(p, y)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    pos = y > 0.5
    pt = np.where(pos, pc, 1.0 - pc)
    at = np.where(pos, fp.alpha, 1.0 - fp.alpha)
    log_pt = np.log(pt)
    focus = (1.0 - pt) ** fp.gamma_f
    value = float(np.mean(-at * focus * log_pt))

    # d/dpt of -a (1-pt)^g log pt, then chain through pt = p or 1-p
    d_pt = at * (fp.gamma_f * (1.0 - pt) ** (fp.gamma_f - 1.0) * log_pt - focus / pt)
    sign = np.where(pos, 1.0, -1.0)
    inside = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    grad = np.where(inside, sign * d_pt / p.size, 0.0)
    return value, grad


def dice_loss(p, y) -> tuple[float, np.ndarray]:
    """Soft dice loss with smooth constant DICE_SMOOTH, and its gradient wrt p.

    No interior clamp: the expression has no singularity on [0, 1], and the
    smooth constant alone makes the empty-vs-empty case exactly zero.
    """
    p, y = _check_pair(p, y)
    pc = np.clip(p, 0.0, 1.0)
    num = 2.0 * float((pc * y).sum()) + DICE_SMOOTH
    den = float(pc.sum()) + float(y.sum()) + DICE_SMOOTH
    value = 1.0 - num / den
    inside = (p >= 0.0) & (p <= 1.0)
    grad = np.where(inside, (num - 2.0 * y * den) / (den * den), 0.0)
    return value, grad


def presence_loss(logit: float, exists: bool) -> tuple[float, float]:
    """Binary cross-entropy with logits in log-sum-exp form; never overflows."""
    z = float(logit)
    t = 1.0 if exists else 0.0
    value = float(np.logaddexp(0.0, z)) - z * t
    grad = float(expit(z)) - t
    return value, grad


def composite_loss(components: Sequence[float], weights: LossWeights | None = None) -> float:
    """Weighted sum of (mask, dice, ce, presence) component values."""
    w = weights or LossWeights()
    vals = tuple(float(c) for c in components)
    if len(vals) != 4:
        raise ValueError(f"expected 4 components (mask, dice, ce, presence), got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise ValueError("component values must be finite")
    return (w.w_mask * vals[0] + w.w_dice * vals[1]
            + w.w_ce * vals[2] + w.w_presence * vals[3])


# =====================================================================
# matching
# =====================================================================

def _opt_cost(c: np.ndarray) -> float:
    if min(c.shape) == 0:
        return 0.0
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].sum())


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of min(n, m) (row, column) pairs.

    Among all optimal assignments, returns the one whose row-sorted pair list
    is lexicographically smallest: ties prefer the lowest row, then the lowest
    column.  The optimum comes from scipy; the tie-break layer fixes pairs
    greedily and verifies each fix preserves the optimal total.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost must be a 2-d matrix, got shape {c.shape}")
    n, m = c.shape
    k = min(n, m)
    if k == 0:
        return []
    if not np.isfinite(c).all():
        raise ValueError("costs must be finite")

    pairs: list[tuple[int, int]] = []
    avail = list(range(m))
    for r in range(n):
        if len(pairs) == k:
            break
        rest_rows = list(range(r + 1, n))
        target = _opt_cost(c[np.ix_([r] + rest_rows, avail)])
        tol = 1e-9 * max(1.0, abs(target))
        chosen = None
        for col in avail:
            sub = c[np.ix_(rest_rows, [cc for cc in avail if cc != col])]
            if abs(c[r, col] + _opt_cost(sub) - target) <= tol:
                chosen = col
                break
        if chosen is None:
            # row r stays unassigned; only legal when enough rows remain
            assert len(rest_rows) >= k - len(pairs), "no consistent assignment found"
            continue
        pairs.append((r, chosen))
        avail.remove(chosen)
    return pairs


def one_to_many_augment(cost, base_assignment: Sequence[tuple[int, int]],
                        topk: int = 4, weight: float = 2.0) -> list[tuple[int, int, float]]:
    """Base pairs at sample weight 1.0, plus per-target extra predictions.

    For every ground-truth column, its topk lowest-cost prediction rows other
    than the one the base assignment already gave it are appended at the extra
    weight.  Output order: base pairs as given, then extras by (column, cost,
    row) ascending.  topk larger than the candidate pool takes everything.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost must be a 2-d matrix, got shape {c.shape}")
    if topk < 0:
        raise ValueError("topk must be >= 0")
    n, m = c.shape
    base_by_gt = {g: p for p, g in base_assignment}
    out = [(int(p), int(g), 1.0) for p, g in base_assignment]
    for g in range(m):
        own = base_by_gt.get(g)
        ranked = sorted((r for r in range(n) if r != own), key=lambda r: (c[r, g], r))
        for r in ranked[:topk]:
            out.append((r, g, float(weight)))
    return out


# =====================================================================
# learning-rate schedule
# =====================================================================

def group_peak_lr(spec: LrSchedule, group: ParamGroup) -> float:
    """Peak lr for a group: the text encoder is frozen, the backbone decays
    geometrically with depth from the top."""
    if group.kind == "decoder":
        return spec.decoder_lr
    if group.kind == "backbone":
        return spec.backbone_lr * spec.layer_decay ** group.depth_from_top
    return 0.0


def lr_at(spec: LrSchedule, epoch: int, peak: float) -> float:
    """lr at a 1-based epoch: linear warmup to peak, cosine decay to the
    floor, then a constant cooldown at the floor."""
    if not (1 <= epoch <= spec.total_epochs):
        raise ValueError(f"epoch must lie in [1, {spec.total_epochs}], got {epoch}")
    w, d = spec.warmup_epochs, spec.decay_epochs
    floor = spec.floor_fraction * peak
    if epoch <= w:
        return peak * epoch / w
    if epoch <= w + d:
        phase = (epoch - w) / d
        return floor + (peak - floor) * 0.5 * (1.0 + cos(pi * phase))
    return floor


def emit_schedule(spec: LrSchedule,
                  groups: Sequence[ParamGroup]) -> list[tuple[int, str, float]]:
    """Full (epoch, group name, lr) table, epochs major, groups in given order."""
    rows = []
    for epoch in range(1, spec.total_epochs + 1):
        for g in groups:
            rows.append((epoch, g.name, lr_at(spec, epoch, group_peak_lr(spec, g))))
    return rows


def format_schedule(rows: Sequence[tuple[int, str, float]]) -> str:
    """Tab-separated text table with a header line; trainer-agnostic."""
    lines = ["epoch\tgroup\tlr"]
    for epoch, name, lr in rows:
        lines.append(f"{epoch}\t{name}\t{lr:.12g}")
    return "\n".join(lines) + "\n"


def train_config(weights: LossWeights | None = None,
                 focal: FocalParams | None = None,
                 match: MatchSpec | None = None,
                 schedule: LrSchedule | None = None) -> dict:
    """All training hyperparameters as one plain dict, ready to serialize."""
    return {
        "loss_weights": (weights or LossWeights()).to_dict(),
        "focal": (focal or FocalParams()).to_dict(),
        "matching": (match or MatchSpec()).to_dict(),
        "lr_schedule": (schedule or LrSchedule()).to_dict(),
    }
