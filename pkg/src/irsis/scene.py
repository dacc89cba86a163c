"""Deterministic synthetic surgical scenes with exact ground-truth masks.

Scenes hold instrument shapes (capsules, wedges, axis-aligned bands) with a
three-level label per instrument.  Rendering rasterizes each shape exactly at
pixel centres, then applies photometric perturbations (gamma, specular blobs,
shadow bands) to the image only; returned ground-truth masks are the
pre-perturbation rasterizations.  Rendering is a pure function of the
SceneSpec, so two renders of the same scene are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from irsis.mask import BinaryMask

__all__ = [
    "InstrumentLabels",
    "InstrumentSpec",
    "PerturbationSpec",
    "SceneSpec",
    "render_scene",
    "rasterize",
    "random_scene",
    "apply_gamma",
    "INSTRUMENT_CATALOG",
]

# (l1 category, l2 specific) pairs; l0 is always the generic phrase.
INSTRUMENT_CATALOG: tuple[tuple[str, str], ...] = (
    ("forceps", "bipolar forceps"),
    ("scissors", "curved scissors"),
    ("driver", "needle driver"),
    ("suction", "suction tube"),
    ("retractor", "grasping retractor"),
    ("hook", "cautery hook"),
)

GENERIC_LABEL = "surgical instrument"

_PALETTE = (
    (188, 192, 200),
    (150, 158, 170),
    (205, 200, 182),
    (170, 175, 192),
    (140, 150, 146),
    (214, 208, 204),
)


@dataclass(frozen=True)
class InstrumentLabels:
    l0: str
    l1: str
    l2: str

    def all(self) -> tuple[str, str, str]:
        return (self.l0, self.l1, self.l2)


@dataclass(frozen=True)
class InstrumentSpec:
    """One instrument: a shape plus its label hierarchy.

    shape 'capsule': points (p0, p1), pixels within Euclidean `radius` of the segment.
    shape 'band': axis-aligned polyline `points`, pixels within Chebyshev `radius`
        of any segment (axis-aligned segments rasterize to exact rectangles).
    shape 'wedge': triangle `points`, filled.
    """

    shape: str
    points: tuple[tuple[float, float], ...]
    radius: float
    labels: InstrumentLabels

    def __post_init__(self) -> None:
        if self.shape not in ("capsule", "band", "wedge"):
            raise ValueError(f"unknown shape {self.shape!r}")
        need = {"capsule": 2, "wedge": 3}.get(self.shape)
        if need is not None and len(self.points) != need:
            raise ValueError(f"{self.shape} needs {need} points, got {len(self.points)}")
        if self.shape == "band" and len(self.points) < 2:
            raise ValueError("band needs at least 2 points")


@dataclass(frozen=True)
class PerturbationSpec:
    """Photometric perturbations; each applies with its own seeded probability."""

    gamma: float = 1.0
    p_gamma: float = 0.5
    p_specular: float = 0.3
    p_shadow: float = 0.3
    max_specular_blobs: int = 3

    def __post_init__(self) -> None:
        if not (0.8 <= self.gamma <= 1.2):
            raise ValueError(f"gamma must lie in [0.8, 1.2], got {self.gamma}")
        for name in ("p_gamma", "p_specular", "p_shadow"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    width: int = 160
    height: int = 120
    instruments: tuple[InstrumentSpec, ...] = ()
    perturbations: PerturbationSpec = field(default_factory=PerturbationSpec)

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError("scene canvas must be at least 8x8")


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _segment_euclidean_dist(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        return np.hypot(px - ax, py - ay)
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _segment_chebyshev_dist(px, py, a, b):
    # Axis-aligned segments only: excess along the axis, plus perpendicular offset.
    ax, ay = a
    bx, by = b
    if ay == by:
        x0, x1 = min(ax, bx), max(ax, bx)
        along = np.maximum(0.0, np.maximum(x0 - px, px - x1))
        perp = np.abs(py - ay)
    elif ax == bx:
        y0, y1 = min(ay, by), max(ay, by)
        along = np.maximum(0.0, np.maximum(y0 - py, py - y1))
        perp = np.abs(px - ax)
    else:
        raise ValueError("band segments must be axis-aligned")
    return np.maximum(along, perp)


def rasterize(spec: InstrumentSpec, width: int, height: int) -> BinaryMask:
    """Exact pixel-centre rasterization of one instrument."""
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs + 0.5
    py = ys + 0.5
    if spec.shape == "capsule":
        inside = _segment_euclidean_dist(px, py, spec.points[0], spec.points[1]) <= spec.radius
    elif spec.shape == "band":
        inside = np.zeros((height, width), dtype=bool)
        for a, b in zip(spec.points, spec.points[1:]):
            inside |= _segment_chebyshev_dist(px, py, a, b) <= spec.radius
    else:  # wedge
        (x0, y0), (x1, y1), (x2, y2) = spec.points
        d0 = (px - x0) * (y1 - y0) - (py - y0) * (x1 - x0)
        d1 = (px - x1) * (y2 - y1) - (py - y1) * (x2 - x1)
        d2 = (px - x2) * (y0 - y2) - (py - y2) * (x0 - x2)
        inside = ((d0 <= 0) & (d1 <= 0) & (d2 <= 0)) | ((d0 >= 0) & (d1 >= 0) & (d2 >= 0))
    return BinaryMask.from_array(inside)


# ---------------------------------------------------------------------------
# photometrics
# ---------------------------------------------------------------------------

def apply_gamma(img: np.ndarray, gamma: float) -> np.ndarray:
    """8-bit gamma curve: out = round(255 * (in / 255) ** gamma)."""
    lut = np.round(255.0 * (np.arange(256) / 255.0) ** gamma).astype(np.uint8)
    return lut[img]


def _apply_specular(img: np.ndarray, rng: np.random.Generator, max_blobs: int) -> np.ndarray:
    h, w = img.shape[:2]
    out = img.astype(np.int16)
    n = int(rng.integers(1, max_blobs + 1))
    for _ in range(n):
        cx = float(rng.uniform(0, w))
        cy = float(rng.uniform(0, h))
        r = float(rng.uniform(2, 6))
        ys, xs = np.mgrid[0:h, 0:w]
        blob = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
        out[blob] += 90
    return np.clip(out, 0, 255).astype(np.uint8)


def _apply_shadow(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h = img.shape[0]
    y0 = int(rng.integers(0, max(1, h - 8)))
    y1 = int(min(h, y0 + rng.integers(6, max(7, h // 3))))
    out = img.astype(np.float64)
    out[y0:y1] *= 0.6
    return np.round(out).astype(np.uint8)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_scene(spec: SceneSpec) -> tuple[np.ndarray, list[tuple[BinaryMask, InstrumentLabels]]]:
    """Render to an RGB uint8 image plus exact per-instrument ground truth."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    base = np.array([152, 82, 88], dtype=np.float64)
    tint = rng.uniform(-18, 18, size=3)
    gy = np.linspace(-12, 12, h)[:, None, None]
    gx = np.linspace(-8, 8, w)[None, :, None]
    img = np.clip(base + tint + gy + gx, 0, 255)
    img = np.round(img * np.ones((h, w, 3))).astype(np.uint8)

    truths: list[tuple[BinaryMask, InstrumentLabels]] = []
    for i, inst in enumerate(spec.instruments):
        m = rasterize(inst, w, h)
        truths.append((m, inst.labels))
        color = np.array(_PALETTE[i % len(_PALETTE)], dtype=np.uint8)
        img[m.to_array()] = color

    pert = spec.perturbations
    if rng.random() < pert.p_gamma:
        img = apply_gamma(img, pert.gamma)
    if rng.random() < pert.p_specular:
        img = _apply_specular(img, rng, pert.max_specular_blobs)
    if rng.random() < pert.p_shadow:
        img = _apply_shadow(img, rng)
    return img, truths


# ---------------------------------------------------------------------------
# seeded scene construction
# ---------------------------------------------------------------------------

def _cell_layout(n: int, width: int, height: int) -> list[tuple[int, int, int, int]]:
    if n == 0:
        return []
    cols = 2
    rows = (n + 1) // 2
    cw, ch = width // cols, height // rows
    return [((i % cols) * cw, (i // cols) * ch, cw, ch) for i in range(n)]


def random_scene(
    seed: int,
    n_instruments: int | None = None,
    width: int = 160,
    height: int = 120,
    shapes: tuple[str, ...] = ("capsule", "band", "wedge"),
    axis_aligned: bool = False,
    gamma_span: tuple[float, float] = (0.8, 1.2),
    perturb: bool = True,
) -> SceneSpec:
    """Build a scene spec deterministically from a seed.

    Instruments are placed one per layout cell so shapes never overlap.  With
    axis_aligned=True only rectangular bands are produced, whose tight boxes
    they fill exactly; useful where box-fill ratios must stay high.
    """
    rng = np.random.default_rng(seed)
    n = n_instruments if n_instruments is not None else int(rng.integers(2, 4))
    order = rng.permutation(len(INSTRUMENT_CATALOG))[:n]
    instruments = []
    for idx, (x0, y0, cw, ch) in zip(order, _cell_layout(n, width, height)):
        l1, l2 = INSTRUMENT_CATALOG[int(idx)]
        labels = InstrumentLabels(GENERIC_LABEL, l1, l2)
        shape = str(rng.choice(shapes)) if not axis_aligned else "band"
        margin = 10
        if shape == "band" and axis_aligned:
            # rectangle: one axis-aligned segment with square caps
            thick = int(rng.integers(4, 7))  # half thickness -> total 8..12 px
            if rng.random() < 0.5:
                y = y0 + ch // 2 + int(rng.integers(-4, 5))
                xa = x0 + margin + thick
                xb = x0 + cw - margin - thick
                pts = ((float(xa), float(y)), (float(xb), float(y)))
            else:
                x = x0 + cw // 2 + int(rng.integers(-4, 5))
                ya = y0 + margin + thick
                yb = y0 + ch - margin - thick
                pts = ((float(x), float(ya)), (float(x), float(yb)))
            instruments.append(InstrumentSpec("band", pts, float(thick), labels))
            continue
        cx = x0 + cw / 2 + float(rng.uniform(-4, 4))
        cy = y0 + ch / 2 + float(rng.uniform(-4, 4))
        if shape == "capsule":
            half = float(rng.uniform(cw * 0.18, cw * 0.3))
            ang = float(rng.uniform(0, np.pi))
            dx, dy = half * np.cos(ang), half * np.sin(ang) * 0.5
            r = float(rng.uniform(3.5, 6.0))
            pts = ((cx - dx, cy - dy), (cx + dx, cy + dy))
            instruments.append(InstrumentSpec("capsule", pts, r, labels))
        elif shape == "band":
            thick = float(rng.integers(3, 6))
            y = cy
            pts = ((x0 + margin + thick, y), (x0 + cw - margin - thick, y))
            instruments.append(InstrumentSpec("band", pts, thick, labels))
        else:
            s = float(rng.uniform(10, min(cw, ch) / 2 - 6))
            pts = ((cx - s, cy + s * 0.8), (cx + s, cy + s * 0.6), (cx, cy - s))
            instruments.append(InstrumentSpec("wedge", pts, 0.0, labels))
    gamma = float(rng.uniform(*gamma_span))
    pert = PerturbationSpec(gamma=gamma) if perturb else PerturbationSpec(
        gamma=1.0, p_gamma=0.0, p_specular=0.0, p_shadow=0.0
    )
    return SceneSpec(seed=seed, width=width, height=height,
                     instruments=tuple(instruments), perturbations=pert)
