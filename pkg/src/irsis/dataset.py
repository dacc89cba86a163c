"""Annotation corpus: multi-level labels, prompt expansion, and validation.

A corpus is a JSONL file: one image record per line, each holding instrument
entries with a mask file reference and three query labels of increasing
specificity (l0 generic, l1 category, l2 specific).  Expansion turns every
instrument annotation into three training samples, one per level, in a
canonical order that does not depend on input order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from irsis.images import encode_png
from irsis.mask import BinaryMask, IrleError
from irsis.scene import GENERIC_LABEL, InstrumentLabels, random_scene, render_scene

logger = logging.getLogger(__name__)

LEVELS = (0, 1, 2)

__all__ = [
    "InstrumentAnnotation",
    "ExpandedSample",
    "ExpansionResult",
    "CorpusValidation",
    "load_corpus",
    "expand",
    "write_expanded",
    "load_expanded",
    "validate_corpus",
    "build_synthetic_corpus",
    "LEVELS",
]


@dataclass(frozen=True)
class InstrumentAnnotation:
    """One instrument in one image; index is its position within the image record."""

    image_id: str
    image_file: str
    index: int
    mask_file: str
    labels: InstrumentLabels

    def label_at(self, level: int) -> str:
        if level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {level}")
        return self.labels.all()[level]


@dataclass(frozen=True)
class ExpandedSample:
    image_id: str
    query: str
    level: int
    mask_file: str

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "query": self.query,
                "level": self.level, "mask_file": self.mask_file}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpandedSample":
        s = cls(str(d["image_id"]), str(d["query"]), int(d["level"]), str(d["mask_file"]))
        if s.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}, got {s.level}")
        return s


@dataclass
class ExpansionResult:
    samples: list[ExpandedSample]
    skipped: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _parse_record(line_no: int, obj: dict,
                  annotations: list[InstrumentAnnotation], errors: list[str]) -> None:
    try:
        image_id = str(obj["image_id"])
        image_file = str(obj["image_file"])
        instruments = obj["instruments"]
    except (KeyError, TypeError) as exc:
        errors.append(f"line {line_no}: missing field {exc}")
        return
    if not isinstance(instruments, list):
        errors.append(f"line {line_no}: instruments must be a list")
        return
    for idx, inst in enumerate(instruments):
        try:
            labels = InstrumentLabels(str(inst["l0"]), str(inst["l1"]), str(inst["l2"]))
            mask_file = str(inst["mask_file"])
        except (KeyError, TypeError) as exc:
            errors.append(f"line {line_no}: instrument {idx}: missing field {exc}")
            continue
        if not mask_file:
            errors.append(f"line {line_no}: instrument {idx}: empty mask_file")
            continue
        annotations.append(InstrumentAnnotation(image_id, image_file, idx, mask_file, labels))


def load_corpus(path: str | Path) -> tuple[list[InstrumentAnnotation], list[str]]:
    """Parse a corpus JSONL file; bad lines produce error strings, not raises."""
    path = Path(path)
    annotations: list[InstrumentAnnotation] = []
    errors: list[str] = []
    seen_ids: dict[str, int] = {}
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            errors.append(f"line {line_no}: invalid JSON: {exc.msg}")
            continue
        image_id = str(obj.get("image_id", "")) if isinstance(obj, dict) else ""
        if image_id and image_id in seen_ids:
            errors.append(
                f"line {line_no}: duplicate image_id {image_id!r} "
                f"(first seen at line {seen_ids[image_id]})"
            )
            continue
        if image_id:
            seen_ids[image_id] = line_no
        if not isinstance(obj, dict):
            errors.append(f"line {line_no}: record must be an object")
            continue
        _parse_record(line_no, obj, annotations, errors)
    return annotations, errors


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------

def expand(annotations: list[InstrumentAnnotation]) -> ExpansionResult:
    """Three samples per annotation, one per label level.

    Output order is canonical: (image_id, annotation index, level), so any
    permutation of the input yields the identical sample list.  Annotations
    with a missing level label are skipped and reported, never half-expanded.
    """
    result = ExpansionResult(samples=[])
    for ann in sorted(annotations, key=lambda a: (a.image_id, a.index)):
        missing = [lvl for lvl in LEVELS if not ann.label_at(lvl).strip()]
        if missing:
            result.skipped.append(
                f"{ann.image_id}[{ann.index}]: missing label at level "
                + ", ".join(str(lvl) for lvl in missing)
            )
            continue
        for lvl in LEVELS:
            result.samples.append(ExpandedSample(
                image_id=ann.image_id,
                query=ann.label_at(lvl),
                level=lvl,
                mask_file=ann.mask_file,
            ))
    return result


def write_expanded(samples: list[ExpandedSample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def load_expanded(path: str | Path) -> list[ExpandedSample]:
    out = []
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            out.append(ExpandedSample.from_dict(json.loads(raw)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}: line {line_no}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass
class CorpusValidation:
    ok: bool
    images: int
    annotations: int
    expanded: int
    divisible_by_3: bool
    vocabulary: dict[str, list[str]]
    errors: list[str]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "images": self.images,
            "annotations": self.annotations,
            "expanded": self.expanded,
            "divisible_by_3": self.divisible_by_3,
            "vocabulary": self.vocabulary,
            "errors": self.errors,
        }


def _check_mask_files(root: Path, annotations: list[InstrumentAnnotation],
                      errors: list[str]) -> None:
    dims: dict[str, tuple[int, int]] = {}
    for ann in annotations:
        where = f"{ann.image_id}[{ann.index}]"
        if ann.image_file not in dims:
            img_path = root / ann.image_file
            if not img_path.exists():
                errors.append(f"{where}: image file {ann.image_file} not found")
                continue
            with Image.open(img_path) as im:
                dims[ann.image_file] = im.size
        mask_path = root / ann.mask_file
        if not mask_path.exists():
            errors.append(f"{where}: mask file {ann.mask_file} not found")
            continue
        try:
            m = BinaryMask.rle_decode(mask_path.read_text())
        except IrleError as exc:
            errors.append(f"{where}: undecodable mask {ann.mask_file}: {exc}")
            continue
        if (m.width, m.height) != dims.get(ann.image_file, (m.width, m.height)):
            w, h = dims[ann.image_file]
            errors.append(
                f"{where}: mask is {m.width}x{m.height}, image is {w}x{h}")
        elif m.area == 0:
            errors.append(f"{where}: mask {ann.mask_file} is empty")


def validate_corpus(path: str | Path, check_masks: bool = False,
                    expanded_path: str | Path | None = None) -> CorpusValidation:
    """Corpus statistics plus schema, mask, and expansion consistency checks.

    check_masks resolves every mask file against its image's dimensions;
    expanded_path cross-checks a previously written expansion for drift.
    """
    path = Path(path)
    annotations, errors = load_corpus(path)
    result = expand(annotations)
    errors.extend(result.skipped)
    if check_masks:
        _check_mask_files(path.parent, annotations, errors)
    if expanded_path is not None:
        try:
            on_disk = load_expanded(expanded_path)
        except ValueError as exc:
            errors.append(str(exc))
        else:
            if on_disk != result.samples:
                errors.append(
                    f"expanded file {expanded_path} disagrees with expansion "
                    f"({len(on_disk)} samples on disk vs {len(result.samples)} computed)"
                )
    vocabulary = {
        f"l{lvl}": sorted({a.label_at(lvl) for a in annotations})
        for lvl in LEVELS
    }
    expanded_count = len(result.samples)
    return CorpusValidation(
        ok=not errors,
        images=len({a.image_id for a in annotations}),
        annotations=len(annotations),
        expanded=expanded_count,
        divisible_by_3=expanded_count % 3 == 0,
        vocabulary=vocabulary,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# synthetic fixture corpus
# ---------------------------------------------------------------------------

def build_synthetic_corpus(root: str | Path, n_images: int, seed: int = 0,
                           n_instruments: int | None = None) -> Path:
    """Write a complete scene-generator corpus under root; returns the JSONL path.

    Layout: images/<id>.png, masks/<id>_<index>.irle, corpus.jsonl.  Purely a
    function of (seed, n_images, n_instruments).
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    corpus_path = root / "corpus.jsonl"
    with corpus_path.open("w") as fh:
        for i in range(n_images):
            spec = random_scene(seed=seed + i, n_instruments=n_instruments)
            image, truths = render_scene(spec)
            image_id = f"scene_{seed + i:05d}"
            image_file = f"images/{image_id}.png"
            (root / image_file).write_bytes(encode_png(image))
            instruments = []
            for idx, (m, labels) in enumerate(truths):
                mask_file = f"masks/{image_id}_{idx}.irle"
                (root / mask_file).write_bytes(m.rle_encode())
                instruments.append({
                    "mask_file": mask_file,
                    "l0": labels.l0 or GENERIC_LABEL,
                    "l1": labels.l1,
                    "l2": labels.l2,
                })
            fh.write(json.dumps({
                "image_id": image_id,
                "image_file": image_file,
                "instruments": instruments,
            }, sort_keys=True) + "\n")
    return corpus_path
