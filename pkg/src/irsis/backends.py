"""Segmentation and detection backends: contracts, seeded mocks, and the HTTP client.

The agent speaks to two narrow interfaces: a segmenter (image + text or box
prompt -> mask and score) and a detector (image + prompt -> labelled boxes).
The oracle implementations answer from a scene's exact ground truth; the
noisy segmenter corrupts the oracle answer through a seeded corruption model;
the remote client speaks the JSON-over-HTTP wire protocol.  All mock
behaviour is deterministic: same seed and inputs, bit-identical outputs.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np
import requests

from irsis.images import image_to_b64
from irsis.mask import BinaryMask, BoundingBox, IrleError, StructuringElement, dilate, erode
from irsis.scene import SceneSpec, render_scene

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_SECS = 30.0

__all__ = [
    "BackendError",
    "BackendUnreachable",
    "BackendTimeout",
    "MalformedResponse",
    "SegmentRequest",
    "Detection",
    "Segmenter",
    "Detector",
    "OracleBackend",
    "JitteredDetector",
    "CorruptionModel",
    "corrupt",
    "NoisySegmenter",
    "RemoteBackend",
    "DEFAULT_TIMEOUT_SECS",
]


# =====================================================================
# errors
# =====================================================================

class BackendError(Exception):
    retryable = False


class BackendUnreachable(BackendError):
    retryable = True


class BackendTimeout(BackendError):
    retryable = True


class MalformedResponse(BackendError):
    retryable = False


# =====================================================================
# request / result types
# =====================================================================

@dataclass(frozen=True, eq=False)
class SegmentRequest:
    """One segmentation call.  At least one of text_query / box_prompt is required."""

    image: np.ndarray
    text_query: str | None = None
    box_prompt: BoundingBox | None = None

    def __post_init__(self) -> None:
        a = np.asarray(self.image)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {a.shape}")
        if self.text_query is None and self.box_prompt is None:
            raise ValueError("segment request needs a text query or a box prompt")
        if self.box_prompt is not None:
            self.box_prompt.require_within(a.shape[1], a.shape[0])

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: str
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "label": self.label, "confidence": self.confidence}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(BoundingBox.from_dict(d["box"]), str(d["label"]), float(d["confidence"]))


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, req: SegmentRequest) -> tuple[BinaryMask, float]: ...


@runtime_checkable
class Detector(Protocol):
    def detect(self, image: np.ndarray, prompt: str) -> list[Detection]: ...


# =====================================================================
# oracle backends
# =====================================================================

def _query_matches(labels, query: str) -> bool:
    from irsis.quality import _TOKEN_RE  # shared token convention

    tokens = _TOKEN_RE.findall(query.lower())
    return any(tok in lab.lower() for lab in labels for tok in tokens)


def _box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


class OracleBackend:
    """Answers segment and detect calls from a scene's exact ground truth.

    Text queries return the union of instruments whose labels contain a query
    token.  Box prompts return the single instrument whose tight box best
    overlaps the prompt, mirroring a promptable segmenter's behaviour.  The
    posted image content is not inspected; the scene is the source of truth.
    """

    kind = "oracle"

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.image, self.truths = render_scene(spec)
        self._tight = [m.tight_box() for m, _ in self.truths]

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def height(self) -> int:
        return self.spec.height

    def ground_truth_union(self, query: str = "") -> BinaryMask:
        out = BinaryMask.empty(self.width, self.height)
        for (m, lab) in self.truths:
            if not query or _query_matches(lab.all(), query):
                out = out | m
        return out

    def segment(self, req: SegmentRequest) -> tuple[BinaryMask, float]:
        if req.box_prompt is not None:
            best_i, best_iou = -1, 0.0
            for i, tb in enumerate(self._tight):
                if tb is None:
                    continue
                iou = _box_iou(tb, req.box_prompt)
                if iou > best_iou:
                    best_i, best_iou = i, iou
            if best_i < 0:
                return BinaryMask.empty(self.width, self.height), 0.0
            return self.truths[best_i][0], 1.0
        mask = self.ground_truth_union(req.text_query or "")
        return mask, 1.0 if mask.area else 0.0

    def detect(self, image: np.ndarray, prompt: str) -> list[Detection]:
        out = []
        for tb, (_, lab) in zip(self._tight, self.truths):
            if tb is not None:
                out.append(Detection(tb, lab.l2, 1.0))
        return out


class JitteredDetector:
    """Oracle detector with seeded per-edge jitter and optional box suppression.

    Deterministic per (seed, instrument index): every call returns identical
    boxes.  Each edge is loosened outward by up to jitter_px (clamped to the
    canvas), so a jittered box always contains its instrument's ground-truth
    pixels; the miss mode of a real detector is modelled by drop_probability
    suppressing whole boxes instead.
    """

    kind = "oracle"

    def __init__(self, oracle: OracleBackend, seed: int, jitter_px: int = 2,
                 drop_probability: float = 0.0):
        if jitter_px < 0:
            raise ValueError("jitter_px must be non-negative")
        if not (0.0 <= drop_probability <= 1.0):
            raise ValueError("drop_probability must lie in [0, 1]")
        self.oracle = oracle
        self.seed = seed
        self.jitter_px = jitter_px
        self.drop_probability = drop_probability

    def detect(self, image: np.ndarray, prompt: str) -> list[Detection]:
        w, h = self.oracle.width, self.oracle.height
        out = []
        for i, det in enumerate(self.oracle.detect(image, prompt)):
            rng = np.random.default_rng([self.seed, i])
            if rng.random() < self.drop_probability:
                continue
            k = self.jitter_px
            d = rng.integers(0, k + 1, size=4) if k else np.zeros(4, dtype=int)
            b = det.box
            x0 = max(0, b.x0 - int(d[0]))
            y0 = max(0, b.y0 - int(d[1]))
            x1 = min(w, b.x1 + int(d[2]))
            y1 = min(h, b.y1 + int(d[3]))
            out.append(Detection(BoundingBox(x0, y0, x1, y1), det.label, 0.9))
        return out


# =====================================================================
# corruption model
# =====================================================================

@dataclass(frozen=True)
class CorruptionModel:
    """Seeded corruption applied to oracle masks by the noisy segmenter.

    Box-prompted calls divide every corruption magnitude by
    box_prompt_fidelity_gain, modelling the better answers a spatial prompt
    extracts from a promptable segmenter.
    """

    seed: int
    p_drop_component: float = 0.0
    dilate_or_erode_steps: tuple[int, int] = (0, 0)
    salt_blob_count: tuple[int, int] = (0, 0)
    box_prompt_fidelity_gain: float = 4.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_drop_component <= 1.0):
            raise ValueError("p_drop_component must lie in [0, 1]")
        for name in ("dilate_or_erode_steps", "salt_blob_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range")
        if self.box_prompt_fidelity_gain < 1.0:
            raise ValueError("box_prompt_fidelity_gain must be >= 1")


def _mask_digest(m: BinaryMask) -> int:
    h = hashlib.sha256(f"{m.width}x{m.height}:".encode())
    h.update(m.bits.to_bytes((m.width * m.height + 7) // 8, "little"))
    return int.from_bytes(h.digest()[:8], "little")


def corrupt(gt: BinaryMask, model: CorruptionModel, box_prompted: bool = False) -> BinaryMask:
    """Corrupt a ground-truth mask: drop components, grow or shrink, add salt.

    Pure in (model.seed, gt): the random stream is derived from both, and the
    box_prompted flag only rescales magnitudes, so for a fixed seed the set of
    dropped components under a box prompt is a subset of the plain-call set.
    """
    rng = np.random.default_rng([model.seed, _mask_digest(gt)])
    gain = model.box_prompt_fidelity_gain if box_prompted else 1.0

    comps = gt.connected_components()
    drops = rng.random(len(comps)) if comps else np.zeros(0)
    out = BinaryMask.empty(gt.width, gt.height)
    for (comp, _), u in zip(comps, drops):
        if u >= model.p_drop_component / gain:
            out = out | comp

    raw_steps = int(rng.integers(model.dilate_or_erode_steps[0], model.dilate_or_erode_steps[1] + 1))
    grow = bool(rng.random() < 0.5)
    steps = int(raw_steps // gain)
    se = StructuringElement(3)
    for _ in range(steps):
        out = dilate(out, se) if grow else erode(out, se)

    raw_salt = int(rng.integers(model.salt_blob_count[0], model.salt_blob_count[1] + 1))
    n_salt = int(raw_salt // gain)
    for _ in range(n_salt):
        cx = int(rng.integers(0, gt.width))
        cy = int(rng.integers(0, gt.height))
        r = int(rng.integers(1, 3))
        blob = BoundingBox(max(0, cx - r), max(0, cy - r),
                           min(gt.width, cx + r + 1), min(gt.height, cy + r + 1))
        out = out | BinaryMask.from_box(gt.width, gt.height, blob)
    return out


class NoisySegmenter:
    """Oracle segmenter composed with the corruption model."""

    kind = "noisy"

    def __init__(self, oracle: OracleBackend, model: CorruptionModel):
        self.oracle = oracle
        self.model = model

    def segment(self, req: SegmentRequest) -> tuple[BinaryMask, float]:
        clean, score = self.oracle.segment(req)
        return corrupt(clean, self.model, box_prompted=req.box_prompt is not None), score


# =====================================================================
# HTTP wire client
# =====================================================================

class RemoteBackend:
    """Client for the backend wire protocol; segmenter and detector in one.

    Transport errors (connection refused, timeout) are retried exactly once;
    malformed payloads are never retried.
    """

    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT_SECS,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._http = session or requests.Session()

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        last: BackendError | None = None
        for attempt in range(2):
            try:
                resp = self._http.post(url, json=payload, timeout=self.timeout)
            except requests.Timeout as exc:
                last = BackendTimeout(f"timeout calling {url}: {exc}")
                continue
            except requests.RequestException as exc:
                last = BackendUnreachable(f"cannot reach {url}: {exc}")
                continue
            if resp.status_code >= 500:
                last = BackendUnreachable(f"{url} answered {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise MalformedResponse(f"{url} answered {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise MalformedResponse(f"{url} returned non-JSON body") from exc
        assert last is not None
        raise last

    def segment(self, req: SegmentRequest) -> tuple[BinaryMask, float]:
        payload: dict = {"image_png_b64": image_to_b64(req.image)}
        if req.text_query is not None:
            payload["text_query"] = req.text_query
        if req.box_prompt is not None:
            payload["box_prompt"] = req.box_prompt.to_dict()
        body = self._post("/v1/segment", payload)
        try:
            mask = BinaryMask.rle_decode(str(body["mask_irle"]))
            score = float(body["score"])
        except (KeyError, TypeError, IrleError) as exc:
            raise MalformedResponse(f"bad segment response: {exc}") from exc
        if (mask.width, mask.height) != (req.width, req.height):
            raise MalformedResponse(
                f"mask is {mask.width}x{mask.height}, image is {req.width}x{req.height}"
            )
        if not (0.0 <= score <= 1.0):
            raise MalformedResponse(f"score {score} outside [0, 1]")
        return mask, score

    def detect(self, image: np.ndarray, prompt: str) -> list[Detection]:
        body = self._post("/v1/detect", {"image_png_b64": image_to_b64(image), "prompt": prompt})
        h, w = image.shape[:2]
        try:
            dets = [Detection.from_dict(d) for d in body["detections"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedResponse(f"bad detect response: {exc}") from exc
        for d in dets:
            if not d.box.within(w, h):
                raise MalformedResponse(f"detection box {d.box.to_dict()} exceeds image {w}x{h}")
        return dets

    def health(self) -> dict:
        url = f"{self.base_url}/healthz"
        try:
            resp = self._http.get(url, timeout=self.timeout)
        except requests.Timeout as exc:
            raise BackendTimeout(f"timeout calling {url}: {exc}") from exc
        except requests.RequestException as exc:
            raise BackendUnreachable(f"cannot reach {url}: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnreachable(f"{url} answered {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"{url} returned non-JSON body") from exc
