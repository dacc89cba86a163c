"""HTTP wire surface for a backend pair, used as the standalone mock server."""
from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from irsis.backends import Detector, SegmentRequest, Segmenter
from irsis.images import image_from_b64
from irsis.mask import BoundingBox

__all__ = ["build_backend_app"]


class BoxBody(BaseModel):
    x0: int
    y0: int
    x1: int
    y1: int


class SegmentBody(BaseModel):
    image_png_b64: str
    text_query: str | None = None
    box_prompt: BoxBody | None = None


class DetectBody(BaseModel):
    image_png_b64: str
    prompt: str


def build_backend_app(segmenter: Segmenter, detector: Detector, backend_kind: str) -> FastAPI:
    app = FastAPI(title="irsis mock backend")

    @app.post("/v1/segment")
    def segment(body: SegmentBody) -> dict:
        try:
            image = image_from_b64(body.image_png_b64)
            box = None
            if body.box_prompt is not None:
                bp = body.box_prompt
                box = BoundingBox(bp.x0, bp.y0, bp.x1, bp.y1)
            req = SegmentRequest(image, text_query=body.text_query, box_prompt=box)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        mask, score = segmenter.segment(req)
        return {"mask_irle": mask.rle_encode().decode("ascii"), "score": score}

    @app.post("/v1/detect")
    def detect(body: DetectBody) -> dict:
        try:
            image = image_from_b64(body.image_png_b64)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        dets = detector.detect(image, body.prompt)
        return {"detections": [d.to_dict() for d in dets]}

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "backend_kind": backend_kind}

    return app
