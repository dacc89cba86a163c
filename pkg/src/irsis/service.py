"""Session API and on-disk persistence for refinement sessions.

The store keeps one folder per session with a file per artifact: a manifest,
the input image, one IRLE mask per iteration side (entering and produced),
one report file per assessment, the feedback log, and the locked-region
contents.  Nothing stored carries timestamps or other run-dependent noise, so
saving, loading, and saving again yields byte-identical folders.

The HTTP layer is a thin adapter over the agent: one step endpoint per
iteration (turn-based, so a clinician can intervene between any two turns),
feedback queued between steps, and per-session locking so concurrent steps
serialize.
"""
from __future__ import annotations

import json
import logging
import re
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse
from pydantic import BaseModel

from irsis.agent import (
    AgentConfig,
    ClinicianFeedback,
    IterationRecord,
    LockedRegion,
    RefinementSession,
    SessionState,
    Strategy,
    apply_feedback,
    resume_initial,
    run_initial,
    step,
)
from irsis.backends import Detection, Detector, Segmenter
from irsis.images import decode_png, encode_png, image_from_b64
from irsis.mask import BinaryMask, BoundingBox
from irsis.quality import QualityReport

logger = logging.getLogger(__name__)

_SESSION_ID_RE = re.compile(r"^[a-z0-9][a-z0-9_-]{0,63}$")

__all__ = ["SessionStore", "build_app"]


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


class SessionStore:
    """File-per-artifact session persistence under one root directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, session_id: str) -> Path:
        if not _SESSION_ID_RE.match(session_id):
            raise ValueError(f"invalid session id {session_id!r}")
        return self.root / session_id

    def exists(self, session_id: str) -> bool:
        return self.path(session_id).is_dir()

    def list_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir()
                      if p.is_dir() and (p / "manifest.json").exists())

    def new_session_id(self) -> str:
        taken = set(self.list_ids())
        n = 1
        while f"s{n:04d}" in taken:
            n += 1
        return f"s{n:04d}"

    # -- writing ------------------------------------------------------

    def save(self, session: RefinementSession) -> None:
        d = self.path(session.session_id)
        for sub in ("masks", "reports", "locks"):
            (d / sub).mkdir(parents=True, exist_ok=True)
        image_path = d / "image.png"
        if not image_path.exists():
            image_path.write_bytes(encode_png(session.image))

        for t, rec in enumerate(session.history):
            (d / "masks" / f"t{t:03d}.in.irle").write_bytes(rec.mask_in.rle_encode())
            out_path = d / "masks" / f"t{t:03d}.out.irle"
            if rec.complete:
                out_path.write_bytes(rec.mask_out.rle_encode())
            elif out_path.exists():
                out_path.unlink()
            report_path = d / "reports" / f"t{t:03d}.json"
            report_path.write_text(_dump_json(
                rec.report.to_dict() if rec.report else None))
            after_path = d / "reports" / f"t{t:03d}.after.json"
            if rec.report_after is not None:
                after_path.write_text(_dump_json(rec.report_after.to_dict()))
            elif after_path.exists():
                after_path.unlink()

        # a rolled-back turn leaves stale artifacts beyond the history tail
        n = len(session.history)
        for leftover in list((d / "masks").iterdir()) + list((d / "reports").iterdir()):
            t = int(leftover.name[1:4])
            if t >= n:
                leftover.unlink()

        for i, lock in enumerate(session.locked):
            (d / "locks" / f"lock{i:03d}.irle").write_bytes(lock.content.rle_encode())

        with (d / "feedback.jsonl").open("w") as fh:
            for fb in session.feedback_log:
                fh.write(json.dumps(fb.to_dict(), sort_keys=True) + "\n")

        manifest = {
            "session_id": session.session_id,
            "query": session.query,
            "original_query": session.original_query,
            "level": session.level,
            "state": session.state.value,
            "fault": session.fault,
            "rounds": session.rounds,
            "config": session.config.to_dict(),
            "detections": [det.to_dict() for det in session.detections],
            "pending_feedback": [fb.feedback_id for fb in session.pending_feedback],
            "locked": [
                {"region": lock.region.to_dict(), "content_file": f"locks/lock{i:03d}.irle"}
                for i, lock in enumerate(session.locked)
            ],
            "history": [
                {
                    "t": rec.t,
                    "strategy": rec.strategy.value if rec.strategy else None,
                    "refined_boxes": rec.refined_boxes,
                    "feedback_applied": rec.feedback_applied,
                    "faults": rec.faults,
                    "complete": rec.complete,
                }
                for rec in session.history
            ],
        }
        (d / "manifest.json").write_text(_dump_json(manifest))

    # -- reading ------------------------------------------------------

    def load(self, session_id: str) -> RefinementSession:
        d = self.path(session_id)
        manifest = json.loads((d / "manifest.json").read_text())
        session = RefinementSession(
            session_id=manifest["session_id"],
            image=decode_png((d / "image.png").read_bytes()),
            query=manifest["query"],
            config=AgentConfig.from_dict(manifest["config"]),
            level=manifest["level"],
            original_query=manifest["original_query"],
        )
        session.state = SessionState(manifest["state"])
        session.fault = manifest["fault"]
        session.rounds = manifest["rounds"]
        session.detections = [Detection.from_dict(x) for x in manifest["detections"]]

        for entry in manifest["locked"]:
            content = BinaryMask.rle_decode((d / entry["content_file"]).read_bytes())
            session.locked.append(LockedRegion(BoundingBox.from_dict(entry["region"]), content))

        stored_masks = {p.name for p in (d / "masks").iterdir()}
        for h in manifest["history"]:
            t = h["t"]
            if f"t{t:03d}.in.irle" not in stored_masks:
                raise ValueError(f"session {session_id}: missing mask for iteration {t}")
            mask_in = BinaryMask.rle_decode((d / "masks" / f"t{t:03d}.in.irle").read_bytes())
            rec = IterationRecord(
                t=t,
                mask_in=mask_in,
                report=_load_report(d / "reports" / f"t{t:03d}.json"),
                strategy=Strategy(h["strategy"]) if h["strategy"] else None,
                refined_boxes=list(h["refined_boxes"]),
                feedback_applied=list(h["feedback_applied"]),
                faults=list(h["faults"]),
            )
            if h["complete"]:
                rec.mask_out = BinaryMask.rle_decode(
                    (d / "masks" / f"t{t:03d}.out.irle").read_bytes())
            after = d / "reports" / f"t{t:03d}.after.json"
            if after.exists():
                rec.report_after = _load_report(after)
            session.history.append(rec)

        feedback_path = d / "feedback.jsonl"
        if feedback_path.exists():
            for line in feedback_path.read_text().splitlines():
                if line.strip():
                    session.feedback_log.append(ClinicianFeedback.from_dict(json.loads(line)))
        by_id = {fb.feedback_id: fb for fb in session.feedback_log}
        session.pending_feedback = [by_id[i] for i in manifest["pending_feedback"]]
        return session


def _load_report(path: Path) -> QualityReport | None:
    obj = json.loads(path.read_text())
    return QualityReport.from_dict(obj) if obj is not None else None


# ======================================================================
# HTTP layer
# ======================================================================

class CreateBody(BaseModel):
    image_png_b64: str
    query: str
    session_id: str | None = None
    config: dict | None = None


class FeedbackBody(BaseModel):
    kind: str
    box: dict | None = None
    text: str | None = None
    mask_irle: str | None = None
    region: dict | None = None
    received_at_iteration: int = 0
    # clients may pin the id so scripted runs are reproducible; generated if absent
    feedback_id: str | None = None


def _session_summary(session: RefinementSession) -> dict:
    current = session.current_mask
    last = session.history[-1] if session.history else None
    report = None
    if last is not None:
        chosen = last.report_after or last.report
        report = chosen.to_dict() if chosen else None
    return {
        "session_id": session.session_id,
        "state": session.state.value,
        "t": last.t if last else None,
        "report": report,
        "mask_irle": current.rle_encode().decode("ascii") if current else None,
        "fault": session.fault,
        "rounds": session.rounds,
    }


def _record_dict(rec: IterationRecord) -> dict:
    return {
        "t": rec.t,
        "strategy": rec.strategy.value if rec.strategy else None,
        "refined_boxes": rec.refined_boxes,
        "feedback_applied": rec.feedback_applied,
        "faults": rec.faults,
        "complete": rec.complete,
        "report": rec.report.to_dict() if rec.report else None,
        "report_after": rec.report_after.to_dict() if rec.report_after else None,
    }


def build_app(store: SessionStore, segmenter: Segmenter, detector: Detector,
              default_config: AgentConfig | None = None,
              backend_kind: str = "unknown") -> FastAPI:
    """Session API over one segmenter/detector pair and one store."""
    app = FastAPI(title="refinement session service")
    base_config = default_config or AgentConfig()
    sessions: dict[str, RefinementSession] = {}
    locks: dict[str, threading.Lock] = {}
    meta = threading.Lock()

    def session_lock(sid: str) -> threading.Lock:
        with meta:
            return locks.setdefault(sid, threading.Lock())

    def get_session(sid: str) -> RefinementSession:
        with meta:
            cached = sessions.get(sid)
        if cached is not None:
            return cached
        try:
            ok = store.exists(sid)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if not ok:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        session = store.load(sid)
        with meta:
            return sessions.setdefault(sid, session)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "backend_kind": backend_kind,
                "sessions": len(store.list_ids())}

    @app.post("/v1/sessions")
    def create(body: CreateBody) -> dict:
        if not body.query.strip():
            raise HTTPException(status_code=400, detail="query must be non-empty")
        try:
            image = image_from_b64(body.image_png_b64)
            config = AgentConfig.from_dict(body.config) if body.config else base_config
            sid = body.session_id or store.new_session_id()
            path = store.path(sid)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        if path.exists():
            raise HTTPException(status_code=409, detail=f"session {sid} already exists")
        with session_lock(sid):
            session = run_initial(image, body.query, segmenter, detector,
                                  config, session_id=sid)
            store.save(session)
            with meta:
                sessions[sid] = session
            if session.fault and not session.history:
                raise HTTPException(status_code=502, detail={
                    "session_id": sid, "fault": session.fault})
            return _session_summary(session)

    @app.get("/v1/sessions/{sid}")
    def get(sid: str) -> dict:
        session = get_session(sid)
        out = _session_summary(session)
        out.update({
            "query": session.query,
            "original_query": session.original_query,
            "config": session.config.to_dict(),
            "detections": [det.to_dict() for det in session.detections],
            "history": [_record_dict(rec) for rec in session.history],
            "locked_regions": [lock.region.to_dict() for lock in session.locked],
            "pending_feedback": [fb.feedback_id for fb in session.pending_feedback],
        })
        final = session.final_mask
        out["final_mask_irle"] = final.rle_encode().decode("ascii") if final else None
        return out

    @app.post("/v1/sessions/{sid}/step")
    def step_session(sid: str) -> dict:
        session = get_session(sid)
        with session_lock(sid):
            if not session.history:
                resume_initial(session, segmenter, detector)
                store.save(session)
                if session.fault and not session.history:
                    raise HTTPException(status_code=502, detail={
                        "session_id": sid, "fault": session.fault})
                if session.state is not SessionState.RUNNING:
                    return {**_session_summary(session),
                            "record": _record_dict(session.history[-1])}
            if session.state is not SessionState.RUNNING:
                raise HTTPException(
                    status_code=409,
                    detail=f"session is {session.state.value}, not running")
            rec = step(session, segmenter)
            store.save(session)
            return {**_session_summary(session), "record": _record_dict(rec)}

    @app.post("/v1/sessions/{sid}/feedback")
    def feedback(sid: str, body: FeedbackBody) -> dict:
        session = get_session(sid)
        with session_lock(sid):
            try:
                fb = ClinicianFeedback.from_dict(body.model_dump())
                apply_feedback(session, fb)
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from exc
            store.save(session)
            return {
                "feedback_id": fb.feedback_id,
                "state": session.state.value,
                "queued": any(f is fb for f in session.pending_feedback),
            }

    @app.post("/v1/sessions/{sid}/finalize")
    def finalize(sid: str) -> dict:
        session = get_session(sid)
        with session_lock(sid):
            if session.state is SessionState.RUNNING:
                # count-based id instead of a random one so that identical
                # scripted interactions leave identical session folders
                fb = ClinicianFeedback(
                    kind="accept",
                    feedback_id=f"accept-{len(session.feedback_log):04d}")
                try:
                    apply_feedback(session, fb)
                except ValueError as exc:
                    raise HTTPException(status_code=409, detail=str(exc)) from exc
                store.save(session)
            final = session.final_mask
            return {
                "session_id": sid,
                "state": session.state.value,
                "mask_irle": final.rle_encode().decode("ascii") if final else None,
            }

    @app.get("/v1/sessions/{sid}/mask/{t}")
    def mask_at(sid: str, t: int) -> PlainTextResponse:
        session = get_session(sid)
        if not (0 <= t < len(session.history)):
            raise HTTPException(status_code=404,
                                detail=f"iteration {t} not in [0, {len(session.history)})")
        return PlainTextResponse(session.mask_at(t).rle_encode())

    return app
