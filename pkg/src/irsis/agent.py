"""Iterative refinement sessions: the quality-gated segment / assess / refine loop.

Each session starts from one full-query segmentation plus one detection pass.
Every turn the current mask is scored against the detected boxes; a passing
gate trusts the mask and finalizes it through morphological cleanup, while a
failing gate re-segments each under-covered box with a spatial prompt and
splices the answers into the kept remainder.  Clinician feedback (extra box
prompts, query corrections, verbatim reference regions, accept, reject)
always outranks the automatic gate for the turn it arrives in.

Bookkeeping model: while a session is running, the last history record is
pending: it holds the mask entering the turn and that mask's quality report,
with the strategy and output mask unset until step() executes the turn.
"""
from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from irsis.backends import BackendError, Detection, Detector, SegmentRequest, Segmenter
from irsis.mask import BinaryMask, BoundingBox, StructuringElement
from irsis.quality import QualityReport, QualityThresholds, evaluate, select_target_boxes

logger = logging.getLogger(__name__)

DEFAULT_DETECTION_PROMPT = "every surgical instrument visible in the image"
CLINICIAN_LABEL = "clinician"
CORRECTION_SEPARATOR = " ; "

__all__ = [
    "SessionState",
    "Strategy",
    "AgentConfig",
    "IterationRecord",
    "ClinicianFeedback",
    "LockedRegion",
    "RefinementSession",
    "AgentFault",
    "run_initial",
    "resume_initial",
    "step",
    "apply_feedback",
    "run_to_completion",
    "DEFAULT_DETECTION_PROMPT",
    "CLINICIAN_LABEL",
]


class SessionState(str, Enum):
    RUNNING = "running"
    CONVERGED_QUALITY = "converged_quality"
    EXHAUSTED_ITERATIONS = "exhausted_iterations"
    NO_DETECTIONS = "no_detections"
    FINALIZED_BY_CLINICIAN = "finalized_by_clinician"


TERMINAL_STATES = (
    SessionState.CONVERGED_QUALITY,
    SessionState.EXHAUSTED_ITERATIONS,
    SessionState.NO_DETECTIONS,
    SessionState.FINALIZED_BY_CLINICIAN,
)


class Strategy(str, Enum):
    TRUST_INITIAL = "trust_initial"
    MULTI_INSTRUMENT = "multi_instrument"


class AgentFault(RuntimeError):
    """Unrecoverable backend failure; carries the partial session."""

    def __init__(self, message: str, session: "RefinementSession"):
        super().__init__(message)
        self.session = session


@dataclass(frozen=True)
class AgentConfig:
    thresholds: QualityThresholds = field(default_factory=QualityThresholds)
    max_iterations: int = 3
    kernel: StructuringElement = field(default_factory=StructuringElement)
    detection_prompt: str = DEFAULT_DETECTION_PROMPT

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def to_dict(self) -> dict:
        return {
            "tau_c": self.thresholds.tau_c,
            "tau_o": self.thresholds.tau_o,
            "max_iterations": self.max_iterations,
            "kernel_side": self.kernel.side,
            "detection_prompt": self.detection_prompt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        return cls(
            thresholds=QualityThresholds(float(d.get("tau_c", 0.85)), float(d.get("tau_o", 0.50))),
            max_iterations=int(d.get("max_iterations", 3)),
            kernel=StructuringElement(int(d.get("kernel_side", 5))),
            detection_prompt=str(d.get("detection_prompt", DEFAULT_DETECTION_PROMPT)),
        )


@dataclass
class IterationRecord:
    """One turn: the entering mask, its assessment, and the action taken."""

    t: int
    mask_in: BinaryMask
    report: QualityReport | None
    strategy: Strategy | None = None
    refined_boxes: list[int] = field(default_factory=list)
    mask_out: BinaryMask | None = None
    report_after: QualityReport | None = None
    feedback_applied: list[str] = field(default_factory=list)
    faults: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return self.mask_out is not None


@dataclass
class ClinicianFeedback:
    """One clinician action.  Geometric kinds queue; accept/reject act at once."""

    kind: str  # box_prompt | language_correction | reference_annotation | accept | reject
    box: BoundingBox | None = None
    text: str | None = None
    mask: BinaryMask | None = None
    region: BoundingBox | None = None
    received_at_iteration: int = 0
    feedback_id: str = ""

    KINDS = ("box_prompt", "language_correction", "reference_annotation", "accept", "reject")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        if self.kind == "box_prompt" and self.box is None:
            raise ValueError("box_prompt feedback needs a box")
        if self.kind == "language_correction" and not self.text:
            raise ValueError("language_correction feedback needs text")
        if self.kind == "reference_annotation" and (self.mask is None or self.region is None):
            raise ValueError("reference_annotation feedback needs a mask and a region")
        if not self.feedback_id:
            self.feedback_id = uuid.uuid4().hex[:12]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "box": self.box.to_dict() if self.box else None,
            "text": self.text,
            "mask_irle": self.mask.rle_encode().decode("ascii") if self.mask else None,
            "region": self.region.to_dict() if self.region else None,
            "received_at_iteration": self.received_at_iteration,
            "feedback_id": self.feedback_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClinicianFeedback":
        return cls(
            kind=str(d["kind"]),
            box=BoundingBox.from_dict(d["box"]) if d.get("box") else None,
            text=d.get("text"),
            mask=BinaryMask.rle_decode(d["mask_irle"]) if d.get("mask_irle") else None,
            region=BoundingBox.from_dict(d["region"]) if d.get("region") else None,
            received_at_iteration=int(d.get("received_at_iteration", 0)),
            feedback_id=str(d.get("feedback_id") or ""),
        )


@dataclass
class LockedRegion:
    """Region fixed verbatim by a reference annotation; never auto-refined again."""

    region: BoundingBox
    content: BinaryMask  # full-canvas mask already clipped to the region


@dataclass
class RefinementSession:
    session_id: str
    image: np.ndarray
    query: str
    config: AgentConfig
    level: int | None = None
    original_query: str = ""
    detections: list[Detection] = field(default_factory=list)
    history: list[IterationRecord] = field(default_factory=list)
    state: SessionState = SessionState.RUNNING
    pending_feedback: list[ClinicianFeedback] = field(default_factory=list)
    feedback_log: list[ClinicianFeedback] = field(default_factory=list)
    locked: list[LockedRegion] = field(default_factory=list)
    fault: str | None = None
    rounds: int = 0  # completed multi-instrument turns

    def __post_init__(self) -> None:
        if not self.original_query:
            self.original_query = self.query

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def current_mask(self) -> BinaryMask | None:
        if not self.history:
            return None
        last = self.history[-1]
        return last.mask_out if last.complete else last.mask_in

    @property
    def final_mask(self) -> BinaryMask | None:
        if self.state is SessionState.RUNNING or not self.history:
            return None
        return self.history[-1].mask_out

    def mask_at(self, t: int) -> BinaryMask:
        """Mask produced by turn t (the entering mask while the turn is pending)."""
        r = self.history[t]
        return r.mask_out if r.complete else r.mask_in


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _reimpose_locked(session: RefinementSession, mask: BinaryMask) -> BinaryMask:
    for lock in session.locked:
        mask = mask.subtract_box(lock.region) | lock.content
    return mask


def _morph_final(session: RefinementSession, mask: BinaryMask) -> BinaryMask:
    k = session.config.kernel
    return _reimpose_locked(session, mask.morph_open(k).morph_close(k))


def _target_indices(session: RefinementSession) -> list[int]:
    labels = [d.label for d in session.detections]
    sel = select_target_boxes(labels, session.query)
    # clinician-marked regions always gate, whatever the query names
    forced = [i for i, d in enumerate(session.detections) if d.label == CLINICIAN_LABEL]
    return sorted(set(sel) | set(forced))


def _assess(session: RefinementSession, mask: BinaryMask) -> QualityReport | None:
    """Evaluate against the target boxes, reporting detection-level indices.

    Returns None when the session has no detections to gate on.
    """
    if not session.detections:
        return None
    sel = _target_indices(session)
    boxes = [session.detections[i].box for i in sel]
    local = evaluate(mask, boxes, session.config.thresholds)
    return QualityReport(
        coverage=local.coverage,
        per_box_overlap=tuple((sel[i], o) for i, o in local.per_box_overlap),
        gate=local.gate,
        low_boxes=tuple(sel[i] for i in local.low_boxes),
        box_union_area=local.box_union_area,
    )


def _push_pending(session: RefinementSession, mask_in: BinaryMask,
                  report: QualityReport | None) -> IterationRecord:
    rec = IterationRecord(t=len(session.history), mask_in=mask_in, report=report)
    session.history.append(rec)
    return rec


def _box_inside_locked(session: RefinementSession, box: BoundingBox) -> bool:
    return any(
        lock.region.x0 <= box.x0 and lock.region.y0 <= box.y0
        and box.x1 <= lock.region.x1 and box.y1 <= lock.region.y1
        for lock in session.locked
    )


# ---------------------------------------------------------------------------
# lifecycle
# ---------------------------------------------------------------------------

def run_initial(
    image: np.ndarray,
    query: str,
    segmenter: Segmenter,
    detector: Detector,
    config: AgentConfig | None = None,
    session_id: str | None = None,
    level: int | None = None,
) -> RefinementSession:
    """Create a session: segment once with the full query, detect boxes, assess.

    Backend failures leave the session running with a recorded fault and no
    history; resume_initial retries from there.
    """
    session = RefinementSession(
        session_id=session_id or uuid.uuid4().hex[:12],
        image=np.asarray(image),
        query=query,
        config=config or AgentConfig(),
        level=level,
    )
    resume_initial(session, segmenter, detector)
    return session


def resume_initial(session: RefinementSession, segmenter: Segmenter, detector: Detector) -> RefinementSession:
    """Retry the initial segment + detect phase after a recorded fault."""
    if session.history:
        return session
    try:
        m0, _score = segmenter.segment(SegmentRequest(session.image, text_query=session.query))
        detections = detector.detect(session.image, session.config.detection_prompt)
    except BackendError as exc:
        session.fault = f"initial phase failed: {exc}"
        logger.warning("session %s: %s", session.session_id, session.fault)
        return session
    session.fault = None
    session.detections = list(detections)
    if not session.detections:
        final = _morph_final(session, m0)
        session.history.append(IterationRecord(
            t=0, mask_in=m0, report=None, strategy=Strategy.TRUST_INITIAL,
            refined_boxes=[], mask_out=final,
        ))
        session.state = SessionState.NO_DETECTIONS
    else:
        _push_pending(session, m0, _assess(session, m0))
    return session


def step(session: RefinementSession, segmenter: Segmenter,
         config: AgentConfig | None = None) -> IterationRecord:
    """Execute one turn of the refinement loop.

    Consumes queued geometric feedback first, then either trusts and
    finalizes the current mask (gate passed, nothing queued) or re-segments
    every low box plus every clinician-forced box.  After a refinement the
    result is re-assessed; a passing re-assessment finalizes through a
    trailing trust turn unless the turn carried feedback, in which case the
    session stays open for the clinician.
    """
    if session.state is not SessionState.RUNNING:
        raise ValueError(f"step requires a running session, state is {session.state.value}")
    if not session.history:
        raise ValueError("initial phase incomplete; call resume_initial with both backends first")
    cfg = config or session.config
    rec = session.history[-1]
    assert not rec.complete, "running session must end in a pending record"

    forced = _consume_feedback(session, segmenter, rec)
    had_feedback = bool(rec.feedback_applied)

    if rec.report is None:
        # reopened without any detected or clinician boxes: nothing to gate
        # on or refine, so clean up and close out the no-detections way again
        rec.strategy = Strategy.TRUST_INITIAL
        rec.refined_boxes = []
        rec.mask_out = _morph_final(session, rec.mask_in)
        session.state = SessionState.NO_DETECTIONS
        return rec

    if rec.report.gate and not had_feedback:
        rec.strategy = Strategy.TRUST_INITIAL
        rec.refined_boxes = []
        rec.mask_out = _morph_final(session, rec.mask_in)
        session.state = SessionState.CONVERGED_QUALITY
        return rec

    # refinement turn
    rec.strategy = Strategy.MULTI_INSTRUMENT
    refine = sorted(set(rec.report.low_boxes) | set(forced))
    refine = [i for i in refine if not _box_inside_locked(session, session.detections[i].box)]
    rec.refined_boxes = refine

    kept = rec.mask_in
    for i in refine:
        kept = kept.subtract_box(session.detections[i].box)
    out = kept
    for i in refine:
        box = session.detections[i].box
        try:
            seg, _score = segmenter.segment(SegmentRequest(session.image, box_prompt=box))
            out = out | seg.intersect_box(box)
        except BackendError as exc:
            # restore that box's prior content rather than losing it
            out = out | rec.mask_in.intersect_box(box)
            rec.faults.append(f"box {i}: {exc}")
            logger.warning("session %s box %d re-segmentation failed: %s",
                           session.session_id, i, exc)
    out = _reimpose_locked(session, out)
    rec.mask_out = out
    rec.report_after = _assess(session, out)
    session.rounds += 1

    if rec.report_after.gate and not had_feedback:
        trailing = IterationRecord(
            t=len(session.history), mask_in=out, report=rec.report_after,
            strategy=Strategy.TRUST_INITIAL, refined_boxes=[],
            mask_out=_morph_final(session, out),
        )
        session.history.append(trailing)
        session.state = SessionState.CONVERGED_QUALITY
    elif not rec.report_after.gate and session.rounds >= cfg.max_iterations:
        session.state = SessionState.EXHAUSTED_ITERATIONS
    else:
        _push_pending(session, out, rec.report_after)
    return rec


def _consume_feedback(session: RefinementSession, segmenter: Segmenter,
                      rec: IterationRecord) -> list[int]:
    """Apply queued geometric feedback to the pending record, FIFO.

    Returns detection indices the clinician forced into this turn's refinement.
    """
    forced: list[int] = []
    queue, session.pending_feedback = session.pending_feedback, []
    for fb in queue:
        if fb.kind == "box_prompt":
            fb.box.require_within(session.width, session.height)
            session.detections.append(Detection(fb.box, CLINICIAN_LABEL, 1.0))
            forced.append(len(session.detections) - 1)
            rec.report = _assess(session, rec.mask_in)
        elif fb.kind == "language_correction":
            session.query = session.query + CORRECTION_SEPARATOR + (fb.text or "")
            try:
                new_mask, _score = segmenter.segment(
                    SegmentRequest(session.image, text_query=session.query))
            except BackendError as exc:
                rec.faults.append(f"language correction: {exc}")
            else:
                rec.mask_in = _reimpose_locked(session, new_mask)
                rec.report = _assess(session, rec.mask_in)
        elif fb.kind == "reference_annotation":
            fb.region.require_within(session.width, session.height)
            content = fb.mask.intersect_box(fb.region)
            session.locked.append(LockedRegion(fb.region, content))
            rec.mask_in = rec.mask_in.subtract_box(fb.region) | content
            rec.report = _assess(session, rec.mask_in)
        else:  # accept / reject never sit in the queue
            raise AssertionError(f"unexpected queued feedback kind {fb.kind}")
        rec.feedback_applied.append(fb.feedback_id)
    return forced


# ---------------------------------------------------------------------------
# clinician feedback entry point
# ---------------------------------------------------------------------------

def apply_feedback(session: RefinementSession, fb: ClinicianFeedback) -> RefinementSession:
    """Record one clinician action.

    Accept and reject take effect immediately; geometric feedback queues for
    the next step.  Geometric feedback on a finished (but not clinician-
    finalized) session reopens it for another clinician-driven turn.
    """
    if session.state is SessionState.FINALIZED_BY_CLINICIAN:
        raise ValueError("session already finalized by the clinician")
    if fb.kind == "accept":
        _do_accept(session, fb)
    elif fb.kind == "reject":
        _do_reject(session, fb)
    else:
        _validate_geometry(session, fb)
        if session.state in TERMINAL_STATES:
            _reopen(session)
        session.pending_feedback.append(fb)
    session.feedback_log.append(fb)
    return session


def _validate_geometry(session: RefinementSession, fb: ClinicianFeedback) -> None:
    if fb.box is not None:
        fb.box.require_within(session.width, session.height)
    if fb.region is not None:
        fb.region.require_within(session.width, session.height)
    if fb.mask is not None and (fb.mask.width, fb.mask.height) != (session.width, session.height):
        raise ValueError(
            f"reference mask is {fb.mask.width}x{fb.mask.height}, "
            f"session raster is {session.width}x{session.height}"
        )


def _do_accept(session: RefinementSession, fb: ClinicianFeedback) -> None:
    if session.current_mask is None:
        raise ValueError("nothing to accept before the initial segmentation")
    last = session.history[-1]
    if not last.complete:
        last.strategy = Strategy.TRUST_INITIAL
        last.mask_out = _morph_final(session, last.mask_in)
        last.feedback_applied.append(fb.feedback_id)
    else:
        current = last.mask_out
        session.history.append(IterationRecord(
            t=len(session.history), mask_in=current,
            report=last.report_after or last.report,
            strategy=Strategy.TRUST_INITIAL, refined_boxes=[],
            mask_out=_morph_final(session, current),
            feedback_applied=[fb.feedback_id],
        ))
    session.state = SessionState.FINALIZED_BY_CLINICIAN


def _do_reject(session: RefinementSession, fb: ClinicianFeedback) -> None:
    """Discard the last executed turn's output and leave that turn pending again.

    The discarded turn re-runs at the next step() with whatever feedback is
    still queued.  Clinician-supplied session changes (appended boxes, query
    corrections, locked regions) are kept; rejecting an outcome does not
    retract the clinician's own input.
    """
    completed = [r for r in session.history if r.complete]
    if not completed:
        raise ValueError("no executed turn to reject")
    last_done = completed[-1]
    if session.history[-1] is not last_done:
        session.history.pop()  # drop the pending record derived from the rejected turn
    session.history.pop()
    if last_done.strategy is Strategy.MULTI_INSTRUMENT:
        session.rounds = max(0, session.rounds - 1)
    rec = _push_pending(session, last_done.mask_in, _assess(session, last_done.mask_in))
    rec.feedback_applied.append(fb.feedback_id)
    session.state = SessionState.RUNNING


def _reopen(session: RefinementSession) -> None:
    current = session.current_mask
    assert current is not None
    _push_pending(session, current, _assess(session, current))
    session.state = SessionState.RUNNING


# ---------------------------------------------------------------------------
# scripted / batch driver
# ---------------------------------------------------------------------------

def run_to_completion(
    image: np.ndarray,
    query: str,
    segmenter: Segmenter,
    detector: Detector,
    config: AgentConfig | None = None,
    feedback_script: list[ClinicianFeedback] | None = None,
    session_id: str | None = None,
) -> RefinementSession:
    """Drive a session until it leaves the running state.

    Scripted feedback items are delivered in order once the session reaches
    their received_at_iteration turn, before that turn executes.
    """
    session = run_initial(image, query, segmenter, detector, config, session_id=session_id)
    if session.fault and not session.history:
        raise AgentFault(session.fault, session)
    script = list(feedback_script or [])
    cfg = config or session.config
    limit = 4 * cfg.max_iterations + 8 + 4 * len(script)

    def deliver(now: int) -> None:
        due = [fb for fb in script if fb.received_at_iteration <= now]
        for fb in due:
            if session.state is SessionState.FINALIZED_BY_CLINICIAN:
                return
            script.remove(fb)
            apply_feedback(session, fb)

    deliver(0)
    steps_done = 0
    while True:
        while session.state is SessionState.RUNNING:
            step(session, segmenter, config)
            steps_done += 1
            if steps_done > limit:
                raise AgentFault("refinement loop failed to terminate", session)
            now = (session.history[-1].t if session.state is SessionState.RUNNING
                   else len(session.history))
            deliver(now)
        # terminal: any feedback scripted for turns that never happened is
        # treated as arriving while the clinician reviews the final mask
        if script and session.state is not SessionState.FINALIZED_BY_CLINICIAN:
            deliver(10 ** 9)
            if session.state is SessionState.RUNNING:
                continue
        return session
