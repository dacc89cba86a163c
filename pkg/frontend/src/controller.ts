/**
 * DOM-free session controller: holds the view model, maps each clinician
 * action to exactly one mutating service call, and refreshes from server
 * truth afterwards. Masks are never mutated client-side; every rendered mask
 * is the decoded payload of GET /mask/{t}.
 *
 * At most one request is in flight: actions invoked while busy return false
 * (the UI disables its controls from the same flag).
 */

import {
  ApiClient,
  ApiError,
  NetworkError,
  type Box,
  type CreateRequest,
  type DetectionDto,
  type ReportDto,
  type SessionDetail,
} from "./api.js";
import { decodeIrle, type DecodedMask } from "./irle.js";

export type FeedbackDraft =
  | { kind: "box_prompt"; box: Box }
  | { kind: "language_correction"; text: string };

export interface SessionView {
  sessionId: string | null;
  state: string | null;
  /** Selected slider position, 0-based; -1 when nothing is loaded. */
  iteration: number;
  /** Number of iterations the server has recorded. */
  iterations: number;
  maskIrle: string | null;
  mask: DecodedMask | null;
  detections: DetectionDto[];
  lowBoxes: number[];
  report: ReportDto | null;
  query: string | null;
  finalMaskIrle: string | null;
  draft: FeedbackDraft | null;
  busy: boolean;
  error: string | null;
}

function emptyView(): SessionView {
  return {
    sessionId: null,
    state: null,
    iteration: -1,
    iterations: 0,
    maskIrle: null,
    mask: null,
    detections: [],
    lowBoxes: [],
    report: null,
    query: null,
    finalMaskIrle: null,
    draft: null,
    busy: false,
    error: null,
  };
}

export type ViewListener = (view: SessionView) => void;

/** Every state except "running" is terminal; no further steps or feedback. */
export function isTerminalState(state: string | null): boolean {
  return state !== null && state !== "running";
}

export class SessionController {
  private v: SessionView = emptyView();
  private listeners: ViewListener[] = [];

  constructor(private readonly api: ApiClient) {}

  view(): SessionView {
    return {
      ...this.v,
      detections: [...this.v.detections],
      lowBoxes: [...this.v.lowBoxes],
    };
  }

  onChange(listener: ViewListener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    const snapshot = this.view();
    for (const listener of this.listeners) listener(snapshot);
  }

  private fail(err: unknown): void {
    if (err instanceof ApiError) {
      this.v.error = typeof err.detail === "string" ? err.detail : JSON.stringify(err.detail);
    } else if (err instanceof NetworkError) {
      this.v.error = err.message;
    } else {
      throw err;
    }
  }

  /** Runs op under the single-in-flight guard; false when ignored or failed. */
  private async guarded(op: () => Promise<void>): Promise<boolean> {
    if (this.v.busy) return false;
    this.v.busy = true;
    this.v.error = null;
    this.emit();
    try {
      await op();
      return true;
    } catch (err) {
      this.fail(err);
      return false;
    } finally {
      this.v.busy = false;
      this.emit();
    }
  }

  private applyDetail(detail: SessionDetail): void {
    this.v.sessionId = detail.session_id;
    this.v.state = detail.state;
    this.v.iterations = detail.history.length;
    this.v.detections = detail.detections;
    this.v.report = detail.report;
    this.v.lowBoxes = detail.report ? [...detail.report.low_boxes] : [];
    this.v.query = detail.query;
    this.v.finalMaskIrle = detail.final_mask_irle;
  }

  private async refreshFromServer(id: string): Promise<void> {
    const detail = await this.api.getSession(id);
    this.applyDetail(detail);
    const latest = detail.history.length - 1;
    if (latest >= 0) {
      const payload = await this.api.getMask(id, latest);
      this.v.iteration = latest;
      this.v.maskIrle = payload;
      this.v.mask = decodeIrle(payload);
    } else {
      this.v.iteration = -1;
      this.v.maskIrle = null;
      this.v.mask = null;
    }
  }

  createSession(body: CreateRequest): Promise<boolean> {
    return this.guarded(async () => {
      const created = await this.api.createSession(body);
      await this.refreshFromServer(created.session_id);
      this.v.draft = null;
    });
  }

  loadSession(id: string): Promise<boolean> {
    return this.guarded(async () => {
      await this.refreshFromServer(id);
      this.v.draft = null;
    });
  }

  /** Move the iteration slider; the mask always comes from the server. */
  selectIteration(t: number): Promise<boolean> {
    const id = this.v.sessionId;
    if (id === null || t < 0 || t >= this.v.iterations) return Promise.resolve(false);
    return this.guarded(async () => {
      const payload = await this.api.getMask(id, t);
      this.v.iteration = t;
      this.v.maskIrle = payload;
      this.v.mask = decodeIrle(payload);
    });
  }

  drawBox(box: Box): void {
    this.v.draft = { kind: "box_prompt", box };
    this.v.error = null;
    this.emit();
  }

  setCorrection(text: string): void {
    const trimmed = text.trim();
    this.v.draft = trimmed ? { kind: "language_correction", text: trimmed } : null;
    this.v.error = null;
    this.emit();
  }

  clearDraft(): void {
    this.v.draft = null;
    this.emit();
  }

  /**
   * POST the pending draft as feedback. On failure (network or server
   * rejection) the draft is left intact so the clinician can retry or adjust.
   */
  submitDraft(feedbackId?: string): Promise<boolean> {
    const id = this.v.sessionId;
    const draft = this.v.draft;
    if (id === null || draft === null) return Promise.resolve(false);
    return this.guarded(async () => {
      await this.api.submitFeedback(id, {
        ...draft,
        received_at_iteration: Math.max(0, this.v.iterations - 1),
        ...(feedbackId ? { feedback_id: feedbackId } : {}),
      });
      this.v.draft = null;
      await this.refreshFromServer(id);
    });
  }

  runStep(): Promise<boolean> {
    const id = this.v.sessionId;
    if (id === null) return Promise.resolve(false);
    return this.guarded(async () => {
      await this.api.step(id);
      await this.refreshFromServer(id);
    });
  }

  accept(): Promise<boolean> {
    const id = this.v.sessionId;
    if (id === null) return Promise.resolve(false);
    return this.guarded(async () => {
      await this.api.finalize(id);
      await this.refreshFromServer(id);
    });
  }

  reject(feedbackId?: string): Promise<boolean> {
    const id = this.v.sessionId;
    if (id === null) return Promise.resolve(false);
    return this.guarded(async () => {
      await this.api.submitFeedback(id, {
        kind: "reject",
        ...(feedbackId ? { feedback_id: feedbackId } : {}),
      });
      await this.refreshFromServer(id);
    });
  }
}
