/**
 * Typed client for the session service. Field names mirror the wire format
 * (snake_case) so payloads round-trip without mapping layers.
 */

export interface Box {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface DetectionDto {
  box: Box;
  label: string;
  confidence: number;
}

export interface ReportDto {
  coverage: number;
  per_box_overlap: Array<[number, number]>;
  gate: boolean;
  low_boxes: number[];
  box_union_area: number;
}

export interface RecordDto {
  t: number;
  strategy: string | null;
  refined_boxes: number[];
  feedback_applied: string[];
  faults: string[];
  complete: boolean;
  report: ReportDto | null;
  report_after: ReportDto | null;
}

export interface SessionSummary {
  session_id: string;
  state: string;
  t: number | null;
  report: ReportDto | null;
  mask_irle: string | null;
  fault: string | null;
  rounds: number;
}

export interface SessionDetail extends SessionSummary {
  query: string;
  original_query: string;
  config: Record<string, unknown>;
  detections: DetectionDto[];
  history: RecordDto[];
  locked_regions: Box[];
  pending_feedback: string[];
  final_mask_irle: string | null;
}

export type StepResponse = SessionSummary & { record: RecordDto };

export interface FeedbackAck {
  feedback_id: string;
  state: string;
  queued: boolean;
}

export interface FinalizeResponse {
  session_id: string;
  state: string;
  mask_irle: string | null;
}

export interface HealthResponse {
  status: string;
  backend_kind: string;
  sessions: number;
}

export interface CreateRequest {
  image_png_b64: string;
  query: string;
  session_id?: string;
  config?: Record<string, unknown>;
}

export interface FeedbackRequest {
  kind: "box_prompt" | "language_correction" | "reference_annotation" | "accept" | "reject";
  box?: Box;
  text?: string;
  mask_irle?: string;
  region?: Box;
  received_at_iteration?: number;
  feedback_id?: string;
}

/** Server rejected the request; detail is the server's message, verbatim. */
export class ApiError extends Error {
  constructor(readonly status: number, readonly detail: unknown) {
    super(typeof detail === "string" ? detail : JSON.stringify(detail));
    this.name = "ApiError";
  }
}

/** The request never reached the server (or the response never arrived). */
export class NetworkError extends Error {
  constructor(cause: unknown) {
    super(`network failure: ${cause instanceof Error ? cause.message : String(cause)}`);
    this.name = "NetworkError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request(method: string, path: string, body?: unknown): Promise<Response> {
    let response: Response;
    try {
      response = await this.fetchImpl(this.base + path, {
        method,
        headers: body === undefined ? undefined : { "content-type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new NetworkError(err);
    }
    if (!response.ok) {
      let detail: unknown;
      const text = await response.text();
      try {
        const parsed = JSON.parse(text) as { detail?: unknown };
        detail = parsed.detail ?? parsed;
      } catch {
        detail = text;
      }
      throw new ApiError(response.status, detail);
    }
    return response;
  }

  private async json<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.request(method, path, body);
    return (await response.json()) as T;
  }

  createSession(body: CreateRequest): Promise<SessionSummary> {
    return this.json("POST", "/v1/sessions", body);
  }

  getSession(id: string): Promise<SessionDetail> {
    return this.json("GET", `/v1/sessions/${encodeURIComponent(id)}`);
  }

  step(id: string): Promise<StepResponse> {
    return this.json("POST", `/v1/sessions/${encodeURIComponent(id)}/step`);
  }

  submitFeedback(id: string, fb: FeedbackRequest): Promise<FeedbackAck> {
    return this.json("POST", `/v1/sessions/${encodeURIComponent(id)}/feedback`, fb);
  }

  finalize(id: string): Promise<FinalizeResponse> {
    return this.json("POST", `/v1/sessions/${encodeURIComponent(id)}/finalize`);
  }

  async getMask(id: string, t: number): Promise<string> {
    const response = await this.request("GET", `/v1/sessions/${encodeURIComponent(id)}/mask/${t}`);
    return response.text();
  }

  health(): Promise<HealthResponse> {
    return this.json("GET", "/healthz");
  }
}
