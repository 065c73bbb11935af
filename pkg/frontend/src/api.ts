/** Typed client for the gsi-engine HTTP service.
 *
 * The fetch implementation is injectable so stores and views can be tested
 * against a scripted transport; the default is the platform fetch.
 */

export type Profile = "engineer" | "planner" | "maintenance" | "resident";

export interface Citation {
  passage_id: string;
  doc_id: string;
  score: number;
  snippet: string;
}

export interface ChatReply {
  session_id: string;
  kind: "answer" | "clarification";
  text: string;
  citations: Citation[];
  grounded: boolean;
}

export interface TranscriptTurn {
  user_text: string;
  response: {
    kind: "answer" | "clarification";
    text: string;
    citations: string[];
    retrieval_trace: { passage_id: string; score: number; rank: number }[];
    constraint_flags: Record<string, boolean>;
  };
}

export interface SessionTranscript {
  session_id: string;
  profile: string | null;
  created_at: string;
  turns: TranscriptTurn[];
}

export interface RetrieveHit {
  passage_id: string;
  doc_id: string;
  score: number;
  rank: number;
  snippet: string;
}

export interface HealthReport {
  status: string;
  gateway: string;
  index: string | Record<string, unknown>;
  dataset: string | Record<string, unknown>;
}

/** A structured error from the service ({code, message} body). */
export class ServiceError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export interface ApiClientOptions {
  baseUrl: string;
  fetchImpl?: FetchLike;
}

export class ApiClient {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(options: ApiClientOptions) {
    this.baseUrl = options.baseUrl.replace(/\/+$/, "");
    this.fetchImpl = options.fetchImpl ?? ((input, init) => fetch(input, init));
  }

  async chat(body: {
    text: string;
    session_id?: string;
    profile?: Profile;
    image_summary?: string;
  }): Promise<ChatReply> {
    return this.request<ChatReply>("POST", "/chat", body);
  }

  async session(sessionId: string): Promise<SessionTranscript> {
    return this.request<SessionTranscript>(
      "GET",
      `/session/${encodeURIComponent(sessionId)}`,
    );
  }

  async retrieve(text: string, k?: number): Promise<{ k: number; hits: RetrieveHit[] }> {
    return this.request("POST", "/retrieve", k === undefined ? { text } : { text, k });
  }

  async health(): Promise<HealthReport> {
    return this.request<HealthReport>("GET", "/health");
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method, headers: { "content-type": "application/json" } };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
    }
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const payload = await response
      .json()
      .catch(() => ({ code: "bad_response", message: "response body was not JSON" }));
    if (!response.ok) {
      const error = payload as { code?: string; message?: string };
      throw new ServiceError(
        response.status,
        error.code ?? "unknown_error",
        error.message ?? `request failed with status ${response.status}`,
      );
    }
    return payload as T;
  }
}
