import { streamSse, SseEvent } from "./sse.js";
import { SamplerSettings, SessionInfo } from "./types.js";

export class ApiError extends Error {
  constructor(message: string, public status: number, public field?: string) {
    super(message);
  }
}

async function asApiError(resp: Response): Promise<ApiError> {
  let message = resp.statusText;
  let field: string | undefined;
  try {
    const body = await resp.json();
    message = body.error ?? message;
    field = body.field;
  } catch {
    // keep the status text
  }
  return new ApiError(message, resp.status, field);
}

export class ChatApi {
  constructor(public baseUrl: string) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async createSession(overrides: Partial<SamplerSettings> = {}): Promise<{ session_id: string; sampler: SamplerSettings }> {
    const resp = await fetch(this.url("/v1/sessions"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(overrides),
    });
    if (!resp.ok) throw await asApiError(resp);
    return resp.json();
  }

  /** POST a message and yield the token/done events of its SSE stream. */
  async *streamMessage(
    sessionId: string,
    text: string,
    overrides: Partial<SamplerSettings> = {},
    debug = false,
  ): AsyncGenerator<SseEvent> {
    const resp = await fetch(this.url(`/v1/sessions/${sessionId}/messages`), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text, debug, ...overrides }),
    });
    if (!resp.ok || !resp.body) throw await asApiError(resp);
    yield* streamSse(resp.body);
  }

  async getSession(sessionId: string): Promise<SessionInfo> {
    const resp = await fetch(this.url(`/v1/sessions/${sessionId}`));
    if (!resp.ok) throw await asApiError(resp);
    return resp.json();
  }

  async health(): Promise<Record<string, unknown>> {
    const resp = await fetch(this.url("/v1/health"));
    if (!resp.ok) throw await asApiError(resp);
    return resp.json();
  }

  async metrics(): Promise<Record<string, unknown>> {
    const resp = await fetch(this.url("/v1/metrics"));
    if (!resp.ok) throw await asApiError(resp);
    return resp.json();
  }
}
