/** Typed HTTP client for the rgbdvit teaching service. */

import { openEventStream, EventStreamHandle, StreamOptions } from "./sse.js";
import {
  AskResult,
  CorrectResult,
  HealthInfo,
  SessionHandle,
  SessionState,
  TeachResult,
} from "./types.js";

/** Error envelope raised by the service: {"error": {"code", "message"}}. */
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

export class TeachClient {
  constructor(
    public readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, init);
    if (!res.ok) {
      let code = "http-error";
      let message = `HTTP ${res.status}`;
      try {
        const doc = (await res.json()) as { error?: { code?: string; message?: string } };
        code = doc.error?.code ?? code;
        message = doc.error?.message ?? message;
      } catch {
        // non-JSON error body; keep the fallback message
      }
      throw new ServiceError(res.status, code, message);
    }
    return (await res.json()) as T;
  }

  health(): Promise<HealthInfo> {
    return this.request<HealthInfo>("/health");
  }

  createSession(body?: { k?: number; encoding?: string }): Promise<SessionHandle> {
    return this.request<SessionHandle>("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body ?? {}),
    });
  }

  state(sessionId: string): Promise<SessionState> {
    return this.request<SessionState>(`/sessions/${sessionId}/state`);
  }

  /** Upload an RGB + 16-bit depth PNG pair and teach it as `label`. */
  teach(
    sessionId: string,
    rgb: Blob,
    depth: Blob,
    label: string,
    tag?: string,
  ): Promise<TeachResult> {
    const form = this.sampleForm(rgb, depth, tag);
    form.set("label", label);
    return this.request<TeachResult>(`/sessions/${sessionId}/teach`, {
      method: "POST",
      body: form,
    });
  }

  ask(sessionId: string, rgb: Blob, depth: Blob, tag?: string): Promise<AskResult> {
    return this.request<AskResult>(`/sessions/${sessionId}/ask`, {
      method: "POST",
      body: this.sampleForm(rgb, depth, tag),
    });
  }

  correct(sessionId: string, askEvent: number, label: string): Promise<CorrectResult> {
    return this.request<CorrectResult>(`/sessions/${sessionId}/correct`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ ask_event: askEvent, label }),
    });
  }

  save(sessionId: string, path: string): Promise<{ path: string; events: number }> {
    return this.request(`/sessions/${sessionId}/save`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ path }),
    });
  }

  load(path: string): Promise<SessionHandle & { support_size: number }> {
    return this.request("/sessions/load", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ path }),
    });
  }

  /** Live event stream with reconnect-from-last-sequence. */
  events(
    sessionId: string,
    onEvent: (seq: number, kind: string, payload: Record<string, unknown>) => void,
    opts: StreamOptions = {},
  ): EventStreamHandle {
    return openEventStream(`${this.baseUrl}/sessions/${sessionId}/events`, onEvent, {
      fetchFn: this.fetchFn,
      ...opts,
    });
  }

  private sampleForm(rgb: Blob, depth: Blob, tag?: string): FormData {
    const form = new FormData();
    form.set("rgb", new File([rgb], "rgb.png", { type: "image/png" }));
    form.set("depth", new File([depth], "depth.png", { type: "image/png" }));
    if (tag) form.set("tag", tag);
    return form;
  }
}
