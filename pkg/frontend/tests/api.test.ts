import { describe, expect, it } from "vitest";

import { ServiceError, TeachClient } from "../src/api.js";

interface Captured {
  url: string;
  method: string;
  body?: BodyInit | null;
  headers?: HeadersInit;
}

function clientWith(
  status: number,
  payload: unknown,
): { client: TeachClient; captured: Captured[] } {
  const captured: Captured[] = [];
  const fakeFetch: typeof fetch = async (input, init) => {
    captured.push({
      url: String(input),
      method: init?.method ?? "GET",
      body: init?.body,
      headers: init?.headers,
    });
    return new Response(JSON.stringify(payload), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { client: new TeachClient("http://svc", fakeFetch), captured };
}

const png = new Blob([new Uint8Array([137, 80, 78, 71])], { type: "image/png" });

describe("TeachClient", () => {
  it("fetches health from the base url", async () => {
    const { client, captured } = clientWith(200, { status: "ok", sessions: 0 });
    const health = await client.health();
    expect(health.status).toBe("ok");
    expect(captured[0]!.url).toBe("http://svc/health");
  });

  it("creates sessions with POST", async () => {
    const { client, captured } = clientWith(201, { session_id: "s1", fingerprint: "f" });
    const session = await client.createSession({ k: 1 });
    expect(session.session_id).toBe("s1");
    expect(captured[0]!.method).toBe("POST");
    expect(JSON.parse(String(captured[0]!.body))).toEqual({ k: 1 });
  });

  it("teaches with a multipart rgb/depth/label form", async () => {
    const { client, captured } = clientWith(200, {
      event: 1, label: "mug", category_id: 0, new_category: true, support_size: 1,
    });
    const result = await client.teach("s1", png, png, "mug", "desk-cam");
    expect(result.new_category).toBe(true);
    expect(captured[0]!.url).toBe("http://svc/sessions/s1/teach");
    const form = captured[0]!.body as FormData;
    expect(form.get("label")).toBe("mug");
    expect(form.get("tag")).toBe("desk-cam");
    expect((form.get("rgb") as File).name).toBe("rgb.png");
    expect((form.get("depth") as File).name).toBe("depth.png");
  });

  it("asks without a label field", async () => {
    const { client, captured } = clientWith(200, {
      event: 2, predicted: "mug", scores: { mug: 0.9 }, latency_ms: 3.2,
    });
    const result = await client.ask("s1", png, png);
    expect(result.predicted).toBe("mug");
    const form = captured[0]!.body as FormData;
    expect(form.get("label")).toBeNull();
  });

  it("corrects by ask event id", async () => {
    const { client, captured } = clientWith(200, {
      event: 3, label: "bowl", category_id: 1, support_size: 2,
    });
    await client.correct("s1", 2, "bowl");
    expect(captured[0]!.url).toBe("http://svc/sessions/s1/correct");
    expect(JSON.parse(String(captured[0]!.body))).toEqual({
      ask_event: 2,
      label: "bowl",
    });
  });

  it("raises ServiceError from the error envelope", async () => {
    const { client } = clientWith(409, {
      error: { code: "conflict", message: "ask 2 was already corrected" },
    });
    const err = await client.correct("s1", 2, "bowl").catch((e) => e);
    expect(err).toBeInstanceOf(ServiceError);
    expect(err.status).toBe(409);
    expect(err.code).toBe("conflict");
    expect(err.message).toContain("already corrected");
  });

  it("falls back to a generic error on non-JSON bodies", async () => {
    const fakeFetch: typeof fetch = async () =>
      new Response("<html>boom</html>", { status: 502 });
    const client = new TeachClient("http://svc", fakeFetch);
    const err = await client.health().catch((e) => e);
    expect(err).toBeInstanceOf(ServiceError);
    expect(err.code).toBe("http-error");
    expect(err.message).toBe("HTTP 502");
  });
});
