/** End-to-end teach → ask-wrong → correct → ask-right loop.
 *
 * The real TeachClient talks to an in-memory fake that implements the
 * service wire contract (multipart teach/ask, JSON correct, the error
 * envelope, the state document, and the SSE replay endpoint). The fake
 * predicts by nearest mean pixel value with an exact-bytes override, so
 * a correction that stores the queried image flips the next answer.
 */

import { describe, expect, it } from "vitest";

import { ServiceError, TeachClient } from "../src/api.js";
import { renderApp } from "../src/ui.js";
import { AskResult, SessionEvent, UNKNOWN_LABEL } from "../src/types.js";

interface Sample {
  key: string;
  mean: number;
}

interface FakeEvent {
  seq: number;
  kind: "teach" | "ask" | "correct";
  payload: Record<string, unknown>;
}

async function sampleOf(file: File): Promise<Sample> {
  const bytes = new Uint8Array(await file.arrayBuffer());
  let sum = 0;
  for (const b of bytes) sum += b;
  return { key: bytes.join(","), mean: bytes.length ? sum / bytes.length : 0 };
}

function json(doc: unknown, status = 200): Response {
  return new Response(JSON.stringify(doc), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

function failure(status: number, code: string, message: string): Response {
  return json({ error: { code, message } }, status);
}

class FakeTeachService {
  private categories = new Map<string, { id: number; support: Sample[] }>();
  private events: FakeEvent[] = [];
  private asks = new Map<number, { predicted: string; sample: Sample }>();
  private corrected = new Set<number>();

  readonly fetch: typeof fetch = async (input, init) => this.route(input, init);

  private async route(input: RequestInfo | URL, init?: RequestInit): Promise<Response> {
    const url = new URL(String(input), "http://fake.test");
    const method = init?.method ?? "GET";
    const path = url.pathname;

    if (method === "POST" && path === "/sessions") {
      return json({ session_id: "fake-1", fingerprint: "fp-fake" }, 201);
    }
    if (!path.startsWith("/sessions/fake-1/")) {
      return failure(404, "not-found", `no such session: ${path}`);
    }
    if (method === "GET" && path.endsWith("/state")) return json(this.state());
    if (method === "GET" && path.endsWith("/events")) return this.stream(url, init);
    if (method === "POST" && path.endsWith("/teach")) return this.teach(init);
    if (method === "POST" && path.endsWith("/ask")) return this.ask(init);
    if (method === "POST" && path.endsWith("/correct")) return this.correct(init);
    return failure(404, "not-found", `${method} ${path}`);
  }

  private push(kind: FakeEvent["kind"], payload: Record<string, unknown>): number {
    const seq = this.events.length + 1;
    this.events.push({ seq, kind, payload });
    return seq;
  }

  private supportSize(): number {
    let total = 0;
    for (const cat of this.categories.values()) total += cat.support.length;
    return total;
  }

  private store(label: string, sample: Sample): { id: number; fresh: boolean } {
    let cat = this.categories.get(label);
    const fresh = !cat;
    if (!cat) {
      cat = { id: this.categories.size, support: [] };
      this.categories.set(label, cat);
    }
    cat.support.push(sample);
    return { id: cat.id, fresh };
  }

  private async teach(init?: RequestInit): Promise<Response> {
    const form = init?.body;
    if (!(form instanceof FormData)) {
      return failure(400, "payload-error", "expected multipart form data");
    }
    const rgb = form.get("rgb");
    const depth = form.get("depth");
    const label = form.get("label");
    if (!(rgb instanceof File) || !(depth instanceof File) || typeof label !== "string") {
      return failure(400, "payload-error", "teach needs rgb, depth and label");
    }
    const sample = await sampleOf(rgb);
    const { id, fresh } = this.store(label, sample);
    const seq = this.push("teach", { label, category_id: id, new_category: fresh });
    return json({
      event: seq,
      label,
      category_id: id,
      new_category: fresh,
      support_size: this.supportSize(),
    });
  }

  private async ask(init?: RequestInit): Promise<Response> {
    const form = init?.body;
    if (!(form instanceof FormData) || !(form.get("rgb") instanceof File)) {
      return failure(400, "payload-error", "ask needs rgb and depth");
    }
    const sample = await sampleOf(form.get("rgb") as File);
    const scores: Record<string, number> = {};
    for (const [label, cat] of this.categories) {
      let best = 0;
      for (const s of cat.support) {
        const sim = s.key === sample.key ? 1 : 1 / (1 + Math.abs(s.mean - sample.mean));
        if (sim > best) best = sim;
      }
      scores[label] = best;
    }
    let predicted = UNKNOWN_LABEL;
    for (const [label, sim] of Object.entries(scores)) {
      if (predicted === UNKNOWN_LABEL || sim > scores[predicted]!) predicted = label;
    }
    const seq = this.push("ask", { predicted, scores });
    this.asks.set(seq, { predicted, sample });
    return json({ event: seq, predicted, scores, latency_ms: 0.1 });
  }

  private async correct(init?: RequestInit): Promise<Response> {
    const body = JSON.parse(String(init?.body)) as { ask_event?: number; label?: string };
    if (typeof body.ask_event !== "number" || typeof body.label !== "string") {
      return failure(400, "payload-error", "correct needs ask_event and label");
    }
    const ask = this.asks.get(body.ask_event);
    if (!ask) return failure(404, "not-found", `no ask event ${body.ask_event}`);
    if (this.corrected.has(body.ask_event)) {
      return failure(409, "conflict", `ask ${body.ask_event} was already corrected`);
    }
    if (ask.predicted === body.label) {
      return failure(409, "conflict", "correction matches the prediction");
    }
    const { id } = this.store(body.label, ask.sample);
    this.corrected.add(body.ask_event);
    const seq = this.push("correct", { ask_seq: body.ask_event, label: body.label });
    return json({
      event: seq,
      label: body.label,
      category_id: id,
      support_size: this.supportSize(),
    });
  }

  private state(): Record<string, unknown> {
    const graded = [...this.asks].filter(([, a]) => a.predicted !== UNKNOWN_LABEL);
    const wrong = graded.filter(([seq]) => this.corrected.has(seq)).length;
    return {
      session_id: "fake-1",
      categories: [...this.categories].map(([label, cat]) => ({
        label,
        category_id: cat.id,
        support_size: cat.support.length,
      })),
      support_size: this.supportSize(),
      gca: graded.length === 0 ? null : (100 * (graded.length - wrong)) / graded.length,
      event_count: this.events.length,
      last_seq: this.events.length,
      fingerprint: "fp-fake",
      encoding: "surfnorm",
      k: 3,
    };
  }

  private stream(url: URL, init?: RequestInit): Response {
    const headers = new Headers(init?.headers);
    const after = Math.max(
      Number(url.searchParams.get("after") ?? 0),
      Number(headers.get("Last-Event-ID") ?? 0),
    );
    const limit = Number(url.searchParams.get("limit") ?? Infinity);
    const frames = this.events
      .filter((ev) => ev.seq > after)
      .slice(0, limit)
      .map(
        (ev) =>
          `id: ${ev.seq}\nevent: ${ev.kind}\ndata: ${JSON.stringify(ev.payload)}\n\n`,
      );
    return new Response("retry: 2000\n\n" + frames.join(""), {
      status: 200,
      headers: { "Content-Type": "text/event-stream" },
    });
  }
}

/** A flat "image": all pixels share one value, so the fake's mean-pixel
 * metric is easy to reason about. */
function img(fill: number): Blob {
  return new Blob([new Uint8Array(16).fill(fill)], { type: "image/png" });
}

describe("teach/ask/correct loop over the wire", () => {
  it("learns from a correction: wrong answer, then exact recall", async () => {
    const svc = new FakeTeachService();
    const client = new TeachClient("", svc.fetch);
    const depth = img(1);

    const session = await client.createSession();
    expect(session.session_id).toBe("fake-1");
    const sid = session.session_id;

    // 1. asking an empty session is answered with "unknown", ungraded
    const blank = await client.ask(sid, img(90), depth);
    expect(blank.predicted).toBe(UNKNOWN_LABEL);
    expect(blank.scores).toEqual({});
    expect((await client.state(sid)).gca).toBeNull();

    // 2. teach a mug and a bowl
    const mug = await client.teach(sid, img(10), depth, "mug");
    expect(mug.new_category).toBe(true);
    const bowl = await client.teach(sid, img(200), depth, "bowl");
    expect(bowl.support_size).toBe(2);

    // 3. this mug photographs much brighter, so the answer is wrong
    const shinyMug = img(180);
    const wrong = await client.ask(sid, shinyMug, depth);
    expect(wrong.predicted).toBe("bowl");
    expect(wrong.scores["bowl"]!).toBeGreaterThan(wrong.scores["mug"]!);
    expect((await client.state(sid)).gca).toBe(100); // graded, not yet corrected

    // 4. correct it; the sample joins the mug support set
    const fixed = await client.correct(sid, wrong.event, "mug");
    expect(fixed.label).toBe("mug");
    expect(fixed.support_size).toBe(3);
    const afterFix = await client.state(sid);
    expect(afterFix.gca).toBe(0);
    expect(afterFix.categories).toEqual([
      { label: "mug", category_id: 0, support_size: 2 },
      { label: "bowl", category_id: 1, support_size: 1 },
    ]);

    // 5. the same image is now answered correctly (exact support hit)
    const right = await client.ask(sid, shinyMug, depth);
    expect(right.predicted).toBe("mug");
    expect(right.scores["mug"]).toBe(1);
    expect((await client.state(sid)).gca).toBe(50);

    // 6. a second correction of the same ask is refused
    const dup = await client.correct(sid, wrong.event, "bowl").catch((e) => e);
    expect(dup).toBeInstanceOf(ServiceError);
    expect((dup as ServiceError).status).toBe(409);
    expect((dup as ServiceError).code).toBe("conflict");

    // 7. the event stream replays the whole story in order
    const seen: SessionEvent[] = [];
    const stream = client.events(
      sid,
      (seq, kind, payload) => seen.push({ seq, kind, ...payload } as SessionEvent),
      { limit: 6, retryMs: 1 },
    );
    await stream.done;
    expect(seen.map((ev) => [ev.seq, ev.kind])).toEqual([
      [1, "ask"],
      [2, "teach"],
      [3, "teach"],
      [4, "ask"],
      [5, "correct"],
      [6, "ask"],
    ]);
    expect(seen[4]!.ask_seq).toBe(wrong.event);
    expect(seen[4]!.label).toBe("mug");

    // 8. the UI rebuilds the same story from state + events alone
    const root = document.createElement("div");
    renderApp(
      root,
      {
        state: await client.state(sid),
        lastAsk: right,
        corrected: new Set([wrong.event]),
        events: seen,
        error: null,
      },
      { onTeach: () => {}, onAsk: () => {}, onCorrect: () => {} },
    );
    const chips = [...root.querySelectorAll(".chip")].map((chip) => chip.textContent);
    expect(chips).toEqual(["mug2", "bowl1"]);
    expect(root.querySelector(".predicted-label")!.textContent).toBe("mug");
    expect(root.querySelector(".correct-form")).not.toBeNull(); // latest ask still open
    expect(root.querySelectorAll(".events li")).toHaveLength(6);
    expect(root.querySelector(".summary-gca")!.textContent).toBe("GCA 50.0%");
  });

  it("resumes the stream from the last sequence after a drop", async () => {
    const svc = new FakeTeachService();
    const client = new TeachClient("", svc.fetch);
    const sid = (await client.createSession()).session_id;
    const depth = img(1);
    await client.teach(sid, img(10), depth, "mug");
    await client.teach(sid, img(200), depth, "bowl");

    // read only the first event, then reconnect for the rest
    const first: number[] = [];
    const head = client.events(sid, (seq) => first.push(seq), { limit: 1, retryMs: 1 });
    await head.done;
    expect(first).toEqual([1]);

    const rest: number[] = [];
    const tail = client.events(sid, (seq) => rest.push(seq), {
      after: head.lastSeq,
      limit: 1,
      retryMs: 1,
    });
    await tail.done;
    expect(rest).toEqual([2]); // no duplicate of event 1
  });

  it("renders the unknown badge for an empty-support answer", async () => {
    const svc = new FakeTeachService();
    const client = new TeachClient("", svc.fetch);
    const sid = (await client.createSession()).session_id;
    const blank: AskResult = await client.ask(sid, img(42), img(1));

    const root = document.createElement("div");
    renderApp(
      root,
      {
        state: await client.state(sid),
        lastAsk: blank,
        corrected: new Set(),
        events: [],
        error: null,
      },
      { onTeach: () => {}, onAsk: () => {}, onCorrect: () => {} },
    );
    expect(root.querySelector(".badge-unknown")!.textContent).toBe(UNKNOWN_LABEL);
    expect(root.textContent).toContain("no categories taught yet");
  });
});
