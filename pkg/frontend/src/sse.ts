/** Minimal fetch-based server-sent-events client.
 *
 * The service streams session events as `id:`/`event:`/`data:` frames.
 * We use fetch instead of EventSource so we can send a Last-Event-ID
 * header on reconnect and run the same code in tests under Node.
 */

export interface SseMessage {
  id?: string;
  event: string;
  data: string;
}

/** Parse one SSE byte stream into messages; comments and retry hints are
 * skipped. Handles frames split across arbitrary chunk boundaries. */
export async function* parseSse(
  stream: ReadableStream<Uint8Array>,
): AsyncGenerator<SseMessage> {
  const decoder = new TextDecoder();
  const reader = stream.getReader();
  let buffer = "";
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let cut: number;
      while ((cut = buffer.search(/\n\n|\r\n\r\n/)) >= 0) {
        const block = buffer.slice(0, cut);
        buffer = buffer.slice(cut + (buffer[cut] === "\r" ? 4 : 2));
        const msg = parseBlock(block);
        if (msg) yield msg;
      }
    }
    const tail = parseBlock(buffer);
    if (tail) yield tail;
  } finally {
    reader.releaseLock();
  }
}

function parseBlock(block: string): SseMessage | null {
  let id: string | undefined;
  let event = "message";
  const data: string[] = [];
  for (const raw of block.split(/\r?\n/)) {
    if (!raw || raw.startsWith(":")) continue; // blank or keep-alive comment
    const sep = raw.indexOf(":");
    const field = sep < 0 ? raw : raw.slice(0, sep);
    let value = sep < 0 ? "" : raw.slice(sep + 1);
    if (value.startsWith(" ")) value = value.slice(1);
    if (field === "id") id = value;
    else if (field === "event") event = value;
    else if (field === "data") data.push(value);
    // "retry" and unknown fields are ignored
  }
  if (data.length === 0) return null;
  return { id, event, data: data.join("\n") };
}

export interface StreamOptions {
  /** resume after this sequence number (0 = from the beginning) */
  after?: number;
  /** close after this many events (mirrors the service's ?limit=) */
  limit?: number;
  /** delay before reconnecting after a dropped stream */
  retryMs?: number;
  fetchFn?: typeof fetch;
}

export interface EventStreamHandle {
  close(): void;
  /** resolves when the stream is closed or the limit is reached */
  done: Promise<void>;
  /** highest sequence number seen so far */
  readonly lastSeq: number;
}

/** Subscribe to a session's event stream with automatic reconnection.
 *
 * On reconnect the last seen sequence number is carried both as an
 * `after` query parameter and a `Last-Event-ID` header, so no event is
 * delivered twice and none is lost across drops.
 */
export function openEventStream(
  url: string,
  onEvent: (seq: number, kind: string, payload: Record<string, unknown>) => void,
  opts: StreamOptions = {},
): EventStreamHandle {
  const fetchFn = opts.fetchFn ?? fetch;
  const retryMs = opts.retryMs ?? 2000;
  let lastSeq = opts.after ?? 0;
  let remaining = opts.limit ?? Infinity;
  let closed = false;
  const controller = new AbortController();

  const done = (async () => {
    while (!closed && remaining > 0) {
      const target = new URL(url, "http://placeholder.invalid");
      target.searchParams.set("after", String(lastSeq));
      if (Number.isFinite(remaining)) {
        target.searchParams.set("limit", String(remaining));
      }
      const resolved = url.startsWith("http")
        ? target.toString()
        : target.pathname + target.search;
      try {
        const res = await fetchFn(resolved, {
          headers: { Accept: "text/event-stream", "Last-Event-ID": String(lastSeq) },
          signal: controller.signal,
        });
        if (!res.ok || !res.body) throw new Error(`stream HTTP ${res.status}`);
        for await (const msg of parseSse(res.body)) {
          const seq = Number(msg.id ?? 0);
          if (seq <= lastSeq) continue; // replayed duplicate
          lastSeq = seq;
          remaining -= 1;
          onEvent(seq, msg.event, JSON.parse(msg.data));
          if (remaining <= 0) return;
        }
      } catch (err) {
        if (closed) return;
      }
      if (closed || remaining <= 0) return;
      await new Promise((r) => setTimeout(r, retryMs));
    }
  })();

  return {
    close() {
      closed = true;
      controller.abort();
    },
    done,
    get lastSeq() {
      return lastSeq;
    },
  };
}
