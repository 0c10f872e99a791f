/** Browser bootstrap: one session against the service, stateless
 * re-render on every change, live event log over SSE.
 *
 * The API base defaults to the page origin; override with ?api=http://host:port
 * when the UI is served from somewhere else.
 */

import { ServiceError, TeachClient } from "./api.js";
import { AppView, renderApp } from "./ui.js";
import { AskResult, SessionEvent } from "./types.js";

const params = new URLSearchParams(location.search);
const base = params.get("api") ?? "";
const client = new TeachClient(base);
const root = document.getElementById("app")!;

const view: AppView = {
  state: null,
  lastAsk: null,
  corrected: new Set<number>(),
  events: [],
  error: null,
};

async function refresh(sessionId: string): Promise<void> {
  view.state = await client.state(sessionId);
  draw();
}

function draw(): void {
  renderApp(root, view, {
    onTeach: (rgb, depth, label) => run(() => client.teach(sessionId, rgb, depth, label)),
    onAsk: (rgb, depth) =>
      run(async () => {
        view.lastAsk = (await client.ask(sessionId, rgb, depth)) as AskResult;
      }),
    onCorrect: (askEvent, label) =>
      run(async () => {
        await client.correct(sessionId, askEvent, label);
        (view.corrected as Set<number>).add(askEvent);
      }),
  });
}

function run(op: () => Promise<unknown>): void {
  op()
    .then(() => {
      view.error = null;
      return refresh(sessionId);
    })
    .catch((err) => {
      view.error =
        err instanceof ServiceError ? `${err.code}: ${err.message}` : String(err);
      draw();
    });
}

let sessionId = "";

async function boot(): Promise<void> {
  const health = await client.health();
  document.title = `teach — ${health.fusion.mode} / ${health.encoding}`;
  sessionId = (await client.createSession()).session_id;
  await refresh(sessionId);
  client.events(sessionId, (seq, kind, payload) => {
    view.events.push({ seq, kind, ...payload } as SessionEvent);
    // any event can change support/GCA; re-pull the state
    void refresh(sessionId);
  });
}

boot().catch((err) => {
  view.error = String(err);
  draw();
});
