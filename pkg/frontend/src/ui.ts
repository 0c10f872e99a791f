/** DOM rendering for the teach UI.
 *
 * Every render is stateless: the whole panel is rebuilt from the latest
 * `SessionState` plus the most recent ask, so the UI can always recover
 * by re-fetching `/sessions/<id>/state` (e.g. after an SSE reconnect).
 */

import {
  AskResult,
  CategoryInfo,
  SessionEvent,
  SessionState,
  UNKNOWN_LABEL,
} from "./types.js";

export interface AppHandlers {
  onTeach(rgb: File, depth: File, label: string): void;
  onAsk(rgb: File, depth: File): void;
  onCorrect(askEvent: number, label: string): void;
}

export interface AppView {
  state: SessionState | null;
  lastAsk: AskResult | null;
  /** ask events that already received a correction */
  corrected: ReadonlySet<number>;
  events: SessionEvent[];
  error: string | null;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function categoryChips(categories: CategoryInfo[]): HTMLElement {
  const row = el("div", "chips");
  if (categories.length === 0) {
    row.appendChild(el("span", "chips-empty", "no categories taught yet"));
    return row;
  }
  for (const cat of categories) {
    const chip = el("span", "chip");
    chip.appendChild(el("span", "chip-label", cat.label));
    chip.appendChild(el("span", "chip-count", String(cat.support_size)));
    row.appendChild(chip);
  }
  return row;
}

export function sessionSummary(state: SessionState): HTMLElement {
  const box = el("div", "summary");
  box.appendChild(el("span", "summary-item", `support ${state.support_size}`));
  box.appendChild(
    el("span", "summary-item", `categories ${state.categories.length}`),
  );
  const gca = state.gca === null ? "—" : `${state.gca.toFixed(1)}%`;
  box.appendChild(el("span", "summary-item summary-gca", `GCA ${gca}`));
  box.appendChild(el("span", "summary-item", `k=${state.k}`));
  return box;
}

/** The answer card: predicted label (with an "unknown" badge when the
 * support set is empty), per-category scores sorted best-first, and a
 * correction form while the ask is still correctable. */
export function predictionCard(
  ask: AskResult | null,
  corrected: ReadonlySet<number>,
  onCorrect: (askEvent: number, label: string) => void,
): HTMLElement {
  const card = el("div", "card prediction");
  card.appendChild(el("h3", undefined, "answer"));
  if (!ask) {
    card.appendChild(el("p", "muted", "ask something"));
    return card;
  }
  const headline = el("div", "predicted");
  if (ask.predicted === UNKNOWN_LABEL) {
    headline.appendChild(el("span", "badge badge-unknown", UNKNOWN_LABEL));
  } else {
    headline.appendChild(el("span", "predicted-label", ask.predicted));
  }
  headline.appendChild(el("span", "latency", `${ask.latency_ms} ms`));
  card.appendChild(headline);

  const ranked = Object.entries(ask.scores).sort((a, b) => b[1] - a[1]);
  const scores = el("ul", "scores");
  for (const [label, sim] of ranked) {
    const li = el("li");
    li.appendChild(el("span", "score-label", label));
    li.appendChild(el("span", "score-value", sim.toFixed(3)));
    scores.appendChild(li);
  }
  card.appendChild(scores);

  if (corrected.has(ask.event)) {
    card.appendChild(el("p", "corrected-note", `corrected (event ${ask.event})`));
  } else {
    const form = el("form", "correct-form");
    const input = el("input") as HTMLInputElement;
    input.name = "label";
    input.placeholder = "actually a …";
    const button = el("button", undefined, "correct");
    button.type = "submit";
    form.append(input, button);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      if (input.value.trim()) onCorrect(ask.event, input.value.trim());
    });
    card.appendChild(form);
  }
  return card;
}

export function eventLog(events: SessionEvent[]): HTMLElement {
  const list = el("ol", "events");
  for (const ev of events) {
    const li = el("li", `event event-${ev.kind}`);
    li.appendChild(el("span", "event-seq", `#${ev.seq}`));
    li.appendChild(el("span", "event-kind", ev.kind));
    let detail = "";
    if (ev.kind === "teach") detail = `${ev.label}`;
    else if (ev.kind === "ask") detail = `→ ${ev.predicted}`;
    else if (ev.kind === "correct") detail = `#${ev.ask_seq} → ${ev.label}`;
    li.appendChild(el("span", "event-detail", detail));
    list.appendChild(li);
  }
  return list;
}

function sampleForm(
  title: string,
  withLabel: boolean,
  onSubmit: (rgb: File, depth: File, label: string) => void,
): HTMLElement {
  const card = el("div", `card ${title}`);
  card.appendChild(el("h3", undefined, title));
  const form = el("form");
  const rgb = el("input") as HTMLInputElement;
  rgb.type = "file";
  rgb.name = "rgb";
  rgb.accept = "image/png";
  const depth = el("input") as HTMLInputElement;
  depth.type = "file";
  depth.name = "depth";
  depth.accept = "image/png";
  form.append(labelled("rgb", rgb), labelled("depth (16-bit)", depth));
  let label: HTMLInputElement | null = null;
  if (withLabel) {
    label = el("input") as HTMLInputElement;
    label.name = "label";
    label.placeholder = "category label";
    form.appendChild(labelled("label", label));
  }
  const button = el("button", undefined, title);
  button.type = "submit";
  form.appendChild(button);
  form.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const r = rgb.files?.[0];
    const d = depth.files?.[0];
    if (!r || !d) return;
    if (withLabel && !label?.value.trim()) return;
    onSubmit(r, d, label?.value.trim() ?? "");
  });
  card.appendChild(form);
  return card;
}

function labelled(text: string, input: HTMLElement): HTMLElement {
  const wrap = el("label", "field");
  wrap.appendChild(el("span", "field-name", text));
  wrap.appendChild(input);
  return wrap;
}

export function renderApp(
  root: HTMLElement,
  view: AppView,
  handlers: AppHandlers,
): void {
  root.textContent = ""; // full stateless rebuild
  if (view.error) {
    root.appendChild(el("div", "error-banner", view.error));
  }
  if (!view.state) {
    root.appendChild(el("p", "muted", "no session"));
    return;
  }
  root.appendChild(sessionSummary(view.state));
  root.appendChild(categoryChips(view.state.categories));

  const cards = el("div", "cards");
  cards.appendChild(sampleForm("teach", true, handlers.onTeach));
  cards.appendChild(
    sampleForm("ask", false, (rgb, depth) => handlers.onAsk(rgb, depth)),
  );
  cards.appendChild(predictionCard(view.lastAsk, view.corrected, handlers.onCorrect));
  root.appendChild(cards);
  root.appendChild(eventLog(view.events));
}
