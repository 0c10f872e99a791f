import { describe, expect, it } from "vitest";

import {
  AppView,
  categoryChips,
  eventLog,
  predictionCard,
  renderApp,
  sessionSummary,
} from "../src/ui.js";
import { AskResult, SessionState } from "../src/types.js";

const state: SessionState = {
  session_id: "s1",
  categories: [
    { label: "mug", category_id: 0, support_size: 3 },
    { label: "bowl", category_id: 1, support_size: 1 },
  ],
  support_size: 4,
  gca: 75.0,
  event_count: 6,
  last_seq: 6,
  fingerprint: "f",
  encoding: "surfnorm",
  k: 3,
};

describe("categoryChips", () => {
  it("renders one chip per category with its support count", () => {
    const chips = categoryChips(state.categories);
    const labels = [...chips.querySelectorAll(".chip-label")].map((n) => n.textContent);
    const counts = [...chips.querySelectorAll(".chip-count")].map((n) => n.textContent);
    expect(labels).toEqual(["mug", "bowl"]);
    expect(counts).toEqual(["3", "1"]);
  });

  it("shows a placeholder when nothing was taught", () => {
    expect(categoryChips([]).textContent).toContain("no categories");
  });
});

describe("sessionSummary", () => {
  it("shows support, categories and GCA", () => {
    const text = sessionSummary(state).textContent!;
    expect(text).toContain("support 4");
    expect(text).toContain("categories 2");
    expect(text).toContain("GCA 75.0%");
  });

  it("renders a dash before any graded ask", () => {
    expect(sessionSummary({ ...state, gca: null }).textContent).toContain("GCA —");
  });
});

describe("predictionCard", () => {
  const ask: AskResult = {
    event: 5,
    predicted: "mug",
    scores: { bowl: 0.21, mug: 0.92 },
    latency_ms: 4.2,
  };

  it("shows the predicted label and best-first scores", () => {
    const card = predictionCard(ask, new Set(), () => {});
    expect(card.querySelector(".predicted-label")!.textContent).toBe("mug");
    const rows = [...card.querySelectorAll(".score-label")].map((n) => n.textContent);
    expect(rows).toEqual(["mug", "bowl"]); // sorted by similarity
    expect(card.querySelector(".badge-unknown")).toBeNull();
  });

  it("marks empty-support answers with an unknown badge and no scores", () => {
    const card = predictionCard(
      { event: 1, predicted: "unknown", scores: {}, latency_ms: 1 },
      new Set(),
      () => {},
    );
    expect(card.querySelector(".badge-unknown")!.textContent).toBe("unknown");
    expect(card.querySelectorAll(".scores li")).toHaveLength(0);
  });

  it("submits a correction for the shown ask event", () => {
    let got: [number, string] | null = null;
    const card = predictionCard(ask, new Set(), (ev, label) => (got = [ev, label]));
    const input = card.querySelector<HTMLInputElement>("input[name=label]")!;
    input.value = "bowl";
    card.querySelector("form")!.dispatchEvent(new Event("submit", { cancelable: true }));
    expect(got).toEqual([5, "bowl"]);
  });

  it("replaces the form once the ask was corrected", () => {
    const card = predictionCard(ask, new Set([5]), () => {});
    expect(card.querySelector("form")).toBeNull();
    expect(card.textContent).toContain("corrected");
  });
});

describe("eventLog", () => {
  it("lists events with sequence, kind and detail", () => {
    const log = eventLog([
      { seq: 1, kind: "teach", label: "mug" },
      { seq: 2, kind: "ask", predicted: "mug" },
      { seq: 3, kind: "correct", ask_seq: 2, label: "bowl" },
    ]);
    const rows = [...log.querySelectorAll("li")].map((li) => li.textContent);
    expect(rows[0]).toContain("#1");
    expect(rows[0]).toContain("mug");
    expect(rows[1]).toContain("→ mug");
    expect(rows[2]).toContain("#2 → bowl");
  });
});

describe("renderApp", () => {
  const handlers = { onTeach: () => {}, onAsk: () => {}, onCorrect: () => {} };

  it("is a stateless full rebuild: same view, same DOM", () => {
    const view: AppView = {
      state,
      lastAsk: null,
      corrected: new Set(),
      events: [{ seq: 1, kind: "teach", label: "mug" }],
      error: null,
    };
    const a = document.createElement("div");
    const b = document.createElement("div");
    renderApp(a, view, handlers);
    renderApp(b, view, handlers);
    renderApp(b, view, handlers); // render twice into the same root
    expect(b.innerHTML).toBe(a.innerHTML);
    expect(a.querySelectorAll(".card")).toHaveLength(3); // teach, ask, answer
  });

  it("surfaces errors in a banner and survives a missing session", () => {
    const div = document.createElement("div");
    renderApp(
      div,
      { state: null, lastAsk: null, corrected: new Set(), events: [], error: "conflict: no" },
      handlers,
    );
    expect(div.querySelector(".error-banner")!.textContent).toBe("conflict: no");
    expect(div.textContent).toContain("no session");
  });
});
