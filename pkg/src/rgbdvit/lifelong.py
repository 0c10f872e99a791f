"""Simulated-teacher protocol: incremental category teaching with a
threshold-gated evaluation loop and five summary metrics.

A session holds an expandable support set of frozen features over which
a cosine k-NN answers questions. The simulated teacher introduces
categories one at a time; after each introduction it keeps asking about
seeded-random unseen views of all known categories (correcting
mistakes) until the windowed accuracy reaches the protocol threshold,
or a budget of iterations passes without progress.

Metrics: QCI (question/correction iterations), ALC (learned
categories), AIC (stored instances per learned category), GCA (global
accuracy over all questions), APA (mean per-phase accuracy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetIndex
from .evalharness import FeatureTable, knn_classify

__all__ = [
    "ProtocolError", "TeacherConfig", "ProtocolEvent", "TeachingSession",
    "ProtocolReport", "run_protocol", "compute_metrics", "replay_learned_count",
    "aggregate_reports", "BENCHMARK_THRESHOLDS",
]

BENCHMARK_THRESHOLDS = (0.67, 0.7, 0.8, 0.9)


class ProtocolError(RuntimeError):
    """A session operation violated the teaching protocol."""


@dataclass(frozen=True)
class TeacherConfig:
    threshold: float = 0.67
    window_factor: int = 3      # window = factor * (#known categories)
    budget: int = 100           # iterations without a new category -> stop
    seed: int = 0
    k: int = 3
    metric: str = "cosine"
    count_teaches: bool = False  # include teach events in QCI

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.window_factor < 1 or self.budget < 1:
            raise ValueError("window factor and budget must be positive")

    def window(self, known: int) -> int:
        return self.window_factor * known

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "window_factor": self.window_factor,
                "budget": self.budget, "seed": self.seed, "k": self.k,
                "metric": self.metric, "count_teaches": self.count_teaches}


@dataclass(frozen=True)
class ProtocolEvent:
    kind: str                   # teach | ask | correct | learned | reshuffle | error
    phase: int
    category: int | None = None
    predicted: int | None = None
    was_correct: bool | None = None
    entry: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "phase": self.phase, "category": self.category,
                "predicted": self.predicted, "was_correct": self.was_correct,
                "entry": self.entry}

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolEvent":
        return cls(kind=d["kind"], phase=d["phase"], category=d.get("category"),
                   predicted=d.get("predicted"), was_correct=d.get("was_correct"),
                   entry=d.get("entry"))


class TeachingSession:
    """Mutable teach/ask/correct state over frozen feature vectors.

    The session works purely on features so the interactive service and
    the simulated protocol drive identical code.
    """

    def __init__(self, k: int = 3, metric: str = "cosine"):
        self.k = k
        self.metric = metric
        self.vectors: list[np.ndarray] = []
        self.categories: list[int] = []
        self.provenance: list[str] = []
        self.known: list[int] = []          # introduction order
        self.log: list[ProtocolEvent] = []
        self.qci = 0
        self.phase = -1                     # bumped by the runner per introduction
        self._pending: tuple[np.ndarray, int] | None = None  # (feature, prediction)

    @property
    def support_size(self) -> int:
        return len(self.vectors)

    def support_table(self) -> FeatureTable:
        return FeatureTable(np.stack(self.vectors), np.array(self.categories),
                            [str(i) for i in range(len(self.vectors))],
                            fingerprint="session")

    def rows_per_category(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for c in self.categories:
            counts[c] = counts.get(c, 0) + 1
        return counts

    def teach(self, feature: np.ndarray, category: int, entry: str | None = None) -> None:
        feature = np.asarray(feature, dtype=np.float64).reshape(-1)
        if self.vectors and feature.shape != self.vectors[0].shape:
            raise ProtocolError("feature width changed mid-session")
        self.vectors.append(feature)
        self.categories.append(int(category))
        self.provenance.append("taught")
        if category not in self.known:
            self.known.append(int(category))
        self._pending = None
        self.log.append(ProtocolEvent("teach", self.phase, category=int(category),
                                      entry=entry))

    def ask(self, feature: np.ndarray, true_category: int | None = None,
            entry: str | None = None) -> tuple[int, bool | None]:
        if not self.vectors:
            raise ProtocolError("cannot ask before anything was taught")
        feature = np.asarray(feature, dtype=np.float64).reshape(-1)
        pred = int(knn_classify(self.support_table(), feature[None],
                                k=self.k, metric=self.metric)[0])
        ok = None if true_category is None else (pred == int(true_category))
        self.qci += 1
        self._pending = (feature, pred)
        self.log.append(ProtocolEvent("ask", self.phase,
                                      category=None if true_category is None
                                      else int(true_category),
                                      predicted=pred, was_correct=ok, entry=entry))
        return pred, ok

    def correct(self, feature: np.ndarray, true_category: int,
                entry: str | None = None) -> None:
        feature = np.asarray(feature, dtype=np.float64).reshape(-1)
        if self._pending is None:
            raise ProtocolError("correct requires a preceding ask")
        pending_feature, pred = self._pending
        if not np.array_equal(pending_feature, feature):
            raise ProtocolError("correction sample differs from the last ask")
        self.apply_correction(feature, pred, true_category, entry=entry)

    def apply_correction(self, feature: np.ndarray, predicted: int | None,
                         true_category: int, entry: str | None = None) -> None:
        """Record a correction for an ask with the given prediction.

        ``correct`` enforces that the ask was the most recent one; callers
        that validate ask identity themselves (e.g. the service, which
        addresses asks by event id) may apply the correction directly.
        """
        feature = np.asarray(feature, dtype=np.float64).reshape(-1)
        if predicted is not None and int(predicted) == int(true_category):
            raise ProtocolError("cannot correct an answer that was right")
        self.vectors.append(feature)
        self.categories.append(int(true_category))
        self.provenance.append("corrected")
        if true_category not in self.known:
            self.known.append(int(true_category))
        self.qci += 1
        self._pending = None
        self.log.append(ProtocolEvent("correct", self.phase,
                                      category=int(true_category),
                                      predicted=predicted, entry=entry))


@dataclass
class ProtocolReport:
    qci: int
    alc: int
    aic: float
    gca: float
    apa: float
    outcome: str                # all-learned | budget-exhausted
    log: list[ProtocolEvent] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.gca <= 100.0 and 0.0 <= self.apa <= 100.0):
            raise ValueError("GCA/APA must lie in [0, 100]")

    def summary(self) -> dict:
        return {"QCI": self.qci, "ALC": self.alc, "AIC": self.aic,
                "GCA": self.gca, "APA": self.apa, "outcome": self.outcome}

    def to_dict(self) -> dict:
        return {**self.summary(), "config": self.config,
                "log": [e.to_dict() for e in self.log]}


def _phase_window(log: list[ProtocolEvent], cfg_window_factor: int) -> dict[int, int]:
    """Window size per phase: factor * (#categories known during the phase)."""
    intro_order: list[int] = []
    windows: dict[int, int] = {}
    for e in log:
        if e.kind == "teach" and e.category not in intro_order:
            intro_order.append(e.category)
            windows[e.phase] = cfg_window_factor * len(intro_order)
    return windows


def compute_metrics(log: list[ProtocolEvent], outcome: str,
                    config: dict | None = None,
                    count_teaches: bool = False) -> ProtocolReport:
    """Derive all five protocol metrics from a complete interaction log."""
    config = dict(config or {})
    if not log:
        return ProtocolReport(qci=0, alc=0, aic=0.0, gca=0.0, apa=0.0,
                              outcome=outcome,
                              config={**config, "note": "empty log"})
    asks = [e for e in log if e.kind == "ask"]
    corrects = [e for e in log if e.kind == "correct"]
    teaches = [e for e in log if e.kind == "teach"]
    qci = len(asks) + len(corrects) + (len(teaches) if count_teaches else 0)

    learned_cats = [e.category for e in log if e.kind == "learned"]
    alc = len(learned_cats)

    rows: dict[int, int] = {}
    for e in teaches + corrects:
        rows[e.category] = rows.get(e.category, 0) + 1
    aic = (sum(rows.get(c, 0) for c in learned_cats) / alc) if alc else 0.0
    introduced = {e.category for e in teaches}
    config["aic_all_introduced"] = (
        sum(rows.values()) / len(introduced)) if introduced else 0.0

    graded = [e for e in asks if e.was_correct is not None]
    gca = 100.0 * sum(e.was_correct for e in graded) / len(graded) if graded else 0.0

    phases: dict[int, list[bool]] = {}
    for e in graded:
        phases.setdefault(e.phase, []).append(e.was_correct)
    per_phase = [100.0 * sum(v) / len(v) for _, v in sorted(phases.items())]
    apa = float(np.mean(per_phase)) if per_phase else 0.0

    return ProtocolReport(qci=qci, alc=alc, aic=aic, gca=gca, apa=apa,
                          outcome=outcome, log=list(log), config=config)


def run_protocol(index: DatasetIndex, features, cfg: TeacherConfig) -> ProtocolReport:
    """Simulate the full teaching run over a dataset's frozen features.

    ``features`` is either an [N, W] array aligned with ``index.entries``
    or a callable ``i -> vector``; extraction failures end the run with a
    budget-exhausted report carrying the error text.
    """
    if callable(features):
        fetch = features
    else:
        mat = np.asarray(features)
        fetch = lambda i: mat[i]

    labels = index.labels
    n_categories = len(index.categories)
    rng = np.random.default_rng(cfg.seed)
    intro_order = [int(c) for c in rng.permutation(n_categories)]

    pools: dict[int, list[int]] = {}
    for c in range(n_categories):
        ids = [i for i in range(len(index.entries)) if labels[i] == c]
        rng.shuffle(ids)
        pools[c] = ids
    used: dict[int, list[int]] = {c: [] for c in range(n_categories)}

    session = TeachingSession(k=cfg.k, metric=cfg.metric)

    def draw(category: int) -> int:
        if not pools[category]:
            refreshed = used[category]
            rng.shuffle(refreshed)
            pools[category] = refreshed
            used[category] = []
            session.log.append(ProtocolEvent("reshuffle", session.phase,
                                             category=category))
        i = pools[category].pop()
        used[category].append(i)
        return i

    outcome = "all-learned"
    try:
        for phase, category in enumerate(intro_order):
            session.phase = phase
            i = draw(category)
            session.teach(fetch(i), category, entry=index.entries[i].id)
            known = len(session.known)
            window = cfg.window(known)
            budget = max(cfg.budget, window)  # keep the gate reachable
            phase_outcomes: list[bool] = []
            phase_iterations = 0
            learned = False
            while not learned:
                q_cat = int(session.known[rng.integers(known)])
                qi = draw(q_cat)
                _, ok = session.ask(fetch(qi), q_cat, entry=index.entries[qi].id)
                phase_iterations += 1
                if not ok:
                    session.correct(fetch(qi), q_cat, entry=index.entries[qi].id)
                    phase_iterations += 1
                phase_outcomes.append(ok)
                if len(phase_outcomes) >= window and \
                        float(np.mean(phase_outcomes[-window:])) >= cfg.threshold:
                    session.log.append(ProtocolEvent("learned", phase,
                                                     category=category))
                    learned = True
                elif phase_iterations >= budget:
                    outcome = "budget-exhausted"
                    raise _BudgetExhausted
    except _BudgetExhausted:
        pass
    except Exception as exc:  # extractor failure mid-run
        session.log.append(ProtocolEvent("error", session.phase))
        report = compute_metrics(session.log, "budget-exhausted",
                                 config={"teacher": cfg.to_dict(),
                                         "error": repr(exc)},
                                 count_teaches=cfg.count_teaches)
        return report

    return compute_metrics(session.log, outcome,
                           config={"teacher": cfg.to_dict(),
                                   "categories": n_categories},
                           count_teaches=cfg.count_teaches)


class _BudgetExhausted(Exception):
    pass


def replay_learned_count(log: list[ProtocolEvent], threshold: float,
                         window_factor: int = 3) -> int:
    """How many recorded phases would have fired at ``threshold``.

    Replays the fixed ask sequence of each phase against a different
    gate; raising the threshold can only delay or lose each firing, so
    the count is non-increasing in ``threshold``.
    """
    windows = _phase_window(log, window_factor)
    outcomes: dict[int, list[bool]] = {}
    for e in log:
        if e.kind == "ask" and e.was_correct is not None:
            outcomes.setdefault(e.phase, []).append(e.was_correct)
    learned = 0
    for phase, seq in outcomes.items():
        w = windows.get(phase)
        if w is None:
            continue
        for t in range(w, len(seq) + 1):
            if float(np.mean(seq[t - w:t])) >= threshold:
                learned += 1
                break
    return learned


def aggregate_reports(reports: list[ProtocolReport]) -> dict:
    """Mean and population σ of each metric over seeded runs."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for name in ("qci", "alc", "aic", "gca", "apa"):
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name.upper()] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["outcomes"] = {o: sum(r.outcome == o for r in reports)
                       for o in {r.outcome for r in reports}}
    out["runs"] = len(reports)
    return out
