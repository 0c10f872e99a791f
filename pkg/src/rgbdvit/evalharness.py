"""Evaluation regimes: k-NN on frozen features, linear eval, fine-tuning,
and the synthetic-to-real few-shot transfer experiment.

All regimes consume preprocessed arrays (see ``data.load_arrays``) so the
math stays independent of storage details.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vit
from .checkpoint import load_checkpoint
from .data import DatasetIndex, few_shot_subset, load_arrays
from .depth import PreprocessSpec
from .fusion import FusionSpec, features_batch, forward_batch, init_fusion_params
from .optim import OptimizerState, Schedule, TrainingError, optimizer_step, zero_grads
from .tensor import Tensor

__all__ = [
    "UnsupportedRegimeError", "FeatureTable", "EvalReport",
    "LinearEvalHP", "FinetuneHP", "extractor_fingerprint",
    "extract_features", "save_features", "load_features",
    "knn_classify", "linear_eval", "evaluate", "finetune",
    "transfer_experiment",
]

log = logging.getLogger("rgbdvit")


class UnsupportedRegimeError(RuntimeError):
    """The requested (checkpoint, fusion mode) pairing has no defined regime."""


@dataclass
class FeatureTable:
    """Frozen per-sample embeddings with provenance."""

    vectors: np.ndarray       # [N, W]
    labels: np.ndarray        # [N] int64
    entry_ids: list[str]
    fingerprint: str          # extractor identity (weights + fusion spec)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError("feature vectors must form a [N, W] matrix")
        if not (len(self.vectors) == len(self.labels) == len(self.entry_ids)):
            raise ValueError("vectors, labels and entry ids must align")

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass
class EvalReport:
    regime: str
    top1: float                      # percent
    n_samples: int
    per_class: dict[int, tuple[int, int]]  # label -> (correct, count)
    config: dict = field(default_factory=dict)
    loss_log: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 100.0:
            raise ValueError("top-1 accuracy must lie in [0, 100]")
        if sum(c for _, c in self.per_class.values()) != self.n_samples:
            raise ValueError("per-class counts must sum to the sample count")

    def to_dict(self) -> dict:
        return {"regime": self.regime, "top1": self.top1,
                "n_samples": self.n_samples,
                "per_class": {str(k): list(v) for k, v in self.per_class.items()},
                "config": self.config, "loss_log": self.loss_log}


def _report(regime: str, pred: np.ndarray, labels: np.ndarray,
            config: dict, loss_log: list[float] | None = None) -> EvalReport:
    per_class: dict[int, tuple[int, int]] = {}
    for lbl in np.unique(labels):
        sel = labels == lbl
        per_class[int(lbl)] = (int((pred[sel] == lbl).sum()), int(sel.sum()))
    top1 = 100.0 * float((pred == labels).mean()) if len(labels) else 0.0
    return EvalReport(regime=regime, top1=top1, n_samples=len(labels),
                      per_class=per_class, config=config,
                      loss_log=list(loss_log or []))


# --------------------------------------------------------------------------
# feature extraction
# --------------------------------------------------------------------------

def extractor_fingerprint(params: dict[str, Tensor], fspec: FusionSpec) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(fspec.to_dict(), sort_keys=True).encode())
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


def _frozen(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Graph-free view of the parameters (no gradient tracking)."""
    return {k: Tensor(t.data) for k, t in params.items()}


def _default_pspec(fspec: FusionSpec) -> PreprocessSpec:
    s = fspec.base.image_size
    return PreprocessSpec(target_size=s, crop_size=s)


def extract_features(index: DatasetIndex, ids: list[int],
                     params: dict[str, Tensor], fspec: FusionSpec, *,
                     source_mode: str | None = None,
                     pspec: PreprocessSpec | None = None,
                     batch_size: int = 64, dtype=np.float32) -> FeatureTable:
    """h_cls per sample (late mode: pooled pair state) from frozen weights.

    ``source_mode`` is the fusion mode the weights were trained under.
    Early-fusion extraction from a unimodal checkpoint is rejected: a
    single-modality encoder assigns no meaning to fused patch tokens.
    """
    if source_mode is None:
        source_mode = fspec.mode
    if fspec.mode in ("early-dual", "early-joint") and \
            source_mode in ("rgb-only", "depth-only"):
        raise UnsupportedRegimeError(
            "frozen-feature extraction in early fusion mode requires an "
            f"RGB-D-trained checkpoint; source was {source_mode!r}")
    pspec = pspec or _default_pspec(fspec)
    frozen = _frozen(params)
    fp = extractor_fingerprint(params, fspec)
    chunks = []
    for lo in range(0, len(ids), batch_size):
        batch = ids[lo:lo + batch_size]
        rgb, dep, _ = load_arrays(index, batch, pspec, dtype=dtype)
        chunks.append(features_batch(rgb, dep, frozen, fspec).data)
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, fspec.feature_dim), dtype)
    return FeatureTable(vectors=vectors, labels=index.labels[ids],
                        entry_ids=[index.entries[i].id for i in ids],
                        fingerprint=fp)


def save_features(path, table: FeatureTable) -> None:
    np.savez(path, vectors=table.vectors, labels=table.labels,
             entry_ids=np.array(table.entry_ids),
             fingerprint=np.array(table.fingerprint))


def load_features(path, expect_fingerprint: str | None = None) -> FeatureTable:
    with np.load(path) as z:
        table = FeatureTable(vectors=z["vectors"], labels=z["labels"],
                             entry_ids=[str(s) for s in z["entry_ids"]],
                             fingerprint=str(z["fingerprint"]))
    if expect_fingerprint is not None and table.fingerprint != expect_fingerprint:
        raise UnsupportedRegimeError(
            "cached features were produced by a different extractor "
            f"({table.fingerprint[:12]} != {expect_fingerprint[:12]})")
    return table


# --------------------------------------------------------------------------
# k-NN
# --------------------------------------------------------------------------

def _cosine_sims(queries: np.ndarray, support: np.ndarray) -> np.ndarray:
    """[M, N] cosine similarities; zero-norm vectors pin to -1 everywhere."""
    qn = np.linalg.norm(queries, axis=1)
    sn = np.linalg.norm(support, axis=1)
    q = np.divide(queries, np.where(qn == 0, 1, qn)[:, None])
    s = np.divide(support, np.where(sn == 0, 1, sn)[:, None])
    sims = q @ s.T
    sims[:, sn == 0] = -1.0
    sims[qn == 0, :] = -1.0
    return sims


def knn_classify(table: FeatureTable, queries: np.ndarray, k: int = 3,
                 metric: str = "cosine") -> np.ndarray:
    """Majority vote over the k most cosine-similar support rows.

    Vote ties break by summed similarity of the tied labels, then by the
    lowest label id. Neighbor selection is stable: equal similarities
    keep ascending row order.
    """
    if metric != "cosine":
        raise ValueError(f"unsupported metric {metric!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(table.vectors) == 0:
        raise ValueError("empty support table")
    queries = np.asarray(queries)
    if queries.shape[1] != table.width:
        raise ValueError(f"query width {queries.shape[1]} != support width {table.width}")
    sims = _cosine_sims(queries.astype(np.float64),
                        table.vectors.astype(np.float64))
    kk = min(k, sims.shape[1])
    order = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
    out = np.empty(len(queries), dtype=np.int64)
    for qi in range(len(queries)):
        votes: dict[int, tuple[int, float]] = {}
        for ni in order[qi]:
            lbl = int(table.labels[ni])
            cnt, tot = votes.get(lbl, (0, 0.0))
            votes[lbl] = (cnt + 1, tot + sims[qi, ni])
        # max count, then max summed similarity, then lowest label id
        out[qi] = min(votes, key=lambda l: (-votes[l][0], -votes[l][1], l))
    return out


def knn_eval(train: FeatureTable, test: FeatureTable, k: int = 3,
             metric: str = "cosine") -> EvalReport:
    """k-NN classification of test features against a support table."""
    if train.fingerprint != test.fingerprint:
        raise UnsupportedRegimeError(
            "train/test features come from different extractors")
    pred = knn_classify(train, test.vectors, k=k, metric=metric)
    return _report("knn", pred, test.labels, {"k": k, "metric": metric})


# --------------------------------------------------------------------------
# linear eval
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearEvalHP:
    lr: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum,
                "batch_size": self.batch_size, "epochs": self.epochs,
                "seed": self.seed}


def _clamped_batch(requested: int, n: int, what: str) -> int:
    if requested > n:
        log.warning("%s batch size %d exceeds dataset size %d; clamping",
                    what, requested, n)
        return n
    return requested


def linear_eval(train: FeatureTable, test: FeatureTable,
                hp: LinearEvalHP | None = None,
                num_classes: int | None = None) -> EvalReport:
    """Train one linear head on frozen features with SGD + momentum."""
    hp = hp or LinearEvalHP()
    if train.width != test.width:
        raise ValueError(f"feature widths differ: {train.width} vs {test.width}")
    if train.fingerprint != test.fingerprint:
        raise UnsupportedRegimeError("train/test features come from different extractors")
    if num_classes is None:
        num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    w = Tensor(np.zeros((train.width, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    head = {"w": w, "b": b}
    x = train.vectors.astype(np.float64)
    y = train.labels
    n = len(x)
    batch = _clamped_batch(hp.batch_size, n, "linear eval")
    state = OptimizerState(kind="sgd-momentum", lr=hp.lr, momentum=hp.momentum)
    rng = np.random.default_rng(hp.seed)
    losses = []
    for epoch in range(hp.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, batch):
            sel = perm[lo:lo + batch]
            logits = Tensor(x[sel]) @ w + b
            loss = vit.cross_entropy(logits, y[sel])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {lo // batch}")
            loss.backward()
            optimizer_step(head, {k: t.grad for k, t in head.items()}, state)
            zero_grads(head)
            epoch_loss += float(loss.data) * len(sel)
        losses.append(epoch_loss / n)
    pred = np.argmax(test.vectors.astype(np.float64) @ w.data + b.data, axis=1)
    return _report("linear", pred, test.labels,
                   {"hp": hp.to_dict(), "num_classes": num_classes},
                   loss_log=losses)


# --------------------------------------------------------------------------
# fine-tuning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneHP:
    lr: float = 9e-5
    batch_size: int = 512
    epochs: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    schedule: str = "linear-decay"

    @classmethod
    def small_data(cls, **overrides) -> "FinetuneHP":
        """The reduced-data profile (lr 3e-5, batch 64)."""
        base = {"lr": 3e-5, "batch_size": 64}
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {"optimizer": "adamw", "lr": self.lr, "batch_size": self.batch_size,
                "epochs": self.epochs, "weight_decay": self.weight_decay,
                "seed": self.seed, "schedule": self.schedule}


def evaluate(params: dict[str, Tensor], fspec: FusionSpec,
             rgb: np.ndarray, dep: np.ndarray, labels: np.ndarray,
             regime: str = "eval", batch_size: int = 64,
             config: dict | None = None) -> EvalReport:
    """Top-1 accuracy of a model over preprocessed arrays."""
    frozen = _frozen(params)
    preds = []
    for lo in range(0, len(labels), batch_size):
        logits = forward_batch(rgb[lo:lo + batch_size], dep[lo:lo + batch_size],
                               frozen, fspec)
        preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return _report(regime, pred, labels, config or {})


def finetune(params: dict[str, Tensor], fspec: FusionSpec,
             train: tuple[np.ndarray, np.ndarray, np.ndarray],
             test: tuple[np.ndarray, np.ndarray, np.ndarray],
             hp: FinetuneHP | None = None) -> tuple[dict[str, Tensor], EvalReport]:
    """End-to-end AdamW training; returns updated params and a report.

    The classifier must be an MLP head (spec.head_hidden_dim > 0). Late
    mode runs both modalities through the shared encoder as interleaved
    pairs inside ``forward_batch``.
    """
    hp = hp or FinetuneHP()
    if fspec.base.head_hidden_dim <= 0:
        raise ValueError("fine-tuning uses an MLP head; set head_hidden_dim > 0")
    rgb_tr, dep_tr, y_tr = train
    n = len(y_tr)
    if n == 0:
        raise ValueError("empty training set")
    batch = _clamped_batch(hp.batch_size, n, "finetune")
    steps_per_epoch = (n + batch - 1) // batch
    sched = (Schedule("linear-decay", hp.epochs * steps_per_epoch)
             if hp.schedule == "linear-decay" else Schedule())
    state = OptimizerState(kind="adamw", lr=hp.lr,
                           weight_decay=hp.weight_decay, schedule=sched)
    rng = np.random.default_rng(hp.seed)
    losses = []
    for epoch in range(hp.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for step, lo in enumerate(range(0, n, batch)):
            sel = perm[lo:lo + batch]
            logits = forward_batch(rgb_tr[sel], dep_tr[sel], params, fspec)
            loss = vit.cross_entropy(logits, y_tr[sel])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            optimizer_step(params, {k: t.grad for k, t in params.items()}, state)
            zero_grads(params)
            epoch_loss += float(loss.data) * len(sel)
        losses.append(epoch_loss / n)
        log.info("finetune epoch %d/%d mean loss %.4f", epoch + 1, hp.epochs,
                 losses[-1])
    report = evaluate(params, fspec, *test, regime="finetune",
                      config={"hp": hp.to_dict(), "fusion": fspec.to_dict()})
    report.loss_log.extend(losses)
    return params, report


# --------------------------------------------------------------------------
# transfer experiment
# --------------------------------------------------------------------------

def transfer_experiment(source_ckpt, index: DatasetIndex,
                        train_ids: list[int], test_ids: list[int],
                        shots: tuple[int, ...] = (1, 5, 10, 20),
                        hp: FinetuneHP | None = None,
                        pspec: PreprocessSpec | None = None,
                        seed: int = 0, dtype=np.float32,
                        ceiling: bool = True) -> list[EvalReport]:
    """Few-shot adaptation of a source-domain checkpoint.

    Produces one report per shot count in ascending order, beginning
    with shot 0 (no target training), plus a target-only ceiling trained
    from fresh weights on the full training split.
    """
    hp = hp or FinetuneHP.small_data()
    src_params, manifest = load_checkpoint(source_ckpt)
    if manifest.get("fusion_spec") is None:
        raise UnsupportedRegimeError("source checkpoint lacks a fusion spec")
    fspec = FusionSpec.from_dict(manifest["fusion_spec"])
    pspec = pspec or _default_pspec(fspec)
    test_arrays = load_arrays(index, test_ids, pspec, dtype=dtype)
    reports = []

    zero = evaluate({k: Tensor(t.data.copy()) for k, t in src_params.items()},
                    fspec, *test_arrays, regime="transfer",
                    config={"shots": 0, "fusion": fspec.to_dict()})
    reports.append(zero)

    for s in sorted(shots):
        sub = few_shot_subset(index, train_ids, s, seed=seed)
        train_arrays = load_arrays(index, sub, pspec, dtype=dtype)
        params = {k: Tensor(t.data.copy(), requires_grad=True)
                  for k, t in src_params.items()}
        _, rep = finetune(params, fspec, train_arrays, test_arrays, hp)
        rep.regime = "transfer"
        rep.config["shots"] = s
        reports.append(rep)

    if ceiling:
        full = load_arrays(index, train_ids, pspec, dtype=dtype)
        fresh = init_fusion_params(fspec, seed=seed, dtype=dtype)
        _, rep = finetune(fresh, fspec, full, test_arrays, hp)
        rep.regime = "transfer-ceiling"
        rep.config["shots"] = len(train_ids)
        reports.append(rep)
    return reports
