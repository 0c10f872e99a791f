"""Acceptance gate: one test per shipping criterion.

Run with ``pytest -v tests/test_acceptance.py`` to get one pass/fail line
per criterion. The tolerances here are the contract — loosening one is a
release decision, not a test fix.
"""

import base64
import importlib.util
import io
import json
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from rgbdvit import vit
from rgbdvit.depth import (CameraIntrinsics, DepthMap, depth_to_pointcloud,
                           encode_depth, estimate_normals, project_to_pixels)
from rgbdvit.evalharness import FeatureTable, knn_classify
from rgbdvit.fusion import (DIAGNOSTICS, FusionSpec, early_fuse_dual,
                            forward_batch, init_fusion_params, late_fuse)
from rgbdvit.gradcheck import check_gradients
from rgbdvit.lifelong import (BENCHMARK_THRESHOLDS, ProtocolEvent,
                              TeacherConfig, TeachingSession, compute_metrics,
                              replay_learned_count, run_protocol)
from rgbdvit.service import _decode_depth, _decode_rgb, create_app
from rgbdvit.tensor import Tensor

ROOT = Path(__file__).resolve().parents[1]

ALL_MODES = [("rgb-only", None), ("depth-only", None), ("early-dual", None),
             ("early-joint", None), ("late", "cat")]


# --------------------------------------------------------------------------
# criterion 1 — analytic gradients match finite differences in every mode
# --------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity_all_fusion_modes(toy_spec):
    """max relative error < 1e-3 (f32) / < 1e-6 (f64), all 5 modes, < 2 min."""
    t0 = time.time()
    rng = np.random.default_rng(0)
    labels = np.array([0, 3])
    for dtype, tol in ((np.float32, 1e-3), (np.float64, 1e-6)):
        rgb = rng.normal(size=(2, 3, 32, 32)).astype(dtype)
        dep = rng.normal(size=(2, 3, 32, 32)).astype(dtype)
        for mode, op in ALL_MODES:
            fspec = FusionSpec(mode=mode, base=toy_spec, late_op=op)
            params = init_fusion_params(fspec, seed=3, dtype=dtype)

            def loss_fn(p):
                return vit.cross_entropy(forward_batch(rgb, dep, p, fspec),
                                         labels)

            report = check_gradients(loss_fn, params, entries_per_tensor=2,
                                     seed=0)
            tag = f"{mode}/{op} {np.dtype(dtype).name}"
            assert report.ok, f"{tag}: {report.failures[:3]}"
            assert report.max_rel_err < tol, \
                f"{tag}: max rel err {report.max_rel_err:.3e} >= {tol:g}"
    assert time.time() - t0 < 120.0


# --------------------------------------------------------------------------
# criterion 2 — fused tokens are unit vectors
# --------------------------------------------------------------------------

def test_criterion_2_fused_tokens_unit_norm_10k(toy_spec):
    """10,000 fuzzed early-dual tokens: ||t|| = 1 +- 1e-5; cancellation
    clamps counted separately and below 0.1%."""
    fspec = FusionSpec(mode="early-dual", base=toy_spec)
    params = init_fusion_params(fspec, seed=5)
    DIAGNOSTICS.reset()
    worst = 0.0
    tokens = 0
    for batch in range(25):
        r = np.random.default_rng(batch)
        scale = 10.0 ** r.uniform(-3, 3)
        rgb = (r.normal(size=(25, 16, 192)) * scale).astype(np.float32)
        dep = (r.normal(size=(25, 16, 192)) * scale).astype(np.float32)
        fused = early_fuse_dual(rgb, dep, params, toy_spec)
        norms = np.linalg.norm(fused.data, axis=-1)
        worst = max(worst, float(np.abs(norms - 1.0).max()))
        tokens += norms.size
    clamped = DIAGNOSTICS.norm_clamps
    DIAGNOSTICS.reset()
    assert tokens == 10_000
    assert clamped / tokens < 1e-3, f"{clamped} clamped tokens"
    assert worst < 1e-5, f"worst |norm - 1| = {worst:.2e}"


# --------------------------------------------------------------------------
# criterion 3 — late-fusion operator algebra
# --------------------------------------------------------------------------

def test_criterion_3_late_op_algebra():
    """avg/max are exact identities on equal inputs and exactly symmetric
    on 1000 random pairs; cat doubles the width, RGB half first."""
    rng = np.random.default_rng(3)
    a = rng.normal(size=(1000, 32)).astype(np.float32)
    b = rng.normal(size=(1000, 32)).astype(np.float32)
    for op in ("avg", "max"):
        same = late_fuse(Tensor(a), Tensor(a), op).data
        assert np.array_equal(same, a), f"{op}(v, v) != v"
        ab = late_fuse(Tensor(a), Tensor(b), op).data
        ba = late_fuse(Tensor(b), Tensor(a), op).data
        assert np.array_equal(ab, ba), f"{op} is not symmetric"
    cat = late_fuse(Tensor(a), Tensor(b), "cat").data
    assert cat.shape == (1000, 64)
    assert np.array_equal(cat[:, :32], a) and np.array_equal(cat[:, 32:], b)


# --------------------------------------------------------------------------
# criterion 4 — vectorized k-NN equals the exhaustive scan
# --------------------------------------------------------------------------

def _scan_oracle(support, sup_labels, queries, k):
    def unit(x):
        out = np.zeros_like(x, dtype=np.float64)
        norms = np.linalg.norm(x, axis=1)
        nz = norms > 0
        out[nz] = x[nz] / norms[nz][:, None]
        return out, norms == 0

    s, s_zero = unit(np.asarray(support, dtype=np.float64))
    q, q_zero = unit(np.asarray(queries, dtype=np.float64))
    preds = []
    for qi in range(len(q)):
        sims = [(si, -1.0 if (q_zero[qi] or s_zero[si]) else float(q[qi] @ s[si]))
                for si in range(len(s))]
        ranked = sorted(sims, key=lambda t: (-t[1], t[0]))[:min(k, len(s))]
        counts = Counter(int(sup_labels[si]) for si, _ in ranked)
        sums = Counter()
        for si, sim in ranked:
            sums[int(sup_labels[si])] += sim
        preds.append(min(counts, key=lambda l: (-counts[l], -sums[l], l)))
    return np.array(preds)


def test_criterion_4_knn_matches_exhaustive_scan():
    """1000 queries x 500 support rows engineered for ties: identical
    predictions everywhere, under 30 s."""
    t0 = time.time()
    rng = np.random.default_rng(4)
    # Ties must come from duplicated/zero rows: those yield bit-identical
    # similarities on any evaluation path, whereas coincidental exact-cosine
    # ties between distinct vectors round differently under matmul vs
    # row-wise dot and no two implementations can agree on them.
    support = rng.normal(size=(500, 24)).round(1)
    support[:20] = support[20:40]          # 20 duplicate pairs ...
    labels = rng.integers(0, 7, size=500)
    labels[:20] = (labels[20:40] + 1) % 7  # ... voting for different labels
    support[490:] = 0.0                    # zero-norm support pins to -1
    queries = rng.normal(size=(1000, 24)).round(1)
    queries[:100] = support[rng.integers(0, 490, size=100)]  # exact hits
    queries[995:] = 0.0                    # zero-norm queries tie everywhere

    table = FeatureTable(vectors=support, labels=labels,
                         entry_ids=[str(i) for i in range(500)],
                         fingerprint="acceptance")
    got = knn_classify(table, queries, k=5)
    want = _scan_oracle(support, labels, queries, k=5)
    mismatch = np.flatnonzero(got != want)
    assert mismatch.size == 0, f"{mismatch.size} disagreements, first {mismatch[:5]}"
    assert time.time() - t0 < 30.0


# --------------------------------------------------------------------------
# criterion 5 — depth geometry against analytic planes
# --------------------------------------------------------------------------

def test_criterion_5_depth_geometry_analytic():
    """Frontal plane -> normals (0,0,-1) +-1e-4 and a constant surfnorm
    color; 45-degree plane +-1e-3; pinhole round trip < 1e-4 px."""
    k32 = CameraIntrinsics(fx=64.0, fy=64.0, cx=15.5, cy=15.5)

    frontal = DepthMap(values=np.full((32, 32), 1.5))
    nm = estimate_normals(depth_to_pointcloud(frontal, k32))
    assert nm.valid_mask.all()
    err = np.abs(nm.normals - np.array([0.0, 0.0, -1.0])).max()
    assert err < 1e-4, f"frontal normal error {err:.2e}"
    color = encode_depth(frontal, "surfnorm", k32).values
    assert (color.reshape(3, -1) == color.reshape(3, -1)[:, :1]).all()
    assert tuple(color[:, 0, 0]) == (128, 128, 0)

    v, u = np.mgrid[0:32, 0:32]
    z = 2.0 / (1.0 - (u - k32.cx) / k32.fx)          # plane z = x + 2
    nm45 = estimate_normals(depth_to_pointcloud(DepthMap(values=z), k32))
    expected = np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
    err45 = np.abs(nm45.normals[nm45.valid_mask] - expected).max()
    assert err45 < 1e-3, f"45-degree normal error {err45:.2e}"

    rng = np.random.default_rng(11)
    depth = DepthMap(values=rng.uniform(0.5, 3.0, size=(24, 24)))
    cam = CameraIntrinsics(fx=40.0, fy=55.0, cx=11.0, cy=12.5)
    uv = project_to_pixels(depth_to_pointcloud(depth, cam), cam)
    v, u = np.mgrid[0:24, 0:24]
    px = max(np.abs(uv[..., 0] - u).max(), np.abs(uv[..., 1] - v).max())
    assert px < 1e-4, f"reprojection error {px:.2e} px"


# --------------------------------------------------------------------------
# criterion 6 — seeded reference run: fusion beats both unimodal baselines
# --------------------------------------------------------------------------

def test_criterion_6_reference_run_fusion_beats_unimodal(tmp_path):
    """Late-cat top-1 >= 90%, >= +5 points over each unimodal baseline,
    5-shot late transfer >= early, < 15 min; +-2pt drift vs frozen values."""
    spec = importlib.util.spec_from_file_location(
        "reference_run", ROOT / "scripts" / "reference_run.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)

    t0 = time.time()
    doc = mod.run_reference(work_dir=tmp_path, verbose=False)
    elapsed = time.time() - t0
    top1 = doc["top1"]

    assert top1["late-cat"] >= 90.0, top1
    assert top1["late-cat"] - top1["rgb-only"] >= 5.0, top1
    assert top1["late-cat"] - top1["depth-only"] >= 5.0, top1
    assert top1["transfer-late"] >= top1["transfer-early"], top1
    assert elapsed < 900.0, f"reference run took {elapsed:.0f}s"

    frozen = json.loads((ROOT / "tests" / "reference_values.json").read_text())
    for key, want in frozen["top1"].items():
        assert abs(top1[key] - want) <= 2.0, \
            f"drift alarm: {key} = {top1[key]} vs frozen {want}"


# --------------------------------------------------------------------------
# criterion 7 — teaching protocol metrics
# --------------------------------------------------------------------------

def test_criterion_7_teaching_protocol_metrics(synth_corpus):
    """One-hot oracle learns everything with GCA 100 at every benchmark
    threshold; a hand-worked log reproduces all five metrics exactly;
    threshold replay is monotone over 20 seeded runs."""
    c = len(synth_corpus.categories)
    feats = np.zeros((len(synth_corpus.labels), c))
    feats[np.arange(len(synth_corpus.labels)), synth_corpus.labels] = 1.0
    for threshold in BENCHMARK_THRESHOLDS:
        report = run_protocol(synth_corpus, feats,
                              TeacherConfig(threshold=threshold, seed=0))
        assert report.outcome == "all-learned", (threshold, report.outcome)
        assert report.alc == c
        assert report.gca == 100.0 and report.apa == 100.0

    A, B = 0, 1
    log = [ProtocolEvent("teach", 0, category=A)]
    log += [ProtocolEvent("ask", 0, category=A, predicted=A, was_correct=True)
            for _ in range(3)]
    log += [ProtocolEvent("learned", 0, category=A),
            ProtocolEvent("teach", 1, category=B),
            ProtocolEvent("ask", 1, category=B, predicted=A, was_correct=False),
            ProtocolEvent("correct", 1, category=B, predicted=A)]
    log += [ProtocolEvent("ask", 1, category=B if i % 2 else A,
                          predicted=B if i % 2 else A, was_correct=True)
            for i in range(6)]
    log += [ProtocolEvent("learned", 1, category=B)]
    report = compute_metrics(log, "all-learned")
    assert report.qci == 11
    assert report.alc == 2
    assert report.aic == pytest.approx(1.5)
    assert report.gca == pytest.approx(90.0)
    assert report.apa == pytest.approx((100.0 + 100 * 6 / 7) / 2)

    rng = np.random.default_rng(9)
    noisy = feats + rng.normal(0, 0.7, size=feats.shape)
    grid = np.linspace(0.05, 1.0, 20)
    for seed in range(20):
        rep = run_protocol(synth_corpus, noisy,
                           TeacherConfig(threshold=0.67, seed=seed, budget=80))
        counts = [replay_learned_count(rep.log, float(t)) for t in grid]
        assert all(x >= y for x, y in zip(counts, counts[1:])), \
            f"seed {seed}: {counts}"


# --------------------------------------------------------------------------
# criterion 8 — the wire protocol is the library
# --------------------------------------------------------------------------

def _wire_sample(seed: int) -> tuple[bytes, bytes]:
    r = np.random.default_rng(seed)
    rgb = r.integers(0, 256, size=(24, 24, 3), dtype=np.uint8)
    mm = r.integers(500, 3000, size=(24, 24)).astype(np.uint16)
    buf_rgb, buf_dep = io.BytesIO(), io.BytesIO()
    Image.fromarray(rgb).save(buf_rgb, format="PNG")
    Image.fromarray(mm).save(buf_dep, format="PNG")
    return buf_rgb.getvalue(), buf_dep.getvalue()


def _wire_body(seed: int, **extra) -> dict:
    rgb, dep = _wire_sample(seed)
    body = {"rgb": base64.b64encode(rgb).decode(),
            "depth": base64.b64encode(dep).decode()}
    body.update(extra)
    return body


def test_criterion_8_service_wire_equals_library(tmp_path):
    """A scripted 50-event session driven over HTTP leaves a byte-identical
    support set to the same script against the library, and survives
    save -> restart -> load bit-exactly."""
    app = create_app()
    client = TestClient(app)
    sid = client.post("/sessions").json()["session_id"]

    extractor = app.state.extractor
    lib = TeachingSession(k=3)
    labels: list[str] = []

    def feat(seed):
        rgb_b, dep_b = _wire_sample(seed)
        return extractor.features(_decode_rgb(rgb_b), _decode_depth(dep_b))

    def cid(label):
        if label not in labels:
            labels.append(label)
        return labels.index(label)

    last_event = 0
    for seed in range(10):                                # 10 teaches
        label = ["mug", "bowl", "cap", "can"][seed % 4]
        res = client.post(f"/sessions/{sid}/teach",
                          json=_wire_body(seed, label=label)).json()
        last_event = res["event"]
        lib.teach(feat(seed), cid(label))

    for seed in range(100, 130):                          # 30 asks, 10 corrects
        wire = client.post(f"/sessions/{sid}/ask", json=_wire_body(seed)).json()
        last_event = wire["event"]
        f = feat(seed)
        pred, _ = lib.ask(f, None)
        assert wire["predicted"] == labels[pred], seed
        if seed % 3 == 0:
            target = next(l for l in labels if l != wire["predicted"])
            res = client.post(f"/sessions/{sid}/correct",
                              json={"ask_event": wire["event"],
                                    "label": target}).json()
            last_event = res["event"]
            lib.apply_correction(f, pred, cid(target))

    assert last_event == 50
    inner = app.state.sessions[sid].inner
    support_bytes = np.stack(inner.vectors).tobytes()
    assert inner.categories == lib.categories
    assert support_bytes == np.stack(lib.vectors).tobytes()
    assert inner.provenance == lib.provenance

    # save -> restart -> load must restore the support set bit for bit
    path = tmp_path / "session.json"
    saved = client.post(f"/sessions/{sid}/save", json={"path": str(path)}).json()
    assert saved["events"] == 50

    app2 = create_app()
    client2 = TestClient(app2)
    sid2 = client2.post("/sessions/load", json={"path": str(path)}).json()["session_id"]
    restored = app2.state.sessions[sid2].inner
    assert np.stack(restored.vectors).tobytes() == support_bytes
    assert restored.categories == inner.categories

    for seed in (500, 501, 502):
        probe = _wire_body(seed)
        a = client.post(f"/sessions/{sid}/ask", json=probe).json()
        b = client2.post(f"/sessions/{sid2}/ask", json=probe).json()
        assert a["predicted"] == b["predicted"]
        assert a["scores"] == b["scores"]
