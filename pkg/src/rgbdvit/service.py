"""HTTP teaching service: interactive teach/ask/correct over a frozen extractor.

A small FastAPI app exposing the lifelong-teaching loop to remote clients.
Each session wraps a :class:`~rgbdvit.lifelong.TeachingSession`, so wire
semantics are the library semantics: features extracted from uploaded
images land in the same support set a direct caller would build, byte for
byte. The service adds what the library doesn't have — category names,
a sequence-numbered event log, SSE streaming with replay, persistence,
and per-session mutation locking.

Wire samples are PNG pairs: an RGB image plus a 16-bit single-channel
depth image in millimeters (0 = hole). Depth is encoded server-side
(raw / hha / surfnorm) before feature extraction, so clients never deal
with geometric encodings. JSON bodies carry the PNGs base64-encoded;
multipart uploads are accepted as well.

Every state mutation appends one event with a strictly increasing
sequence number. The event stream (`GET /sessions/{id}/events`) replays
events after a client-supplied sequence and then follows live, which
makes reconnects lossless. Saving a session writes the same event log
(features included, base64 little-endian float64) plus enough metadata
to rebuild the extractor; loading it restores predictions bit-exactly.

Error responses share one envelope: ``{"error": {"code", "message"}}``
with stable machine-readable codes (payload-error, not-found, conflict,
protocol-error, bad-checkpoint).
"""

from __future__ import annotations

import argparse
import base64
import io
import json
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from . import vit
from .checkpoint import load_checkpoint
from .depth import (CameraIntrinsics, DepthMap, EncodedImage, PreprocessSpec,
                    encode_depth, depth_from_millimeters, load_intrinsics,
                    preprocess, DEPTH_FORMATS)
from .evalharness import _cosine_sims, extractor_fingerprint, _frozen
from .fusion import FusionSpec, features_batch, init_fusion_params
from .lifelong import ProtocolError, TeachingSession

UNKNOWN_LABEL = "unknown"

# model used when the service starts without a checkpoint (demos, UI work)
_FALLBACK_SPEC = dict(image_size=32, patch_size=8, embed_dim=48, depth=2,
                      heads=2, num_classes=5, positional_mode="sinusoid-2d")


class ServiceError(Exception):
    """Carries an HTTP status and a stable machine-readable code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _payload_error(message: str) -> ServiceError:
    return ServiceError(400, "payload-error", message)


# --------------------------------------------------------------------------
# extractor: frozen weights + preprocessing shared by sessions
# --------------------------------------------------------------------------

@dataclass
class Extractor:
    params: dict
    fspec: FusionSpec
    fingerprint: str
    checkpoint: str | None     # path it was loaded from, None = fresh init
    encoding: str              # depth encoding applied to uploads
    intrinsics: CameraIntrinsics | None = None
    intrinsics_size: tuple[int, int] | None = None  # (width, height)

    @property
    def pspec(self) -> PreprocessSpec:
        s = self.fspec.base.image_size
        return PreprocessSpec(target_size=s, crop_size=s)

    def _intrinsics_for(self, width: int, height: int) -> CameraIntrinsics:
        if (self.intrinsics is not None
                and self.intrinsics_size == (width, height)):
            return self.intrinsics
        # focal ~ image size, principal point centered: always in bounds
        return CameraIntrinsics(fx=float(max(width, height)),
                                fy=float(max(width, height)),
                                cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def features(self, rgb: EncodedImage, depth: DepthMap,
                 encoding: str | None = None) -> np.ndarray:
        """One float64 feature vector for an uploaded RGB-D pair."""
        fmt = encoding or self.encoding
        k = self._intrinsics_for(depth.width, depth.height)
        dep_img = encode_depth(depth, fmt, k)
        rgb_t = preprocess(rgb, self.pspec)
        dep_t = preprocess(dep_img, self.pspec)
        feats = features_batch(rgb_t[None], dep_t[None], self.params, self.fspec)
        return np.asarray(feats.data[0], dtype=np.float64)


def build_extractor(checkpoint: str | None, fusion: str = "late",
                    late_op: str | None = "avg", encoding: str = "surfnorm",
                    data_dir: str | None = None) -> Extractor:
    """Load (or initialize) the frozen feature extractor the service serves."""
    if encoding not in DEPTH_FORMATS:
        raise ServiceError(400, "payload-error",
                           f"unknown depth encoding {encoding!r}")
    if checkpoint is not None:
        try:
            params, manifest = load_checkpoint(checkpoint)
        except FileNotFoundError:
            raise ServiceError(400, "bad-checkpoint",
                               f"checkpoint not found: {checkpoint}") from None
        except Exception as exc:  # malformed zip/manifest
            raise ServiceError(400, "bad-checkpoint",
                               f"cannot load checkpoint: {exc}") from None
        base = vit.ModelSpec.from_dict(manifest["model_spec"])
        saved = manifest.get("fusion_spec")
        if saved and fusion == saved.get("mode") and saved.get("mode") != "late":
            fspec = FusionSpec.from_dict(saved)
        else:
            fspec = FusionSpec(mode=fusion, base=base,
                               late_op=late_op if fusion == "late" else None)
    else:
        base = vit.ModelSpec(**_FALLBACK_SPEC)
        fspec = FusionSpec(mode=fusion, base=base,
                           late_op=late_op if fusion == "late" else None)
        params = init_fusion_params(fspec, seed=0)

    params = _frozen(params)
    intr = size = None
    if data_dir:
        path = Path(data_dir) / "intrinsics.json"
        if path.exists():
            k, w, h = load_intrinsics(path)
            intr, size = k, (w, h)
    return Extractor(params=params, fspec=fspec,
                     fingerprint=extractor_fingerprint(params, fspec),
                     checkpoint=checkpoint, encoding=encoding,
                     intrinsics=intr, intrinsics_size=size)


# --------------------------------------------------------------------------
# sessions
# --------------------------------------------------------------------------

class Session:
    """One teaching session: support set, label names, ordered event log."""

    def __init__(self, sid: str, extractor: Extractor, k: int = 3):
        self.id = sid
        self.extractor = extractor
        self.inner = TeachingSession(k=k)
        self.labels: list[str] = []          # category id -> name, insertion order
        self.events: list[dict] = []
        self.asks: dict[int, dict] = {}      # ask seq -> {feature, predicted, corrected}
        self.lock = threading.RLock()
        self.cond = threading.Condition(self.lock)
        self._seq = 0

    # -- category names ----------------------------------------------------
    def category_id(self, label: str, create: bool = False) -> int:
        if label in self.labels:
            return self.labels.index(label)
        if not create:
            raise ServiceError(404, "not-found", f"unknown category {label!r}")
        self.labels.append(label)
        return len(self.labels) - 1

    # -- event log ---------------------------------------------------------
    def append_event(self, kind: str, payload: dict) -> dict:
        """Append under the session lock; wakes any event-stream waiters."""
        self._seq += 1
        event = {"seq": self._seq, "kind": kind, **payload}
        self.events.append(event)
        self.cond.notify_all()
        return event

    def events_after(self, seq: int) -> list[dict]:
        return [e for e in self.events if e["seq"] > seq]

    # -- wire operations (call under self.lock) -----------------------------
    def teach(self, feature: np.ndarray, label: str, tag: str | None) -> dict:
        new = label not in self.labels
        cid = self.category_id(label, create=True)
        self.inner.teach(feature, cid, entry=tag)
        return self.append_event("teach", {
            "label": label, "category_id": cid, "new_category": new,
            "support_size": self.inner.support_size,
            "tag": tag, "feature_b64": _b64(feature)})

    def ask(self, feature: np.ndarray, tag: str | None,
            latency_ms: float) -> dict:
        if self.inner.support_size == 0:
            predicted, scores = None, {}
        else:
            pred_id, _ = self.inner.ask(feature, entry=tag)
            predicted = self.labels[pred_id]
            scores = self._scores(feature)
        event = self.append_event("ask", {
            "predicted": predicted if predicted is not None else UNKNOWN_LABEL,
            "scores": scores, "latency_ms": round(latency_ms, 3),
            "tag": tag, "feature_b64": _b64(feature)})
        self.asks[event["seq"]] = {"feature": feature, "predicted": predicted,
                                   "corrected": False}
        return event

    def correct(self, ask_seq: int, label: str) -> dict:
        record = self.asks.get(ask_seq)
        if record is None:
            raise ServiceError(404, "not-found",
                               f"no ask event with sequence {ask_seq}")
        if record["corrected"]:
            raise ServiceError(409, "conflict",
                               f"ask {ask_seq} was already corrected")
        if record["predicted"] is not None and record["predicted"] == label:
            raise ServiceError(409, "conflict",
                               f"ask {ask_seq} already predicted {label!r}")
        cid = self.category_id(label, create=True)
        pred_id = (self.labels.index(record["predicted"])
                   if record["predicted"] is not None else None)
        self.inner.apply_correction(record["feature"], pred_id, cid)
        record["corrected"] = True
        return self.append_event("correct", {
            "ask_seq": ask_seq, "label": label, "category_id": cid,
            "support_size": self.inner.support_size,
            "feature_b64": _b64(record["feature"])})

    def _scores(self, feature: np.ndarray) -> dict[str, float]:
        """Max cosine similarity against each known category's support rows."""
        support = np.stack(self.inner.vectors)
        sims = _cosine_sims(feature[None].astype(np.float64), support)[0]
        cats = np.array(self.inner.categories)
        return {self.labels[c]: float(sims[cats == c].max())
                for c in self.inner.known}

    # -- state -------------------------------------------------------------
    def state(self) -> dict:
        counts = self.inner.rows_per_category()
        graded = [a for a in self.asks.values() if a["predicted"] is not None]
        gca = None
        if graded:
            right = sum(1 for a in graded if not a["corrected"])
            gca = 100.0 * right / len(graded)
        return {
            "session_id": self.id,
            "categories": [{"label": self.labels[c], "category_id": c,
                            "support_size": counts.get(c, 0)}
                           for c in self.inner.known],
            "support_size": self.inner.support_size,
            "gca": gca,
            "event_count": len(self.events),
            "last_seq": self._seq,
            "fingerprint": self.extractor.fingerprint,
            "encoding": self.extractor.encoding,
            "k": self.inner.k,
        }

    # -- persistence ---------------------------------------------------------
    def snapshot(self) -> dict:
        return {
            "format": "teach-session/1",
            "session_id": self.id,
            "fingerprint": self.extractor.fingerprint,
            "checkpoint": self.extractor.checkpoint,
            "fusion": self.extractor.fspec.to_dict(),
            "encoding": self.extractor.encoding,
            "k": self.inner.k,
            "labels": list(self.labels),
            "next_seq": self._seq,
            "events": self.events,
        }

    @classmethod
    def restore(cls, doc: dict, extractor: Extractor) -> "Session":
        if doc.get("format") != "teach-session/1":
            raise _payload_error("unrecognized session file format")
        if doc["fingerprint"] != extractor.fingerprint:
            raise ServiceError(400, "bad-checkpoint",
                               "session was recorded against a different extractor")
        session = cls(str(uuid.uuid4().hex), extractor, k=int(doc.get("k", 3)))
        session.labels = list(doc["labels"])
        for event in doc["events"]:
            kind = event["kind"]
            feature = (_from_b64(event["feature_b64"])
                       if "feature_b64" in event else None)
            if kind == "teach":
                session.inner.teach(feature, event["category_id"])
            elif kind == "ask":
                predicted = event["predicted"]
                session.asks[event["seq"]] = {
                    "feature": feature,
                    "predicted": None if predicted == UNKNOWN_LABEL else predicted,
                    "corrected": False}
            elif kind == "correct":
                session.inner.apply_correction(
                    feature, None, event["category_id"])
                if event.get("ask_seq") in session.asks:
                    session.asks[event["ask_seq"]]["corrected"] = True
            session.events.append(dict(event))
        session._seq = int(doc["next_seq"])
        return session


def _b64(feature: np.ndarray) -> str:
    """Base64 of the little-endian float64 bytes (bit-exact round trip)."""
    return base64.b64encode(
        np.ascontiguousarray(feature, dtype="<f8").tobytes()).decode("ascii")


def _from_b64(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


# --------------------------------------------------------------------------
# wire parsing
# --------------------------------------------------------------------------

def _decode_rgb(data: bytes) -> EncodedImage:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception:
        raise _payload_error("rgb image is not a decodable image") from None
    arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return EncodedImage(values=arr.transpose(2, 0, 1))


def _decode_depth(data: bytes) -> DepthMap:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception:
        raise _payload_error("depth image is not a decodable image") from None
    if img.mode not in ("I", "I;16", "I;16B", "I;16L"):
        raise _payload_error(
            f"depth must be a single-channel 16-bit image, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.int64)
    if arr.min() < 0 or arr.max() > 0xFFFF:
        raise _payload_error("depth values exceed the 16-bit millimeter range")
    return depth_from_millimeters(arr.astype(np.uint16))


async def _read_sample(request: Request, want_label: bool):
    """Pull (rgb, depth, label, encoding, tag) from JSON or multipart."""
    ctype = request.headers.get("content-type", "")
    if ctype.startswith("multipart/"):
        form = await request.form()
        rgb_up, dep_up = form.get("rgb"), form.get("depth")
        if rgb_up is None or dep_up is None:
            raise _payload_error("multipart upload needs 'rgb' and 'depth' files")
        rgb_bytes = await rgb_up.read()
        dep_bytes = await dep_up.read()
        label = form.get("label")
        encoding = form.get("encoding")
        tag = form.get("tag")
    else:
        try:
            body = await request.json()
        except Exception:
            raise _payload_error("request body is not valid JSON") from None
        if not isinstance(body, dict):
            raise _payload_error("request body must be a JSON object")
        try:
            rgb_bytes = base64.b64decode(body["rgb"])
            dep_bytes = base64.b64decode(body["depth"])
        except KeyError as exc:
            raise _payload_error(f"missing field {exc.args[0]!r}") from None
        except Exception:
            raise _payload_error("rgb/depth fields must be base64 strings") from None
        label = body.get("label")
        encoding = body.get("encoding")
        tag = body.get("tag")

    if want_label and not label:
        raise _payload_error("teach requires a 'label'")
    if encoding is not None and encoding not in DEPTH_FORMATS:
        raise _payload_error(f"unknown depth encoding {encoding!r}")

    rgb = _decode_rgb(rgb_bytes)
    depth = _decode_depth(dep_bytes)
    if (rgb.height, rgb.width) != (depth.height, depth.width):
        raise _payload_error(
            f"rgb is {rgb.width}x{rgb.height} but depth is "
            f"{depth.width}x{depth.height}")
    return rgb, depth, label, encoding, tag


# --------------------------------------------------------------------------
# app
# --------------------------------------------------------------------------

def create_app(checkpoint: str | None = None, fusion: str = "late",
               late_op: str | None = "avg", encoding: str = "surfnorm",
               data_dir: str | None = None, k: int = 3) -> FastAPI:
    app = FastAPI(title="rgbdvit teaching service")
    # the teach UI is served separately; allow any origin to talk to us
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    extractor = build_extractor(checkpoint, fusion=fusion, late_op=late_op,
                                encoding=encoding, data_dir=data_dir)
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()
    app.state.extractor = extractor
    app.state.sessions = sessions
    app.state.data_dir = data_dir

    @app.exception_handler(ServiceError)
    async def _service_error(_req, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"code": exc.code,
                                               "message": exc.message}})

    @app.exception_handler(ProtocolError)
    async def _protocol_error(_req, exc: ProtocolError):
        return JSONResponse(status_code=409,
                            content={"error": {"code": "protocol-error",
                                               "message": str(exc)}})

    def get_session(sid: str) -> Session:
        with registry_lock:
            session = sessions.get(sid)
        if session is None:
            raise ServiceError(404, "not-found", f"no session {sid!r}")
        return session

    def _resolve(path_text: str) -> Path:
        path = Path(path_text)
        if not path.is_absolute() and data_dir:
            path = Path(data_dir) / path
        return path

    @app.get("/health")
    async def health():
        return {"status": "ok", "fingerprint": extractor.fingerprint,
                "fusion": extractor.fspec.to_dict(),
                "encoding": extractor.encoding,
                "feature_width": extractor.fspec.feature_dim,
                "sessions": len(sessions)}

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        body = {}
        if int(request.headers.get("content-length") or 0) > 0:
            try:
                body = await request.json()
            except Exception:
                raise _payload_error("request body is not valid JSON") from None
        ext = extractor
        if body.get("checkpoint") or body.get("fusion"):
            ext = build_extractor(
                body.get("checkpoint", checkpoint),
                fusion=body.get("fusion", fusion),
                late_op=body.get("late_op", late_op),
                encoding=body.get("encoding", encoding),
                data_dir=data_dir)
        session = Session(uuid.uuid4().hex, ext, k=int(body.get("k", k)))
        with registry_lock:
            sessions[session.id] = session
        return {"session_id": session.id, "fingerprint": ext.fingerprint,
                "feature_width": ext.fspec.feature_dim,
                "fusion": ext.fspec.to_dict(), "encoding": ext.encoding,
                "k": session.inner.k}

    @app.get("/sessions/{sid}/state")
    async def state(sid: str):
        session = get_session(sid)
        with session.lock:
            return session.state()

    @app.post("/sessions/{sid}/teach")
    async def teach(sid: str, request: Request):
        session = get_session(sid)
        rgb, depth, label, enc, tag = await _read_sample(request, want_label=True)
        feature = session.extractor.features(rgb, depth, enc)
        with session.lock:
            event = session.teach(feature, label, tag)
        return {"event": event["seq"], "label": label,
                "category_id": event["category_id"],
                "new_category": event["new_category"],
                "support_size": event["support_size"]}

    @app.post("/sessions/{sid}/ask")
    async def ask(sid: str, request: Request):
        session = get_session(sid)
        rgb, depth, _, enc, tag = await _read_sample(request, want_label=False)
        t0 = time.perf_counter()
        feature = session.extractor.features(rgb, depth, enc)
        with session.lock:
            event = session.ask(feature, tag,
                                latency_ms=(time.perf_counter() - t0) * 1e3)
        return {"event": event["seq"], "predicted": event["predicted"],
                "scores": event["scores"], "latency_ms": event["latency_ms"]}

    @app.post("/sessions/{sid}/correct")
    async def correct(sid: str, request: Request):
        session = get_session(sid)
        try:
            body = await request.json()
        except Exception:
            raise _payload_error("request body is not valid JSON") from None
        if "ask_event" not in body or "label" not in body:
            raise _payload_error("correct requires 'ask_event' and 'label'")
        try:
            ask_seq = int(body["ask_event"])
        except (TypeError, ValueError):
            raise _payload_error("'ask_event' must be an integer") from None
        with session.lock:
            event = session.correct(ask_seq, str(body["label"]))
        return {"event": event["seq"], "label": event["label"],
                "category_id": event["category_id"],
                "support_size": event["support_size"]}

    @app.get("/sessions/{sid}/events")
    async def events(sid: str, request: Request, after: int = 0,
                     limit: int = 0):
        """SSE stream: replay events past `after`, then follow live.

        Reconnecting clients pass their last-seen sequence (query param or
        Last-Event-ID header) and resume without gaps or duplicates.
        `limit` > 0 closes the stream after that many events (polling).
        """
        session = get_session(sid)
        last_id = request.headers.get("last-event-id")
        if last_id is not None:
            try:
                after = max(after, int(last_id))
            except ValueError:
                pass

        def stream(start: int):
            yield "retry: 2000\n\n"
            last = start
            sent = 0
            while True:
                with session.cond:
                    pending = session.events_after(last)
                    if not pending:
                        session.cond.wait(timeout=0.5)
                        pending = session.events_after(last)
                if pending:
                    for event in pending:
                        last = event["seq"]
                        payload = {k_: v for k_, v in event.items()
                                   if k_ != "feature_b64"}
                        yield (f"id: {event['seq']}\nevent: {event['kind']}\n"
                               f"data: {json.dumps(payload)}\n\n")
                        sent += 1
                        if limit and sent >= limit:
                            return
                else:
                    yield ": keep-alive\n\n"

        return StreamingResponse(stream(after), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache",
                                          "X-Accel-Buffering": "no"})

    @app.post("/sessions/{sid}/save")
    async def save(sid: str, request: Request):
        session = get_session(sid)
        try:
            body = await request.json()
        except Exception:
            raise _payload_error("request body is not valid JSON") from None
        if not body.get("path"):
            raise _payload_error("save requires a 'path'")
        path = _resolve(body["path"])
        with session.lock:
            doc = session.snapshot()
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(doc, indent=1)
        path.write_text(text)
        return {"path": str(path), "events": len(doc["events"]),
                "bytes": len(text)}

    @app.post("/sessions/load")
    async def load(request: Request):
        try:
            body = await request.json()
        except Exception:
            raise _payload_error("request body is not valid JSON") from None
        if not body.get("path"):
            raise _payload_error("load requires a 'path'")
        path = _resolve(body["path"])
        if not path.exists():
            raise ServiceError(404, "not-found", f"no session file at {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            raise _payload_error("session file is not valid JSON") from None
        ext = extractor
        if doc.get("checkpoint") and doc["checkpoint"] != extractor.checkpoint:
            ext = build_extractor(doc["checkpoint"],
                                  fusion=doc["fusion"]["mode"],
                                  late_op=doc["fusion"].get("late_op"),
                                  encoding=doc.get("encoding", encoding),
                                  data_dir=data_dir)
        session = Session.restore(doc, ext)
        with registry_lock:
            sessions[session.id] = session
        return {"session_id": session.id, "events": len(session.events),
                "support_size": session.inner.support_size,
                "categories": len(session.labels),
                "restored_from": str(path)}

    return app


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        description="Serve the interactive RGB-D teaching loop over HTTP.")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--checkpoint", default=None,
                        help="extractor checkpoint (default: fresh toy weights)")
    parser.add_argument("--fusion", default="late",
                        choices=("rgb-only", "depth-only", "early-dual",
                                 "early-joint", "late"))
    parser.add_argument("--late-op", default="avg",
                        choices=("avg", "max", "cat"))
    parser.add_argument("--encoding", default="surfnorm",
                        choices=DEPTH_FORMATS)
    parser.add_argument("--data-dir", default=None,
                        help="directory for session files and intrinsics.json")
    args = parser.parse_args(argv)

    import uvicorn
    app = create_app(checkpoint=args.checkpoint, fusion=args.fusion,
                     late_op=args.late_op, encoding=args.encoding,
                     data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port)


if __name__ == "__main__":
    main()
