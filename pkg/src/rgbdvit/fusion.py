"""RGB-D fusion variants over the ViT encoder.

Five model modes share one encoder implementation:

* rgb-only / depth-only -- unimodal baseline
* early-dual   -- separate RGB and depth patch embedders; per-patch sum
                  followed by L2 normalization before the encoder
* early-joint  -- one embedder over channel-stacked RGB-D patches
* late         -- both modalities pass through the *same* encoder weights;
                  the two final class-token states are pooled (avg/max/cat)

Early variants produce a single class token for the pair; the late
variant fuses afterwards, leaving the pretrained embedding intact.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import vit
from .checkpoint import IncompatibleCheckpointError, load_checkpoint
from .tensor import Tensor, concat, maximum

__all__ = [
    "FUSION_MODES",
    "LATE_OPS",
    "FusionSpec",
    "RgbdSample",
    "FusionDiagnostics",
    "DIAGNOSTICS",
    "early_fuse_dual",
    "early_fuse_joint",
    "late_fuse",
    "forward",
    "forward_batch",
    "features_batch",
    "init_fusion_params",
    "init_from_rgb_checkpoint",
    "interleave",
    "chunk_preserving_pairs",
    "feature_width",
]

FUSION_MODES = ("rgb-only", "depth-only", "early-dual", "early-joint", "late")
LATE_OPS = ("avg", "max", "cat")

NORM_CLAMP = 1e-12


@dataclass(frozen=True)
class FusionSpec:
    """Fusion mode plus the underlying encoder configuration."""

    mode: str
    base: vit.ModelSpec
    late_op: str | None = None

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.mode == "late":
            if self.late_op not in LATE_OPS:
                raise ValueError(f"late fusion requires late_op in {LATE_OPS}")
        elif self.late_op is not None:
            raise ValueError("late_op is only meaningful in late mode")

    @property
    def feature_dim(self) -> int:
        d = self.base.embed_dim
        return 2 * d if (self.mode == "late" and self.late_op == "cat") else d

    def to_dict(self) -> dict:
        return {"mode": self.mode, "late_op": self.late_op,
                "base": self.base.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(mode=d["mode"], late_op=d.get("late_op"),
                   base=vit.ModelSpec.from_dict(d["base"]))


def feature_width(fspec: FusionSpec) -> int:
    return fspec.feature_dim


@dataclass
class RgbdSample:
    """Preprocessed RGB and encoded-depth tensors with labels."""

    rgb: np.ndarray            # [3, crop, crop] float
    depth_encoded: np.ndarray  # [3, crop, crop] float
    label: int
    instance: str = ""

    def __post_init__(self):
        if self.rgb.shape != self.depth_encoded.shape:
            raise ValueError("rgb and depth tensors must share a shape")


class FusionDiagnostics:
    """Counters for non-fatal numeric events (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.norm_clamps = 0

    def record_clamps(self, n: int) -> None:
        if n:
            with self._lock:
                self.norm_clamps += n

    def reset(self) -> None:
        with self._lock:
            self.norm_clamps = 0


DIAGNOSTICS = FusionDiagnostics()


# --------------------------------------------------------------------------
# fusion primitives
# --------------------------------------------------------------------------

def early_fuse_dual(rgb_patches, depth_patches, params,
                    spec: vit.ModelSpec) -> Tensor:
    """Sum the two patch embeddings and L2-normalize each fused token.

    Token norms below 1e-12 are clamped (counted in DIAGNOSTICS, not
    raised): a cancelled token embeds as a near-zero vector.
    """
    e_rgb = vit.embed_tokens(rgb_patches, params, spec, "embedder_rgb")
    e_d = vit.embed_tokens(depth_patches, params, spec, "embedder_depth")
    s = e_rgb + e_d
    sq = (s * s).sum(axis=-1, keepdims=True)
    DIAGNOSTICS.record_clamps(int((sq.data < NORM_CLAMP ** 2).sum()))
    norm = sq.clamp_min(NORM_CLAMP ** 2).sqrt()
    return s / norm


def early_fuse_joint(stacked_patches, params, spec: vit.ModelSpec) -> Tensor:
    """Single projection over 6-channel patches; no normalization."""
    return vit.embed_tokens(stacked_patches, params, spec, "embedder")


def late_fuse(h_rgb: Tensor, h_d: Tensor, op: str) -> Tensor:
    """Pool two class-token states: avg, elementwise max, or RGB-first concat."""
    if h_rgb.shape != h_d.shape:
        raise ValueError(f"late fusion shapes differ: {h_rgb.shape} vs {h_d.shape}")
    if op == "avg":
        return (h_rgb + h_d) * 0.5
    if op == "max":
        return maximum(h_rgb, h_d)
    if op == "cat":
        return concat([h_rgb, h_d], axis=-1)
    raise ValueError(f"unknown late fusion op {op!r}")


# --------------------------------------------------------------------------
# full model forward
# --------------------------------------------------------------------------

def _encode_cls(images: np.ndarray, params, spec: vit.ModelSpec,
                embedder: str = "embedder") -> Tensor:
    patches = vit.patchify(images, spec.patch_size)
    seq = vit.embed_and_sequence(patches, params, spec, embedder=embedder)
    return vit.cls_state(vit.encoder_forward(seq, params, spec))


def features_batch(rgb: np.ndarray | None, depth: np.ndarray | None,
                   params, fspec: FusionSpec) -> Tensor:
    """Pooled pre-head features for a batch: [B, D] (or [B, 2D] for late-cat)."""
    spec = fspec.base
    if fspec.mode == "rgb-only":
        return _encode_cls(rgb, params, spec)
    if fspec.mode == "depth-only":
        return _encode_cls(depth, params, spec)
    if fspec.mode == "early-dual":
        rp = vit.patchify(rgb, spec.patch_size)
        dp = vit.patchify(depth, spec.patch_size)
        fused = early_fuse_dual(rp, dp, params, spec)
        seq = vit.embed_and_sequence(None, params, spec, embedded=fused)
        return vit.cls_state(vit.encoder_forward(seq, params, spec))
    if fspec.mode == "early-joint":
        stacked = np.concatenate([rgb, depth], axis=-3)
        sp = vit.patchify(stacked, spec.patch_size)
        fused = early_fuse_joint(sp, params, spec)
        seq = vit.embed_and_sequence(None, params, spec, embedded=fused)
        return vit.cls_state(vit.encoder_forward(seq, params, spec))
    # late: interleave so one encoder pass (shared weights) covers both
    b = rgb.shape[0] if rgb.ndim == 4 else 1
    rgb4 = rgb if rgb.ndim == 4 else rgb[None]
    dep4 = depth if depth.ndim == 4 else depth[None]
    paired = np.empty((2 * b,) + rgb4.shape[1:], dtype=rgb4.dtype)
    paired[0::2] = rgb4
    paired[1::2] = dep4
    h = _encode_cls(paired, params, spec)
    return late_fuse(h[0::2], h[1::2], fspec.late_op)


def forward_batch(rgb: np.ndarray | None, depth: np.ndarray | None,
                  params, fspec: FusionSpec) -> Tensor:
    """Class logits for a batch under the given fusion mode."""
    return vit.classify(features_batch(rgb, depth, params, fspec), params, fspec.base)


def forward(sample: RgbdSample, params, fspec: FusionSpec) -> Tensor:
    """Class logits for a single RGB-D sample, shape [num_classes]."""
    logits = forward_batch(sample.rgb[None], sample.depth_encoded[None], params, fspec)
    return logits[0]


# --------------------------------------------------------------------------
# parameter construction
# --------------------------------------------------------------------------

def init_fusion_params(fspec: FusionSpec, seed: int = 0,
                       dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters shaped for the fusion mode."""
    spec = fspec.base
    p = spec.patch_size
    if fspec.mode == "early-dual":
        return vit.init_params(spec, seed=seed, dtype=dtype,
                               embedder_names=("embedder_rgb", "embedder_depth"))
    if fspec.mode == "early-joint":
        return vit.init_params(spec, seed=seed, dtype=dtype,
                               embed_in_width=6 * p * p)
    return vit.init_params(spec, seed=seed, dtype=dtype,
                           head_in_width=fspec.feature_dim)


def init_from_rgb_checkpoint(ckpt_path, fspec: FusionSpec,
                             head_seed: int = 0) -> dict[str, Tensor]:
    """Adapt a unimodal checkpoint to ``fspec``.

    Encoder blocks, positions and the class token are copied verbatim.
    The patch embedder is duplicated (dual), replicated channel-wise and
    halved (joint, output-preserving when depth equals rgb), or copied
    (late/unimodal). The classifier head is re-initialized at the width
    the fusion mode requires.
    """
    src_params, manifest = load_checkpoint(ckpt_path)
    src_fusion = manifest.get("fusion_spec") or {}
    if src_fusion.get("mode") not in ("rgb-only", "depth-only"):
        raise IncompatibleCheckpointError(
            "weight-copy initialization needs a unimodal source checkpoint, "
            f"got mode {src_fusion.get('mode')!r}")
    src_spec = vit.ModelSpec.from_dict(manifest["model_spec"])
    spec = fspec.base
    arch_fields = ("image_size", "patch_size", "embed_dim", "depth", "heads",
                   "mlp_ratio", "positional_mode")
    for f in arch_fields:
        if getattr(src_spec, f) != getattr(spec, f):
            raise IncompatibleCheckpointError(
                f"checkpoint {f}={getattr(src_spec, f)} does not match "
                f"requested {f}={getattr(spec, f)}")

    dtype = src_params["cls"].dtype
    params: dict[str, Tensor] = {}
    for name, tensor in src_params.items():
        if name.startswith(("head.", "embedder.")):
            continue
        params[name] = Tensor(tensor.data.copy(), requires_grad=True)

    w = src_params["embedder.weight"].data
    b = src_params["embedder.bias"].data
    if fspec.mode == "early-dual":
        for name in ("embedder_rgb", "embedder_depth"):
            params[f"{name}.weight"] = Tensor(w.copy(), requires_grad=True)
            params[f"{name}.bias"] = Tensor(b.copy(), requires_grad=True)
    elif fspec.mode == "early-joint":
        joint = np.concatenate([0.5 * w, 0.5 * w], axis=0)
        params["embedder.weight"] = Tensor(joint.astype(dtype), requires_grad=True)
        params["embedder.bias"] = Tensor(b.copy(), requires_grad=True)
    else:
        params["embedder.weight"] = Tensor(w.copy(), requires_grad=True)
        params["embedder.bias"] = Tensor(b.copy(), requires_grad=True)

    rng = np.random.default_rng(head_seed)
    vit.init_head(params, spec, fspec.feature_dim, rng, dtype=dtype)
    return params


# --------------------------------------------------------------------------
# paired batching
# --------------------------------------------------------------------------

def interleave(rgb_batch, depth_batch) -> list[tuple[int, str, object]]:
    """Merge aligned modality batches into r0, d0, r1, d1, ...

    Items carry (pair index, modality) so downstream consumers can verify
    adjacency after any re-chunking.
    """
    rgb_items = list(rgb_batch)
    depth_items = list(depth_batch)
    if len(rgb_items) != len(depth_items):
        raise ValueError(
            f"modality batches differ in length: {len(rgb_items)} vs {len(depth_items)}")
    stream: list[tuple[int, str, object]] = []
    for i, (r, d) in enumerate(zip(rgb_items, depth_items)):
        stream.append((i, "rgb", r))
        stream.append((i, "depth", d))
    return stream


def chunk_preserving_pairs(stream: list, max_chunk: int) -> list[list]:
    """Split an interleaved stream into chunks without splitting any pair."""
    if max_chunk < 2:
        raise ValueError("chunks must hold at least one rgb/depth pair")
    if len(stream) % 2 != 0:
        raise ValueError("interleaved stream must have even length")
    even = max_chunk - (max_chunk % 2)
    return [stream[i:i + even] for i in range(0, len(stream), even)]
