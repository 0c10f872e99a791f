"""Vision Transformer encoder built on the tensor engine.

Covers the unimodal pipeline: patch extraction, linear patch embedding
with a prepended class token and positional encodings, pre-norm encoder
blocks (LN -> MHSA -> residual -> LN -> GELU MLP -> residual), a final
layer norm, the classification head, and cross-entropy.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted paths
("embedder.weight", "block0.attn.qkv.weight", ...), which keeps
checkpointing, optimizers and weight-copy initialization trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, concat

__all__ = [
    "ModelSpec",
    "SequenceState",
    "MODEL_PRESETS",
    "patchify",
    "sinusoid_2d_table",
    "trunc_normal",
    "init_params",
    "embed_and_sequence",
    "encoder_forward",
    "cls_state",
    "classify",
    "cross_entropy",
    "head_input_width",
]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture configuration for a square-image ViT encoder."""

    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 12
    heads: int = 3
    mlp_ratio: float = 4.0
    num_classes: int = 51
    positional_mode: str = "learned"  # "learned" | "sinusoid-2d"
    head_hidden_dim: int = 0          # 0 = linear classifier, >0 = 1-hidden-layer MLP

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.positional_mode not in ("learned", "sinusoid-2d"):
            raise ValueError(f"unknown positional_mode {self.positional_mode!r}")
        if self.positional_mode == "sinusoid-2d" and self.embed_dim % 4 != 0:
            raise ValueError("sinusoid-2d positions require embed_dim divisible by 4")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


MODEL_PRESETS = {
    "toy": dict(image_size=32, patch_size=8, embed_dim=32, depth=2, heads=2),
    "tiny": dict(image_size=224, patch_size=16, embed_dim=192, depth=12, heads=3),
    "small": dict(image_size=224, patch_size=16, embed_dim=384, depth=12, heads=6),
    "base": dict(image_size=224, patch_size=16, embed_dim=768, depth=12, heads=12),
}


def make_spec(preset: str, **overrides) -> ModelSpec:
    if preset not in MODEL_PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
    cfg = dict(MODEL_PRESETS[preset])
    cfg.update(overrides)
    return ModelSpec(**cfg)


@dataclass
class SequenceState:
    """Token sequence [batch x (N+1) x D]; position 0 is the class token."""

    tokens: Tensor

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


# --------------------------------------------------------------------------
# patch extraction and embedding
# --------------------------------------------------------------------------

def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """Split [C,H,W] (or [B,C,H,W]) into flattened patches [N, C*p*p] ([B,N,..]).

    Row n is the n-th patch in row-major patch order; each patch is
    flattened channel-first.
    """
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    b, c, h, w = img.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)           # [B, gh, gw, C, p, p]
    x = x.reshape(b, gh * gw, c * patch * patch)
    return x[0] if squeeze else x


def sinusoid_2d_table(grid: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine/cosine positional table [grid*grid, dim].

    Per grid cell (gy, gx): dim/4 sin and dim/4 cos terms for the row index
    followed by the same pair for the column index, with the usual
    10000**(-i/(dim/4)) frequency ladder.
    """
    if dim % 4 != 0:
        raise ValueError("sinusoid-2d table needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    gy, gx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    gy = gy.reshape(-1, 1) * omega
    gx = gx.reshape(-1, 1) * omega
    table = np.concatenate([np.sin(gy), np.cos(gy), np.sin(gx), np.cos(gx)], axis=1)
    return table.astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (standard ViT init)."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def _linear_init(rng, fan_in, fan_out, dtype):
    return (trunc_normal(rng, (fan_in, fan_out), dtype=dtype),
            np.zeros(fan_out, dtype=dtype))


def init_params(spec: ModelSpec, seed: int = 0, dtype=np.float32,
                embed_in_width: int | None = None,
                embedder_names: tuple[str, ...] = ("embedder",),
                head_in_width: int | None = None) -> dict[str, Tensor]:
    """Fresh trainable parameters for ``spec``.

    ``embedder_names`` allows the dual early-fusion variant to request two
    independent patch embedders; ``embed_in_width`` overrides the input
    width (6*p*p for the joint early-fusion embedder). ``head_in_width``
    widens the classifier input (2*D for concatenation late fusion).
    """
    rng = np.random.default_rng(seed)
    d = spec.embed_dim
    p = spec.patch_size
    in_width = embed_in_width if embed_in_width is not None else 3 * p * p
    params: dict[str, Tensor] = {}

    def param(path, arr):
        params[path] = Tensor(arr, requires_grad=True)

    for name in embedder_names:
        w, b = _linear_init(rng, in_width, d, dtype)
        param(f"{name}.weight", w)
        param(f"{name}.bias", b)
    param("cls", np.zeros(d, dtype=dtype))
    if spec.positional_mode == "learned":
        param("pos", trunc_normal(rng, (spec.num_patches, d), dtype=dtype))

    hidden = int(round(d * spec.mlp_ratio))
    for i in range(spec.depth):
        pre = f"block{i}"
        param(f"{pre}.norm1.gamma", np.ones(d, dtype=dtype))
        param(f"{pre}.norm1.beta", np.zeros(d, dtype=dtype))
        w, b = _linear_init(rng, d, 3 * d, dtype)
        param(f"{pre}.attn.qkv.weight", w)
        param(f"{pre}.attn.qkv.bias", b)
        w, b = _linear_init(rng, d, d, dtype)
        param(f"{pre}.attn.out.weight", w)
        param(f"{pre}.attn.out.bias", b)
        param(f"{pre}.norm2.gamma", np.ones(d, dtype=dtype))
        param(f"{pre}.norm2.beta", np.zeros(d, dtype=dtype))
        w, b = _linear_init(rng, d, hidden, dtype)
        param(f"{pre}.mlp.fc1.weight", w)
        param(f"{pre}.mlp.fc1.bias", b)
        w, b = _linear_init(rng, hidden, d, dtype)
        param(f"{pre}.mlp.fc2.weight", w)
        param(f"{pre}.mlp.fc2.bias", b)
    param("norm.gamma", np.ones(d, dtype=dtype))
    param("norm.beta", np.zeros(d, dtype=dtype))

    head_in = head_in_width if head_in_width is not None else d
    init_head(params, spec, head_in, rng, dtype)
    return params


def init_head(params: dict[str, Tensor], spec: ModelSpec, head_in: int,
              rng: np.random.Generator, dtype=np.float32) -> None:
    """(Re-)initialize the classifier head in place.

    The output layer is zero-initialized so a fresh head yields uniform
    logits (initial loss exactly ln C on balanced data).
    """
    for key in [k for k in params if k.startswith("head.")]:
        del params[key]
    if spec.head_hidden_dim > 0:
        w = trunc_normal(rng, (head_in, spec.head_hidden_dim), dtype=dtype)
        params["head.fc1.weight"] = Tensor(w, requires_grad=True)
        params["head.fc1.bias"] = Tensor(np.zeros(spec.head_hidden_dim, dtype=dtype),
                                         requires_grad=True)
        params["head.fc2.weight"] = Tensor(
            np.zeros((spec.head_hidden_dim, spec.num_classes), dtype=dtype),
            requires_grad=True)
        params["head.fc2.bias"] = Tensor(np.zeros(spec.num_classes, dtype=dtype),
                                         requires_grad=True)
    else:
        params["head.weight"] = Tensor(np.zeros((head_in, spec.num_classes), dtype=dtype),
                                       requires_grad=True)
        params["head.bias"] = Tensor(np.zeros(spec.num_classes, dtype=dtype),
                                     requires_grad=True)


def head_input_width(params: dict[str, Tensor]) -> int:
    if "head.weight" in params:
        return params["head.weight"].shape[0]
    return params["head.fc1.weight"].shape[0]


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------

def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def _affine_norm(x: Tensor, params, prefix: str) -> Tensor:
    return x.layer_norm() * params[f"{prefix}.gamma"] + params[f"{prefix}.beta"]


def positional_table(spec: ModelSpec, params: dict[str, Tensor]) -> Tensor:
    if spec.positional_mode == "learned":
        return params["pos"]
    dtype = params["cls"].dtype
    return Tensor(sinusoid_2d_table(spec.grid, spec.embed_dim, dtype=dtype))


def embed_tokens(patches: np.ndarray | Tensor, params, spec: ModelSpec,
                 embedder: str = "embedder") -> Tensor:
    """Linear patch embedding [.., N, in_width] -> [.., N, D]."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    expected = params[f"{embedder}.weight"].shape[0]
    if x.shape[-1] != expected:
        raise ValueError(
            f"patch width {x.shape[-1]} does not match embedder input {expected}")
    return _linear(x, params, embedder)


def embed_and_sequence(patches: np.ndarray | Tensor, params, spec: ModelSpec,
                       embedder: str = "embedder",
                       embedded: Tensor | None = None) -> SequenceState:
    """Project patches, add positional encodings, prepend the class token.

    ``embedded`` short-circuits the projection for fusion variants that
    build the patch embeddings themselves (already [B,N,D]).
    """
    e = embedded if embedded is not None else embed_tokens(patches, params, spec, embedder)
    if e.ndim == 2:
        e = e.reshape(1, *e.shape)
    b, n, d = e.shape
    if n != spec.num_patches:
        raise ValueError(f"expected {spec.num_patches} patches, got {n}")
    e = e + positional_table(spec, params)
    cls = params["cls"].reshape(1, 1, d) + Tensor(np.zeros((b, 1, d), dtype=e.dtype))
    return SequenceState(tokens=concat([cls, e], axis=1))


def _attention(x: Tensor, params, spec: ModelSpec, prefix: str) -> Tensor:
    b, t, d = x.shape
    heads = spec.heads
    dh = d // heads
    qkv = _linear(x, params, f"{prefix}.qkv")            # [B, T, 3D]
    qkv = qkv.reshape(b, t, 3, heads, dh).swapaxes(1, 3)  # [B, heads, 3, T, dh]
    q = qkv[:, :, 0]
    k = qkv[:, :, 1]
    v = qkv[:, :, 2]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    attn = scores.softmax(axis=-1)
    out = (attn @ v).swapaxes(1, 2).reshape(b, t, d)
    return _linear(out, params, f"{prefix}.out")


def encoder_forward(seq: SequenceState, params, spec: ModelSpec) -> SequenceState:
    """Run L pre-norm encoder blocks plus the final layer norm."""
    x = seq.tokens
    for i in range(spec.depth):
        pre = f"block{i}"
        x = x + _attention(_affine_norm(x, params, f"{pre}.norm1"), params, spec,
                           f"{pre}.attn")
        h = _linear(_affine_norm(x, params, f"{pre}.norm2"), params, f"{pre}.mlp.fc1")
        x = x + _linear(h.gelu(), params, f"{pre}.mlp.fc2")
    return SequenceState(tokens=_affine_norm(x, params, "norm"))


def cls_state(seq: SequenceState) -> Tensor:
    """Final hidden state of the class token, [batch x D]."""
    return seq.tokens[:, 0, :]


def classify(h_cls: Tensor, params, spec: ModelSpec) -> Tensor:
    """Map pooled features to class logits via the configured head."""
    width = head_input_width(params)
    if h_cls.shape[-1] != width:
        raise ValueError(f"head expects input width {width}, got {h_cls.shape[-1]}")
    if "head.weight" in params:
        return _linear(h_cls, params, "head")
    h = _linear(h_cls, params, "head.fc1").gelu()
    return _linear(h, params, "head.fc2")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class, max-shift stabilized."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    logp = logits.log_softmax(axis=-1)
    picked = logp[np.arange(n), labels]
    return -picked.mean()
