"""Geometric depth encodings: raw grayscale, HHA, and surface normals.

A metric depth map is turned into one of three 3-channel uint8 images
compatible with the RGB preprocessing path:

* raw      -- depth truncated at a maximum range and replicated per channel
* hha      -- horizontal disparity / height above ground / angle to gravity
* surfnorm -- per-pixel surface normals from PCA over the back-projected
              point cloud, mapped into color channels

All rounding from float to 8-bit uses round-half-up so results are
reproducible across platforms. Invalid (hole) pixels encode to 0.
All functions are pure; nothing here holds shared mutable state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DepthMap",
    "CameraIntrinsics",
    "EncodedImage",
    "PointCloud",
    "NormalMap",
    "PreprocessSpec",
    "EmptyDepthError",
    "raw_depth_to_image",
    "depth_to_pointcloud",
    "project_to_pixels",
    "estimate_normals",
    "colorize_normals",
    "compute_hha",
    "encode_depth",
    "preprocess",
    "resize_bilinear",
    "round_half_up_u8",
    "depth_from_millimeters",
    "load_intrinsics",
    "save_intrinsics",
]

DEPTH_FORMATS = ("raw", "hha", "surfnorm")


class EmptyDepthError(ValueError):
    """Raised when an operation needs valid depth pixels and none exist."""


@dataclass
class DepthMap:
    """Single-channel metric depth with a validity mask (sensor holes)."""

    values: np.ndarray                  # [H, W] float, meters
    valid_mask: np.ndarray | None = None  # [H, W] bool; None = all valid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.values.shape, dtype=bool)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid_mask.shape:
            raise ValueError("depth values and valid_mask must share a 2-D shape")
        valid = self.values[self.valid_mask]
        if valid.size and (not np.all(np.isfinite(valid)) or valid.min() < 0):
            raise ValueError("valid depth values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def check_bounds(self, width: int, height: int) -> None:
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {width}x{height}")


@dataclass
class EncodedImage:
    """3-channel uint8 image, channel-first."""

    values: np.ndarray  # [3, H, W] uint8

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] != 3:
            raise ValueError("encoded image must be [3, H, W]")
        if self.values.dtype != np.uint8:
            raise ValueError("encoded image must be uint8")

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class PointCloud:
    """Per-pixel camera-frame points [H, W, 3] (meters) plus validity."""

    points: np.ndarray
    valid_mask: np.ndarray


@dataclass
class NormalMap:
    """Per-pixel unit surface normals oriented toward the camera (z <= 0)."""

    normals: np.ndarray
    valid_mask: np.ndarray


@dataclass(frozen=True)
class PreprocessSpec:
    """Resize-crop-normalize settings shared by RGB and encoded depth."""

    target_size: int = 224
    crop_size: int = 224
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.crop_size > self.target_size:
            raise ValueError("crop_size must not exceed target_size")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be positive")


def round_half_up_u8(x: np.ndarray) -> np.ndarray:
    """Map floats to uint8 with round-half-up, clipping into [0, 255]."""
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# encodings
# --------------------------------------------------------------------------

def raw_depth_to_image(d: DepthMap, d_max: float) -> EncodedImage:
    """Truncate depth at ``d_max`` meters and spread onto 3 gray channels."""
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    scaled = np.minimum(d.values, d_max) / d_max * 255.0
    channel = np.where(d.valid_mask, round_half_up_u8(scaled), np.uint8(0))
    return EncodedImage(np.repeat(channel[None].astype(np.uint8), 3, axis=0))


def depth_to_pointcloud(d: DepthMap, k: CameraIntrinsics) -> PointCloud:
    """Pinhole back-projection into the camera frame."""
    k.check_bounds(d.width, d.height)
    v, u = np.mgrid[0:d.height, 0:d.width]
    z = d.values
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    points = np.stack([x, y, z], axis=-1)
    points[~d.valid_mask] = 0.0
    return PointCloud(points=points, valid_mask=d.valid_mask.copy())


def project_to_pixels(pc: PointCloud, k: CameraIntrinsics) -> np.ndarray:
    """Perspective projection back to pixel coordinates [H, W, 2] (u, v)."""
    x, y, z = pc.points[..., 0], pc.points[..., 1], pc.points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * x / z + k.cx
        v = k.fy * y / z + k.cy
    return np.stack([u, v], axis=-1)


def estimate_normals(pc: PointCloud, window: int = 5) -> NormalMap:
    """PCA surface normals over a square pixel window.

    The normal at a pixel is the eigenvector of the smallest eigenvalue of
    the covariance of the valid points inside the window, sign-flipped so
    z <= 0 (facing the camera). Pixels with fewer than 3 valid neighbors
    (or invalid themselves) come out invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 3")
    h, w = pc.valid_mask.shape
    r = window // 2
    mask = pc.valid_mask.astype(np.float64)
    pts = np.where(pc.valid_mask[..., None], pc.points, 0.0)
    pad_pts = np.pad(pts, ((r, r), (r, r), (0, 0)))
    pad_mask = np.pad(mask, r)

    win_pts = sliding_window_view(pad_pts, (window, window), axis=(0, 1))  # [H,W,3,w,w]
    win_mask = sliding_window_view(pad_mask, (window, window))             # [H,W,w,w]
    counts = win_mask.sum(axis=(-1, -2))
    safe = np.maximum(counts, 1.0)
    sums = win_pts.sum(axis=(-1, -2))                                      # [H,W,3]
    means = sums / safe[..., None]
    second = np.einsum("hwaij,hwbij->hwab", win_pts, win_pts)
    cov = second / safe[..., None, None] - means[..., :, None] * means[..., None, :]

    # symmetric eigendecomposition; eigenvalues ascend, so column 0 is the normal
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[..., :, 0]
    flip = normals[..., 2] > 0
    normals[flip] *= -1.0

    valid = pc.valid_mask & (counts >= 3)
    normals[~valid] = 0.0
    return NormalMap(normals=normals, valid_mask=valid)


def colorize_normals(n: NormalMap) -> EncodedImage:
    """Map each normal component linearly from [-1, 1] to [0, 255]."""
    chans = round_half_up_u8((n.normals + 1.0) / 2.0 * 255.0)
    chans[~n.valid_mask] = 0
    return EncodedImage(np.moveaxis(chans, -1, 0).copy())


def _rescale_channel(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Min-max rescale over valid pixels to [0,255]; zero range maps to 0."""
    out = np.zeros(values.shape, dtype=np.uint8)
    if not valid.any():
        return out
    lo = values[valid].min()
    hi = values[valid].max()
    if hi > lo:
        out[valid] = round_half_up_u8((values[valid] - lo) / (hi - lo) * 255.0)
    return out


def compute_hha(d: DepthMap, k: CameraIntrinsics,
                up: tuple[float, float, float] = (0.0, -1.0, 0.0),
                window: int = 5) -> EncodedImage:
    """Horizontal disparity / height above ground / angle-to-up encoding.

    Ground is inferred as the 5th percentile of point heights along ``up``;
    heights are clamped at the ground before rescaling so the inferred
    ground level actually anchors the channel. Gravity is not estimated:
    ``up`` is explicit and defaults to camera -y.
    """
    up_vec = np.asarray(up, dtype=np.float64)
    if abs(np.linalg.norm(up_vec) - 1.0) > 1e-6:
        raise ValueError("up must be a unit vector")
    if not d.valid_mask.any():
        raise EmptyDepthError("depth map has no valid pixels")
    valid = d.valid_mask & (d.values > 0)
    if not valid.any():
        raise EmptyDepthError("no valid pixels with positive depth")

    disparity = np.zeros_like(d.values)
    disparity[valid] = k.fx / d.values[valid]
    disp_u8 = _rescale_channel(disparity, valid)

    pc = depth_to_pointcloud(d, k)
    heights = pc.points @ up_vec
    ground = np.percentile(heights[valid], 5.0)
    rel = np.maximum(heights - ground, 0.0)
    height_u8 = np.zeros(d.values.shape, dtype=np.uint8)
    hmax = rel[valid].max()
    if hmax > 0:
        height_u8[valid] = round_half_up_u8(rel[valid] / hmax * 255.0)

    nm = estimate_normals(pc, window=window)
    cosang = np.clip(nm.normals @ up_vec, -1.0, 1.0)
    angles = np.degrees(np.arccos(cosang))
    angle_u8 = np.zeros(d.values.shape, dtype=np.uint8)
    angle_valid = nm.valid_mask & valid
    angle_u8[angle_valid] = round_half_up_u8(angles[angle_valid] / 180.0 * 255.0)

    return EncodedImage(np.stack([disp_u8, height_u8, angle_u8], axis=0))


def encode_depth(d: DepthMap, fmt: str, k: CameraIntrinsics | None = None,
                 d_max: float = 3.5,
                 up: tuple[float, float, float] = (0.0, -1.0, 0.0),
                 window: int = 5) -> EncodedImage:
    """Dispatch to one of the three encodings by name."""
    if fmt not in DEPTH_FORMATS:
        raise ValueError(f"unknown depth format {fmt!r}; choose from {DEPTH_FORMATS}")
    if fmt == "raw":
        return raw_depth_to_image(d, d_max)
    if k is None:
        raise ValueError(f"{fmt} encoding requires camera intrinsics")
    if fmt == "hha":
        return compute_hha(d, k, up=up, window=window)
    return colorize_normals(estimate_normals(depth_to_pointcloud(d, k), window=window))


# --------------------------------------------------------------------------
# resize / crop / normalize
# --------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of [C, H, W] float using half-pixel sample centers."""
    c, h, w = img.shape

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        return i0c, i1c, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def preprocess(img: EncodedImage, spec: PreprocessSpec,
               dtype=np.float32) -> np.ndarray:
    """Resize shorter side, center-crop, scale to [0,1], then standardize.

    Returns a float tensor [3, crop, crop].
    """
    h, w = img.height, img.width
    if h == 0 or w == 0:
        raise ValueError("cannot preprocess an empty image")
    if h <= w:
        out_h = spec.target_size
        out_w = int(round(w * spec.target_size / h))
    else:
        out_w = spec.target_size
        out_h = int(round(h * spec.target_size / w))
    if spec.crop_size > min(out_h, out_w):
        raise ValueError(f"crop {spec.crop_size} exceeds resized image {out_h}x{out_w}")
    resized = resize_bilinear(img.values.astype(np.float64), out_h, out_w)
    top = (out_h - spec.crop_size) // 2
    left = (out_w - spec.crop_size) // 2
    crop = resized[:, top:top + spec.crop_size, left:left + spec.crop_size]
    crop = crop / 255.0
    mean = np.asarray(spec.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(spec.std, dtype=np.float64)[:, None, None]
    return ((crop - mean) / std).astype(dtype)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------

def depth_from_millimeters(arr: np.ndarray) -> DepthMap:
    """Interpret a 16-bit millimeter image (0 = hole) as a metric DepthMap."""
    arr = np.asarray(arr)
    return DepthMap(values=arr.astype(np.float64) / 1000.0, valid_mask=arr > 0)


def load_intrinsics(path) -> tuple[CameraIntrinsics, int, int]:
    """Read an intrinsics JSON document {fx, fy, cx, cy, width, height}."""
    with open(path) as fh:
        doc = json.load(fh)
    k = CameraIntrinsics(fx=float(doc["fx"]), fy=float(doc["fy"]),
                         cx=float(doc["cx"]), cy=float(doc["cy"]))
    width, height = int(doc["width"]), int(doc["height"])
    k.check_bounds(width, height)
    return k, width, height


def save_intrinsics(path, k: CameraIntrinsics, width: int, height: int) -> None:
    with open(path, "w") as fh:
        json.dump({"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                   "width": width, "height": height}, fh, indent=1)
        fh.write("\n")
