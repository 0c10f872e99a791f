"""Dataset layout, splits, and a synthetic RGB-D generator.

Canonical on-disk layout::

    root/<category>/<instance>/<view>_rgb.png    8-bit RGB
    root/<category>/<instance>/<view>_depth.png  8-bit encoded depth (3ch)
    root/intrinsics.json                         optional camera parameters

Depth images are stored already passed through a depth encoding
(surfnorm by default) so real and synthetic data share one loading
path. Raw-depth corpora are converted once by ``import_rod``.

The synthetic generator draws a fixed-radius disk over a flat
background. In ``joint-only`` mode the disk's color encodes a color
class, its depth profile (a tilted plane whose gradient direction is
the shape class) encodes a shape class, and the label is a color/shape
pairing in which neither coordinate alone is injective: no unimodal
predictor can exceed chance-per-coordinate accuracy by construction.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .depth import (CameraIntrinsics, DepthMap, EncodedImage, PreprocessSpec,
                    encode_depth, preprocess, save_intrinsics, load_intrinsics)

__all__ = [
    "LayoutError", "SplitError", "DatasetEntry", "DatasetIndex", "SynthConfig",
    "scan", "trial_split", "kfold_split", "few_shot_subset",
    "save_split", "load_split", "entry_ids", "ids_to_indices",
    "joint_label_map", "unimodal_oracle_accuracy", "gen_synthetic",
    "import_rod", "load_pair", "load_arrays", "DEFAULT_INTRINSICS",
]

# Kinect-style defaults used when a corpus ships no intrinsics file.
DEFAULT_INTRINSICS = CameraIntrinsics(fx=575.8, fy=575.8, cx=319.5, cy=239.5)


class LayoutError(ValueError):
    """The directory tree does not match the canonical layout."""


class SplitError(ValueError):
    """A split cannot be formed (e.g. single-instance category)."""


@dataclass(frozen=True)
class DatasetEntry:
    category: str
    instance: str
    view: str
    rgb_path: Path
    depth_path: Path

    @property
    def id(self) -> str:
        return f"{self.category}/{self.instance}/{self.view}"


@dataclass
class DatasetIndex:
    root: Path
    entries: list[DatasetEntry]
    categories: list[str]
    intrinsics: CameraIntrinsics

    def label_of(self, i: int) -> int:
        return self.categories.index(self.entries[i].category)

    @property
    def labels(self) -> np.ndarray:
        lut = {c: j for j, c in enumerate(self.categories)}
        return np.array([lut[e.category] for e in self.entries], dtype=np.int64)

    def instance_key(self, i: int) -> tuple[str, str]:
        e = self.entries[i]
        return (e.category, e.instance)


def scan(root) -> DatasetIndex:
    """Index a canonical-layout tree with deterministic ordering."""
    root = Path(root)
    if not root.exists():
        raise LayoutError(f"dataset root {root} does not exist")
    entries: list[DatasetEntry] = []
    categories: list[str] = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        category = cat_dir.name
        cat_entries = []
        for inst_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            rgbs = {p.name[:-len("_rgb.png")]: p
                    for p in inst_dir.glob("*_rgb.png")}
            depths = {p.name[:-len("_depth.png")]: p
                      for p in inst_dir.glob("*_depth.png")}
            for view in sorted(rgbs.keys() | depths.keys()):
                if view not in depths:
                    raise LayoutError(f"missing depth image for {rgbs[view]}")
                if view not in rgbs:
                    raise LayoutError(f"missing rgb image for {depths[view]}")
                cat_entries.append(DatasetEntry(category, inst_dir.name, view,
                                                rgbs[view], depths[view]))
        if cat_entries:
            categories.append(category)
            entries.extend(cat_entries)
    intr_path = root / "intrinsics.json"
    intr = load_intrinsics(intr_path)[0] if intr_path.exists() else DEFAULT_INTRINSICS
    return DatasetIndex(root=root, entries=entries, categories=categories,
                        intrinsics=intr)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def _instances_by_category(index: DatasetIndex) -> dict[str, list[str]]:
    by_cat: dict[str, list[str]] = {}
    for e in index.entries:
        insts = by_cat.setdefault(e.category, [])
        if e.instance not in insts:
            insts.append(e.instance)
    return by_cat


def trial_split(index: DatasetIndex, trial_seed: int) -> tuple[list[int], list[int]]:
    """Hold out one seeded-draw instance per category (all its views)."""
    by_cat = _instances_by_category(index)
    for cat, insts in by_cat.items():
        if len(insts) < 2:
            raise SplitError(f"category {cat!r} has a single instance; "
                             "trial splitting needs at least two")
    rng = np.random.default_rng(trial_seed)
    held_out = {cat: insts[rng.integers(len(insts))]
                for cat, insts in sorted(by_cat.items())}
    train, test = [], []
    for i, e in enumerate(index.entries):
        (test if held_out[e.category] == e.instance else train).append(i)
    return train, test


def kfold_split(index: DatasetIndex, k: int, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Per-category view-level k-fold partition (seeded shuffle, round-robin)."""
    if k < 2:
        raise SplitError("k-fold needs k >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(index.entries), dtype=np.int64)
    for cat in index.categories:
        ids = [i for i, e in enumerate(index.entries) if e.category == cat]
        if len(ids) < k:
            raise SplitError(f"category {cat!r} has {len(ids)} views < {k} folds")
        perm = rng.permutation(len(ids))
        for pos, j in enumerate(perm):
            fold_of[ids[j]] = pos % k
    folds = []
    for f in range(k):
        test = [i for i in range(len(index.entries)) if fold_of[i] == f]
        train = [i for i in range(len(index.entries)) if fold_of[i] != f]
        folds.append((train, test))
    return folds


def few_shot_subset(index: DatasetIndex, train_ids: list[int], shots: int,
                    seed: int = 0) -> list[int]:
    """Seeded uniform draw of min(shots, available) views per instance."""
    if shots < 1:
        raise SplitError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    by_inst: dict[tuple[str, str], list[int]] = {}
    for i in train_ids:
        by_inst.setdefault(index.instance_key(i), []).append(i)
    subset: list[int] = []
    for key in sorted(by_inst):
        ids = by_inst[key]
        n = min(shots, len(ids))
        picks = rng.choice(len(ids), size=n, replace=False)
        subset.extend(ids[j] for j in sorted(picks))
    return sorted(subset)


def entry_ids(index: DatasetIndex, indices: list[int]) -> list[str]:
    return [index.entries[i].id for i in indices]


def ids_to_indices(index: DatasetIndex, ids: list[str]) -> list[int]:
    lut = {e.id: i for i, e in enumerate(index.entries)}
    missing = [s for s in ids if s not in lut]
    if missing:
        raise LayoutError(f"split references unknown entries: {missing[:5]}")
    return [lut[s] for s in ids]


def save_split(path, index: DatasetIndex, train: list[int], test: list[int],
               kind: str = "trial", meta: dict | None = None) -> None:
    doc = {"kind": kind, "train": entry_ids(index, train),
           "test": entry_ids(index, test)}
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=1))


def load_split(path, index: DatasetIndex) -> tuple[list[int], list[int]]:
    doc = json.loads(Path(path).read_text())
    return ids_to_indices(index, doc["train"]), ids_to_indices(index, doc["test"])


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    categories: int = 5
    instances: int = 2
    views: int = 10
    image_size: int = 32
    seed: int = 0
    dependence: str = "joint-only"   # rgb-separable | depth-separable | joint-only
    encoding: str = "surfnorm"

    def __post_init__(self):
        if self.dependence not in ("rgb-separable", "depth-separable", "joint-only"):
            raise ValueError(f"unknown dependence {self.dependence!r}")
        if self.categories < 2 or self.instances < 1 or self.views < 1:
            raise ValueError("need >= 2 categories and >= 1 instance/view")
        if self.dependence == "joint-only" and self.categories < 3:
            raise ValueError("joint-only needs >= 3 categories so that "
                             "neither coordinate of the pairing is injective")


def joint_label_map(categories: int) -> list[tuple[int, int]]:
    """Label -> (color class, shape class) with m = ceil(sqrt(C)) classes each.

    Labels enumerate the m x m grid row-major, so with C > m neither
    coordinate determines the label alone.
    """
    m = math.isqrt(categories - 1) + 1
    return [(l % m, l // m) for l in range(categories)]


def unimodal_oracle_accuracy(label_map: list[tuple[int, int]], coord: int) -> float:
    """Best possible balanced accuracy from one pairing coordinate alone."""
    by_class: dict[int, int] = {}
    for cls in (pair[coord] for pair in label_map):
        by_class[cls] = by_class.get(cls, 0) + 1
    # the oracle picks one label per observed class value
    return len(by_class) / len(label_map)


def _class_color(color_class: int, m: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(color_class / m, 0.85, 0.9)
    return np.array([r, g, b])


def _disk_mask(size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size]
    return (u - cx) ** 2 + (v - cy) ** 2 <= radius ** 2


def _synth_classes(cfg: SynthConfig, label: int) -> tuple[int, int, int, int]:
    """(color class, #color classes, shape class, #shape classes)."""
    if cfg.dependence == "rgb-separable":
        return label, cfg.categories, 0, 1
    if cfg.dependence == "depth-separable":
        return 0, 1, label, cfg.categories
    lm = joint_label_map(cfg.categories)
    m = math.isqrt(cfg.categories - 1) + 1
    c, s = lm[label]
    return c, m, s, m


def gen_synthetic(cfg: SynthConfig, out_root) -> DatasetIndex:
    """Render the synthetic corpus into the canonical layout."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    size = cfg.image_size
    intr = CameraIntrinsics(fx=float(size), fy=float(size),
                            cx=(size - 1) / 2, cy=(size - 1) / 2)
    save_intrinsics(out_root / "intrinsics.json", intr, size, size)
    radius = 0.32 * size

    meta = {"config": {"categories": cfg.categories, "instances": cfg.instances,
                       "views": cfg.views, "image_size": size, "seed": cfg.seed,
                       "dependence": cfg.dependence, "encoding": cfg.encoding}}
    if cfg.dependence == "joint-only":
        meta["label_map"] = joint_label_map(cfg.categories)
    (out_root / "synth_meta.json").write_text(json.dumps(meta, indent=1))

    width = len(str(cfg.categories - 1))
    for label in range(cfg.categories):
        color_cls, n_colors, shape_cls, n_shapes = _synth_classes(cfg, label)
        base_color = _class_color(color_cls, n_colors)
        theta0 = 2 * math.pi * shape_cls / n_shapes
        cat = f"cat{label:0{width}d}"
        for inst in range(cfg.instances):
            inst_rng = np.random.default_rng((cfg.seed, 101, label, inst))
            lightness = 1.0 + inst_rng.uniform(-0.08, 0.08)
            d0_inst = 1.4 + inst_rng.uniform(-0.1, 0.1)
            inst_dir = out_root / cat / f"inst{inst}"
            inst_dir.mkdir(parents=True, exist_ok=True)
            for view in range(cfg.views):
                rng = np.random.default_rng((cfg.seed, 7, label, inst, view))
                cx = (size - 1) / 2 + rng.uniform(-size / 16, size / 16)
                cy = (size - 1) / 2 + rng.uniform(-size / 16, size / 16)
                mask = _disk_mask(size, cx, cy, radius)

                rgb = np.full((size, size, 3), 0.42)
                rgb += rng.normal(0, 0.015, rgb.shape)
                tint = base_color * lightness * (1 + rng.uniform(-0.03, 0.03))
                rgb[mask] = tint + rng.normal(0, 0.015, (int(mask.sum()), 3))
                rgb_u8 = np.clip(np.floor(rgb * 255 + 0.5), 0, 255).astype(np.uint8)

                theta = theta0 + rng.uniform(-0.09, 0.09)
                d0 = d0_inst + rng.uniform(-0.05, 0.05)
                v_idx, u_idx = np.mgrid[0:size, 0:size]
                tilt = 0.45 * ((u_idx - cx) * math.cos(theta) +
                               (v_idx - cy) * math.sin(theta)) / radius
                depth = np.full((size, size), 2.6 + rng.uniform(-0.05, 0.05))
                depth[mask] = d0 + tilt[mask]
                dm = DepthMap(values=depth)
                encoded = encode_depth(dm, cfg.encoding, intr)

                stem = f"view{view:03d}"
                Image.fromarray(rgb_u8).save(inst_dir / f"{stem}_rgb.png")
                dep_u8 = np.transpose(encoded.values, (1, 2, 0))
                Image.fromarray(dep_u8).save(inst_dir / f"{stem}_depth.png")
    return scan(out_root)


# --------------------------------------------------------------------------
# ROD-style import
# --------------------------------------------------------------------------

def import_rod(src_root, out_root, encoding: str = "surfnorm",
               d_max: float = 3.5, intrinsics: CameraIntrinsics | None = None) -> DatasetIndex:
    """Convert a `<cat>/<cat>_<i>/<name>_crop.png` + `<name>_depthcrop.png`
    tree (16-bit depth in millimeters) into the canonical layout."""
    src_root, out_root = Path(src_root), Path(out_root)
    if not src_root.exists():
        raise LayoutError(f"source root {src_root} does not exist")
    out_root.mkdir(parents=True, exist_ok=True)
    n = 0
    for cat_dir in sorted(p for p in src_root.iterdir() if p.is_dir()):
        for inst_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            out_dir = out_root / cat_dir.name / inst_dir.name
            for rgb_path in sorted(inst_dir.glob("*_crop.png")):
                stem = rgb_path.name[:-len("_crop.png")]
                depth_path = inst_dir / f"{stem}_depthcrop.png"
                if not depth_path.exists():
                    raise LayoutError(f"missing depth image for {rgb_path}")
                rgb = Image.open(rgb_path).convert("RGB")
                mm = np.asarray(Image.open(depth_path)).astype(np.float64)
                h, w = mm.shape[:2]
                intr = intrinsics or CameraIntrinsics(
                    fx=570.3, fy=570.3, cx=(w - 1) / 2, cy=(h - 1) / 2)
                dm = DepthMap(values=mm / 1000.0, valid_mask=mm > 0)
                enc = encode_depth(dm, encoding, intr, d_max=d_max)
                out_dir.mkdir(parents=True, exist_ok=True)
                rgb.save(out_dir / f"{stem}_rgb.png")
                Image.fromarray(np.transpose(enc.values, (1, 2, 0))).save(
                    out_dir / f"{stem}_depth.png")
                n += 1
    if n == 0:
        raise LayoutError(f"no `*_crop.png` images found under {src_root}")
    return scan(out_root)


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def load_pair(index: DatasetIndex, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Load one entry as channel-first uint8 arrays (rgb, encoded depth)."""
    e = index.entries[i]
    rgb = np.asarray(Image.open(e.rgb_path).convert("RGB"))
    dep = np.asarray(Image.open(e.depth_path).convert("RGB"))
    return (np.transpose(rgb, (2, 0, 1)).copy(),
            np.transpose(dep, (2, 0, 1)).copy())


def load_arrays(index: DatasetIndex, ids: list[int],
                pspec: PreprocessSpec | None = None,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Load + preprocess a list of entries into batched arrays.

    Returns (rgb [B,3,c,c], depth [B,3,c,c], labels [B]).
    """
    if pspec is None:
        pspec = PreprocessSpec()
    rgbs, deps = [], []
    for i in ids:
        r, d = load_pair(index, i)
        rgbs.append(preprocess(EncodedImage(r), pspec, dtype=dtype))
        deps.append(preprocess(EncodedImage(d), pspec, dtype=dtype))
    labels = index.labels[ids] if ids else np.zeros(0, dtype=np.int64)
    c = pspec.crop_size
    rgb = np.stack(rgbs) if rgbs else np.zeros((0, 3, c, c), dtype=dtype)
    dep = np.stack(deps) if deps else np.zeros((0, 3, c, c), dtype=dtype)
    return rgb, dep, np.asarray(labels, dtype=np.int64)
