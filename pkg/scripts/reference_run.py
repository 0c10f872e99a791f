"""Seeded reference run on the joint-only synthetic corpus.

Trains the late-cat fusion model and both unimodal baselines from
scratch, then adapts an RGB-only source checkpoint to RGB-D (late vs
early) with 5 shots per instance. The corpus pairs color and shape so
neither modality alone can separate the 5 categories (RGB ceiling 60%,
depth ceiling 40%); fusion has to close the gap.

Writes the frozen expected values consumed by the acceptance suite:

    python3 scripts/reference_run.py --out tests/reference_values.json
"""

from __future__ import annotations

import argparse
import json
import tempfile
import time
from pathlib import Path

from rgbdvit import data, evalharness
from rgbdvit.checkpoint import save_checkpoint
from rgbdvit.depth import PreprocessSpec
from rgbdvit.evalharness import FinetuneHP
from rgbdvit.fusion import (FusionSpec, init_from_rgb_checkpoint,
                            init_fusion_params)
from rgbdvit.vit import ModelSpec

CORPUS = dict(categories=5, instances=2, views=40, image_size=32, seed=0)
TRIAL_SEED = 0
SHOTS = 5
MODEL = dict(image_size=32, patch_size=8, embed_dim=48, depth=2, heads=2,
             num_classes=5, positional_mode="sinusoid-2d", head_hidden_dim=64)
HP = dict(lr=1e-3, batch_size=32, epochs=20, seed=0)


def run_reference(work_dir: Path | None = None, verbose: bool = True) -> dict:
    """Execute the full reference experiment; returns the results document."""
    t0 = time.time()
    work = Path(work_dir) if work_dir else Path(tempfile.mkdtemp(prefix="refrun-"))
    say = print if verbose else (lambda *a, **k: None)

    index = data.gen_synthetic(data.SynthConfig(**CORPUS), work / "corpus")
    train_ids, test_ids = data.trial_split(index, trial_seed=TRIAL_SEED)
    base = ModelSpec(**MODEL)
    pspec = PreprocessSpec(target_size=base.image_size, crop_size=base.image_size)
    tr = data.load_arrays(index, train_ids, pspec)
    te = data.load_arrays(index, test_ids, pspec)
    hp = FinetuneHP(**HP)
    say(f"corpus {len(index.entries)} views, split "
        f"{len(train_ids)}/{len(test_ids)}  [{time.time() - t0:.1f}s]")

    results: dict[str, float] = {}

    def train(fspec: FusionSpec, tr_arrays, tag: str, params=None):
        params = params if params is not None else init_fusion_params(fspec, seed=0)
        params, rep = evalharness.finetune(params, fspec, tr_arrays, te, hp)
        results[tag] = rep.top1
        say(f"{tag:28s} top-1 {rep.top1:6.2f}%  [{time.time() - t0:.1f}s]")
        return params

    train(FusionSpec(mode="late", base=base, late_op="cat"), tr, "late-cat")
    rgb_params = train(FusionSpec(mode="rgb-only", base=base), tr, "rgb-only")
    train(FusionSpec(mode="depth-only", base=base), tr, "depth-only")

    ckpt = work / "rgb-source.ckpt"
    save_checkpoint(ckpt, rgb_params, base,
                    fusion_spec=FusionSpec(mode="rgb-only", base=base))

    sub = data.few_shot_subset(index, train_ids, SHOTS, seed=0)
    tr_shot = data.load_arrays(index, sub, pspec)
    say(f"{SHOTS}-shot subset: {len(sub)} samples")
    for mode, op, tag in (("late", "cat", "transfer-late"),
                          ("early-joint", None, "transfer-early")):
        fspec = FusionSpec(mode=mode, base=base, late_op=op)
        train(fspec, tr_shot, tag,
              params=init_from_rgb_checkpoint(ckpt, fspec, head_seed=0))

    elapsed = time.time() - t0
    doc = {
        "config": {"corpus": CORPUS, "trial_seed": TRIAL_SEED, "shots": SHOTS,
                   "model": MODEL, "hp": HP},
        "top1": results,
        "elapsed_seconds": round(elapsed, 1),
    }
    best_unimodal = max(results["rgb-only"], results["depth-only"])
    say(f"\nfusion benefit: {results['late-cat']:.1f} vs best unimodal "
        f"{best_unimodal:.1f} (+{results['late-cat'] - best_unimodal:.1f})")
    say(f"transfer ordering: late {results['transfer-late']:.1f} vs early "
        f"{results['transfer-early']:.1f}")
    say(f"total {elapsed:.1f}s")
    return doc


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=None,
                        help="write the results JSON here")
    parser.add_argument("--work-dir", default=None,
                        help="keep corpus/checkpoints here instead of a tmpdir")
    args = parser.parse_args()
    doc = run_reference(Path(args.work_dir) if args.work_dir else None)
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
        print(f"reference values -> {args.out}")


if __name__ == "__main__":
    main()
