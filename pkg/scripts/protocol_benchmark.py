"""Teaching-protocol benchmark: sweep the learned gate over thresholds.

Trains the late-cat fusion model on the synthetic corpus, freezes its
features, then runs the scripted teaching protocol at every benchmark
threshold with several teacher seeds. Prints a per-threshold table of the
five protocol metrics and the outcome histogram.

    python3 scripts/protocol_benchmark.py --runs 10
"""

from __future__ import annotations

import argparse
import json
import tempfile
import time
from pathlib import Path

from rgbdvit import data, evalharness, lifelong
from rgbdvit.depth import PreprocessSpec
from rgbdvit.evalharness import FinetuneHP
from rgbdvit.fusion import FusionSpec, init_fusion_params
from rgbdvit.vit import ModelSpec

CORPUS = dict(categories=5, instances=2, views=40, image_size=32, seed=0)
MODEL = dict(image_size=32, patch_size=8, embed_dim=48, depth=2, heads=2,
             num_classes=5, positional_mode="sinusoid-2d", head_hidden_dim=64)
HP = dict(lr=1e-3, batch_size=32, epochs=20, seed=0)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--runs", type=int, default=10,
                        help="teacher seeds per threshold")
    parser.add_argument("--budget", type=int, default=100)
    parser.add_argument("--out", default=None, help="write aggregates here")
    args = parser.parse_args()

    t0 = time.time()
    work = Path(tempfile.mkdtemp(prefix="protocol-"))
    index = data.gen_synthetic(data.SynthConfig(**CORPUS), work / "corpus")
    base = ModelSpec(**MODEL)
    fspec = FusionSpec(mode="late", base=base, late_op="cat")
    pspec = PreprocessSpec(target_size=base.image_size, crop_size=base.image_size)

    train_ids, _ = data.trial_split(index, trial_seed=0)
    arrays = data.load_arrays(index, train_ids, pspec)
    params = init_fusion_params(fspec, seed=0)
    params, rep = evalharness.finetune(params, fspec, arrays, arrays,
                                       FinetuneHP(**HP))
    print(f"extractor trained: top-1 {rep.top1:.1f}% on its own training "
          f"views  [{time.time() - t0:.1f}s]")

    table = evalharness.extract_features(
        index, list(range(len(index.entries))), params, fspec, pspec=pspec)

    results = {}
    print(f"\n{'τ':>5} {'QCI':>12} {'ALC':>10} {'AIC':>11} "
          f"{'GCA':>12} {'APA':>12}  outcomes")
    for threshold in lifelong.BENCHMARK_THRESHOLDS:
        reports = [
            lifelong.run_protocol(
                index, table.vectors,
                lifelong.TeacherConfig(threshold=threshold, seed=seed,
                                       budget=args.budget))
            for seed in range(args.runs)
        ]
        agg = lifelong.aggregate_reports(reports)
        results[str(threshold)] = agg
        print(f"{threshold:5.2f} "
              f"{agg['QCI']['mean']:7.1f}±{agg['QCI']['std']:<4.1f} "
              f"{agg['ALC']['mean']:5.1f}±{agg['ALC']['std']:<4.1f} "
              f"{agg['AIC']['mean']:6.2f}±{agg['AIC']['std']:<4.2f} "
              f"{agg['GCA']['mean']:6.1f}±{agg['GCA']['std']:<5.1f} "
              f"{agg['APA']['mean']:6.1f}±{agg['APA']['std']:<5.1f}  "
              f"{agg['outcomes']}")

    print(f"\ntotal {time.time() - t0:.1f}s")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=1) + "\n")
        print(f"aggregates -> {args.out}")


if __name__ == "__main__":
    main()
