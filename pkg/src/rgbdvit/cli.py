"""Command-line entry points for the RGB-D recognition toolkit.

One executable, subcommand per task:

data preparation
    gen-synthetic   render the synthetic RGB-D corpus
    import-rod      convert a ROD-style tree into the canonical layout
    encode-depth    batch-encode 16-bit depth maps (raw / hha / surfnorm)
    split           write a train/test split manifest (trial / kfold / fewshot)

training and evaluation
    train           supervised training from fresh weights -> checkpoint
    eval            top-1 accuracy of a checkpoint on a split
    eval-knn        k-NN probe on frozen features
    eval-linear     linear probe on frozen features
    finetune        continue training a checkpoint (optionally re-fused)
    transfer        few-shot source->target adaptation curve

interactive teaching
    protocol        scripted teacher/learner runs + aggregate metrics
    serve           HTTP teaching service

Reports are JSON documents with the full configuration echoed back;
`--report <path>` writes to a file, otherwise they land on stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, evalharness, lifelong, vit
from .checkpoint import load_checkpoint, save_checkpoint
from .depth import (DEPTH_FORMATS, PreprocessSpec, depth_from_millimeters,
                    encode_depth, load_intrinsics)
from .evalharness import FinetuneHP, LinearEvalHP
from .fusion import FusionSpec, init_from_rgb_checkpoint, init_fusion_params

FUSION_FLAGS = ("rgb", "depth", "early-dual", "early-joint", "late")
_FLAG_TO_MODE = {"rgb": "rgb-only", "depth": "depth-only"}

SPEC_PRESETS = {
    # desk-scale model for the synthetic corpus and quick experiments
    "toy": dict(image_size=32, patch_size=8, embed_dim=48, depth=2, heads=2,
                num_classes=5, positional_mode="sinusoid-2d",
                head_hidden_dim=64),
    # ViT-Tiny geometry at full input resolution
    "tiny": dict(image_size=224, patch_size=16, embed_dim=192, depth=12,
                 heads=3, num_classes=51, head_hidden_dim=768),
}


# --------------------------------------------------------------------------
# shared option plumbing
# --------------------------------------------------------------------------

def _model_spec(arg: str) -> vit.ModelSpec:
    """A preset name or a path to a JSON document of ModelSpec fields."""
    if arg in SPEC_PRESETS:
        return vit.ModelSpec(**SPEC_PRESETS[arg])
    doc = json.loads(Path(arg).read_text())
    return vit.ModelSpec.from_dict(doc)


def _fusion_mode(flag: str) -> str:
    return _FLAG_TO_MODE.get(flag, flag)


def _fusion_spec(args, base: vit.ModelSpec) -> FusionSpec:
    mode = _fusion_mode(args.fusion)
    return FusionSpec(mode=mode, base=base,
                      late_op=args.late_op if mode == "late" else None)


def _dtype(precision: str):
    return np.float64 if precision == "f64" else np.float32


def _pspec(spec: vit.ModelSpec) -> PreprocessSpec:
    return PreprocessSpec(target_size=spec.image_size, crop_size=spec.image_size)


def _index(data_dir: str) -> data.DatasetIndex:
    return data.scan(Path(data_dir))


def _split_ids(args, index: data.DatasetIndex) -> tuple[list[int], list[int]]:
    return data.load_split(args.split, index)


def _np_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"Object of type {type(o).__name__} is not JSON serializable")


def _emit(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=1, default=_np_default)
    if path:
        Path(path).write_text(text + "\n")
        print(f"report written to {path}")
    else:
        print(text)


def _checkpoint_model(args) -> tuple[dict, FusionSpec]:
    params, manifest = load_checkpoint(args.checkpoint)
    if manifest.get("fusion_spec"):
        fspec = FusionSpec.from_dict(manifest["fusion_spec"])
    else:
        fspec = FusionSpec(mode="rgb-only",
                           base=vit.ModelSpec.from_dict(manifest["model_spec"]))
    return params, fspec


def _tables(args, index, ids_train, ids_test, params, fspec, dtype):
    pspec = _pspec(fspec.base)
    source_mode = getattr(args, "source_mode", None)
    train = evalharness.extract_features(index, ids_train, params, fspec,
                                         source_mode=source_mode, pspec=pspec,
                                         dtype=dtype)
    test = evalharness.extract_features(index, ids_test, params, fspec,
                                        source_mode=source_mode, pspec=pspec,
                                        dtype=dtype)
    return train, test


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    cfg = data.SynthConfig(categories=args.categories, instances=args.instances,
                           views=args.views, image_size=args.image_size,
                           seed=args.seed, dependence=args.dependence,
                           encoding=args.encoding)
    index = data.gen_synthetic(cfg, Path(args.out))
    print(f"wrote {len(index.entries)} views "
          f"({len(index.categories)} categories) to {args.out}")
    return 0


def cmd_import_rod(args) -> int:
    index = data.import_rod(Path(args.src), Path(args.out),
                            encoding=args.encoding, d_max=args.dmax)
    print(f"imported {len(index.entries)} views "
          f"({len(index.categories)} categories) into {args.out}")
    return 0


def cmd_encode_depth(args) -> int:
    k = None
    if args.intrinsics:
        k, _, _ = load_intrinsics(args.intrinsics)
    src, dst = Path(getattr(args, "in")), Path(args.out)
    n = 0
    for path in sorted(src.rglob("*.png")):
        img = Image.open(path)
        if img.mode not in ("I", "I;16", "I;16B", "I;16L"):
            print(f"skipping {path} (mode {img.mode}, not 16-bit depth)",
                  file=sys.stderr)
            continue
        depth = depth_from_millimeters(np.asarray(img, dtype=np.uint16))
        encoded = encode_depth(depth, args.format, k, d_max=args.dmax)
        out_path = dst / path.relative_to(src)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(encoded.values.transpose(1, 2, 0), "RGB").save(out_path)
        n += 1
    print(f"encoded {n} depth maps ({args.format}) into {dst}")
    return 0


def cmd_split(args) -> int:
    index = _index(args.data_dir)
    if args.kind == "trial":
        train, test = data.trial_split(index, trial_seed=args.seed)
        meta = {"trial_seed": args.seed}
    elif args.kind == "kfold":
        folds = data.kfold_split(index, args.k, seed=args.seed)
        if not 0 <= args.fold < len(folds):
            raise SystemExit(f"--fold must be in [0, {len(folds)})")
        train, test = folds[args.fold]
        meta = {"k": args.k, "fold": args.fold, "seed": args.seed}
    else:  # fewshot
        if not args.base_split:
            raise SystemExit("fewshot needs --base-split")
        train, test = data.load_split(args.base_split, index)
        train = data.few_shot_subset(index, train, args.shots, seed=args.seed)
        meta = {"shots": args.shots, "seed": args.seed,
                "base_split": args.base_split}
    data.save_split(args.out, index, train, test, kind=args.kind, meta=meta)
    print(f"{args.kind} split: {len(train)} train / {len(test)} test "
          f"-> {args.out}")
    return 0


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    index = _index(args.data_dir)
    base = _model_spec(args.spec)
    if base.num_classes != len(index.categories):
        base = dataclasses.replace(base, num_classes=len(index.categories))
    fspec = _fusion_spec(args, base)
    dtype = _dtype(args.precision)
    train_ids, test_ids = _split_ids(args, index)
    pspec = _pspec(base)
    train_arrays = data.load_arrays(index, train_ids, pspec, dtype=dtype)
    test_arrays = data.load_arrays(index, test_ids, pspec, dtype=dtype)
    params = init_fusion_params(fspec, seed=args.seed, dtype=dtype)
    hp = FinetuneHP(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                    weight_decay=args.weight_decay, seed=args.seed)
    params, report = evalharness.finetune(params, fspec, train_arrays,
                                          test_arrays, hp)
    report.regime = "train"
    save_checkpoint(args.out, params, base, fusion_spec=fspec)
    print(f"checkpoint -> {args.out}  (test top-1 {report.top1:.2f}%)")
    _emit(report.to_dict(), args.report)
    return 0


def cmd_eval(args) -> int:
    index = _index(args.data_dir)
    params, fspec = _checkpoint_model(args)
    dtype = _dtype(args.precision)
    _, test_ids = _split_ids(args, index)
    rgb, dep, labels = data.load_arrays(index, test_ids, _pspec(fspec.base),
                                        dtype=dtype)
    report = evalharness.evaluate(params, fspec, rgb, dep, labels,
                                  regime="eval", batch_size=args.batch_size,
                                  config={"checkpoint": args.checkpoint,
                                          "fusion": fspec.to_dict()})
    print(f"top-1 {report.top1:.2f}% over {report.n_samples} samples")
    _emit(report.to_dict(), args.report)
    return 0


def cmd_eval_knn(args) -> int:
    index = _index(args.data_dir)
    params, fspec = _checkpoint_model(args)
    train_ids, test_ids = _split_ids(args, index)
    train, test = _tables(args, index, train_ids, test_ids, params, fspec,
                          _dtype(args.precision))
    report = evalharness.knn_eval(train, test, k=args.k)
    report.config["checkpoint"] = args.checkpoint
    print(f"knn (k={args.k}) top-1 {report.top1:.2f}% "
          f"over {report.n_samples} samples")
    _emit(report.to_dict(), args.report)
    return 0


def cmd_eval_linear(args) -> int:
    index = _index(args.data_dir)
    params, fspec = _checkpoint_model(args)
    train_ids, test_ids = _split_ids(args, index)
    train, test = _tables(args, index, train_ids, test_ids, params, fspec,
                          _dtype(args.precision))
    hp = LinearEvalHP(lr=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed)
    report = evalharness.linear_eval(train, test, hp,
                                     num_classes=len(index.categories))
    report.config["checkpoint"] = args.checkpoint
    print(f"linear probe top-1 {report.top1:.2f}% "
          f"over {report.n_samples} samples")
    _emit(report.to_dict(), args.report)
    return 0


def cmd_finetune(args) -> int:
    index = _index(args.data_dir)
    dtype = _dtype(args.precision)
    params, src_fspec = _checkpoint_model(args)
    if args.fusion:
        mode = _fusion_mode(args.fusion)
        if mode != src_fspec.mode:
            fspec = FusionSpec(mode=mode, base=src_fspec.base,
                               late_op=args.late_op if mode == "late" else None)
            params = init_from_rgb_checkpoint(args.checkpoint, fspec,
                                              head_seed=args.seed)
        else:
            fspec = src_fspec
    else:
        fspec = src_fspec
    train_ids, test_ids = _split_ids(args, index)
    pspec = _pspec(fspec.base)
    train_arrays = data.load_arrays(index, train_ids, pspec, dtype=dtype)
    test_arrays = data.load_arrays(index, test_ids, pspec, dtype=dtype)
    hp = (FinetuneHP.small_data(epochs=args.epochs, seed=args.seed)
          if args.small_data else
          FinetuneHP(lr=args.lr, batch_size=args.batch_size,
                     epochs=args.epochs, weight_decay=args.weight_decay,
                     seed=args.seed))
    params, report = evalharness.finetune(params, fspec, train_arrays,
                                          test_arrays, hp)
    if args.out:
        save_checkpoint(args.out, params, fspec.base, fusion_spec=fspec)
        print(f"checkpoint -> {args.out}")
    print(f"finetune top-1 {report.top1:.2f}% over {report.n_samples} samples")
    _emit(report.to_dict(), args.report)
    return 0


def cmd_transfer(args) -> int:
    index = _index(args.data_dir)
    train_ids, test_ids = _split_ids(args, index)
    shots = tuple(int(s) for s in args.shots.split(",") if s)
    hp = FinetuneHP.small_data(epochs=args.epochs, seed=args.seed)
    reports = evalharness.transfer_experiment(
        args.checkpoint, index, train_ids, test_ids, shots=shots, hp=hp,
        seed=args.seed, dtype=_dtype(args.precision),
        ceiling=not args.no_ceiling)
    for rep in reports:
        print(f"{rep.regime:16s} shots={rep.config.get('shots'):>4} "
              f"top-1 {rep.top1:6.2f}%")
    _emit({"reports": [r.to_dict() for r in reports]}, args.report)
    return 0


# --------------------------------------------------------------------------
# interactive teaching
# --------------------------------------------------------------------------

def cmd_protocol(args) -> int:
    index = _index(args.data_dir)
    params, manifest = load_checkpoint(args.extractor)
    if args.fusion:
        mode = _fusion_mode(args.fusion)
        base = vit.ModelSpec.from_dict(manifest["model_spec"])
        fspec = FusionSpec(mode=mode, base=base,
                           late_op=args.late_op if mode == "late" else None)
    elif manifest.get("fusion_spec"):
        fspec = FusionSpec.from_dict(manifest["fusion_spec"])
    else:
        raise SystemExit("checkpoint lacks a fusion spec; pass --fusion")
    all_ids = list(range(len(index.entries)))
    table = evalharness.extract_features(index, all_ids, params, fspec,
                                         pspec=_pspec(fspec.base))
    reports = []
    for run in range(args.runs):
        cfg = lifelong.TeacherConfig(threshold=args.threshold,
                                     budget=args.budget,
                                     window_factor=args.window_factor,
                                     seed=args.seed + run, k=args.k,
                                     count_teaches=args.count_teaches)
        reports.append(lifelong.run_protocol(index, table.vectors, cfg))
    agg = lifelong.aggregate_reports(reports)
    print(f"{'τ':>5} {'QCI':>12} {'ALC':>10} {'AIC':>10} "
          f"{'GCA':>12} {'APA':>12}")
    print(f"{args.threshold:5.2f} "
          f"{agg['QCI']['mean']:7.1f}±{agg['QCI']['std']:<4.1f} "
          f"{agg['ALC']['mean']:5.1f}±{agg['ALC']['std']:<4.1f} "
          f"{agg['AIC']['mean']:5.2f}±{agg['AIC']['std']:<4.2f} "
          f"{agg['GCA']['mean']:6.1f}±{agg['GCA']['std']:<5.1f} "
          f"{agg['APA']['mean']:6.1f}±{agg['APA']['std']:<5.1f}")
    _emit({"aggregate": agg, "runs": [r.to_dict() for r in reports]},
          args.report)
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    app = create_app(checkpoint=args.checkpoint,
                     fusion=_fusion_mode(args.fusion), late_op=args.late_op,
                     encoding=args.encoding, data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_report(p):
    p.add_argument("--report", default=None, help="write the JSON report here")


def _add_precision(p):
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")


def _add_fusion(p, required=False, default=None):
    p.add_argument("--fusion", choices=FUSION_FLAGS, required=required,
                   default=default)
    p.add_argument("--late-op", choices=("avg", "max", "cat"), default="avg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgbdvit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render the synthetic RGB-D corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--categories", type=int, default=5)
    p.add_argument("--instances", type=int, default=2)
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dependence", choices=("joint-only", "independent"),
                   default="joint-only")
    p.add_argument("--encoding", choices=DEPTH_FORMATS, default="surfnorm")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("import-rod", help="convert a ROD-style tree")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoding", choices=DEPTH_FORMATS, default="surfnorm")
    p.add_argument("--dmax", type=float, default=3.5)
    p.set_defaults(func=cmd_import_rod)

    p = sub.add_parser("encode-depth", help="batch-encode 16-bit depth maps")
    p.add_argument("--format", choices=DEPTH_FORMATS, required=True)
    p.add_argument("--dmax", type=float, default=3.5)
    p.add_argument("--intrinsics", default=None,
                   help="intrinsics JSON (fx, fy, cx, cy, width, height)")
    p.add_argument("--in", dest="in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode_depth)

    p = sub.add_parser("split", help="write a train/test split manifest")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--kind", choices=("trial", "kfold", "fewshot"),
                   required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=10, help="folds for kfold")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--base-split", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="supervised training from fresh weights")
    p.add_argument("--spec", required=True,
                   help=f"preset ({', '.join(SPEC_PRESETS)}) or JSON path")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    _add_fusion(p, default="late")
    p.add_argument("--seed", type=int, default=0)
    _add_precision(p)
    p.add_argument("--lr", type=float, default=9e-5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_report(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    _add_precision(p)
    p.add_argument("--batch-size", type=int, default=64)
    _add_report(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-knn", help="k-NN probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--source-mode", default=None,
                   help="declared source fusion mode (compatibility check)")
    _add_precision(p)
    _add_report(p)
    p.set_defaults(func=cmd_eval_knn)

    p = sub.add_parser("eval-linear", help="linear probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    _add_precision(p)
    _add_report(p)
    p.set_defaults(func=cmd_eval_linear)

    p = sub.add_parser("finetune", help="continue training a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    _add_fusion(p)
    p.add_argument("--lr", type=float, default=9e-5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--small-data", action="store_true",
                   help="use the reduced-data profile (lr 3e-5, batch 64)")
    _add_precision(p)
    p.add_argument("--out", default=None, help="save the tuned checkpoint here")
    _add_report(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("transfer", help="few-shot adaptation curve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--shots", default="1,5,10,20")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ceiling", action="store_true")
    _add_precision(p)
    _add_report(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("protocol", help="scripted teaching protocol runs")
    p.add_argument("--extractor", required=True, help="feature checkpoint")
    p.add_argument("--data-dir", required=True)
    _add_fusion(p)
    p.add_argument("--threshold", type=float, default=0.67)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--window-factor", type=int, default=3)
    p.add_argument("--count-teaches", action="store_true")
    _add_report(p)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("serve", help="HTTP teaching service")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--checkpoint", default=None)
    _add_fusion(p, default="late")
    p.add_argument("--encoding", choices=DEPTH_FORMATS, default="surfnorm")
    p.add_argument("--data-dir", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
