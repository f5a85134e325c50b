"""Single command-line entry point wiring all pipeline stages.

Dataset directory layout: <data>/images/*.png plus <data>/annotations.csv;
`madet preprocess` adds <data>/pre/.  Every run writes a JSON manifest with
the effective configuration, seed, and input digests.

Exit codes: 0 success, 2 usage, then one code per error category (see
EXIT_CODES).
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__

# Set before numpy/OpenBLAS load (handlers import the heavy modules lazily):
# single-threaded BLAS keeps runs reproducible and plays well with the
# per-image worker processes.
_BLAS_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")

EXIT_CODES = {
    "ConfigError": 3,
    "DataError": 4,
    "ValidationError": 5,
    "FormatError": 6,
    "ParseError": 6,
    "PipelineOrderError": 7,
    "DivergenceError": 8,
    "GenerationError": 9,
    "ShapeError": 10,
    "SpecError": 10,
    "UndefinedMetricError": 11,
}

FORMAT_VERSIONS = "checkpoint MACNN1, pmap PMAP/1, annotations/candidates CSV v1"


def _sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _digest_inputs(paths):
    """Digest files; directories are digested file-by-file in sorted order."""
    digests = {}
    for path in paths:
        path = Path(path)
        if path.is_dir():
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                digests[str(child)] = _sha256_file(child)
        elif path.is_file():
            digests[str(path)] = _sha256_file(path)
    return digests


def _write_manifest(target, command, args, cfg=None, inputs=(), outputs=()):
    manifest = {
        "tool": f"madet {__version__}",
        "formats": FORMAT_VERSIONS,
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": getattr(cfg, "seed", None) if cfg is not None else None,
        "inputs": _digest_inputs(inputs),
        "outputs": [str(p) for p in outputs],
    }
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_config(args):
    from .config import RunConfig, parse_config
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    else:
        cfg = RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "stride", None) is not None:
        cfg.stride = args.stride
    return cfg.validate()


def _dataset_paths(data_dir):
    data_dir = Path(data_dir)
    images = data_dir / "images"
    if not images.is_dir():
        images = data_dir
    return images, data_dir / "annotations.csv", data_dir / "pre"


def _load_dataset(data_dir, fov_threshold):
    from .data import load_annotations, load_image
    from .errors import DataError
    images_dir, annotations_path, _ = _dataset_paths(data_dir)
    paths = sorted(list(images_dir.glob("*.png")) + list(images_dir.glob("*.jpg"))
                   + list(images_dir.glob("*.jpeg")))
    if not paths:
        raise DataError(f"no PNG/JPEG images found under {images_dir}")
    records = [load_image(p, fov_threshold) for p in paths]
    if not annotations_path.exists():
        raise DataError(f"{annotations_path}: annotation CSV not found")
    by_id = {r.image_id: r for r in records}
    annotations = load_annotations(annotations_path, records=by_id)
    known = {a.image_id for a in annotations}
    from .data import AnnotationSet
    annotations += [AnnotationSet(r.image_id, []) for r in records
                    if r.image_id not in known]
    annotations.sort(key=lambda a: a.image_id)
    return records, annotations


def _require_preprocessed(data_dir):
    from .errors import PipelineOrderError
    from .preprocess import load_preprocessed
    _, _, pre_dir = _dataset_paths(data_dir)
    if not (pre_dir / "manifest.csv").exists():
        raise PipelineOrderError(f"{pre_dir}: no preprocessed residuals; "
                                 f"run `madet preprocess` first")
    return load_preprocessed(pre_dir)


def _require_annotations(data_dir, preprocessed):
    from .data import AnnotationSet, load_annotations
    from .errors import DataError
    _, annotations_path, _ = _dataset_paths(data_dir)
    if not annotations_path.exists():
        raise DataError(f"{annotations_path}: annotation CSV not found")
    annotations = load_annotations(annotations_path)
    known = {a.image_id for a in annotations}
    annotations += [AnnotationSet(p.image_id, []) for p in preprocessed
                    if p.image_id not in known]
    annotations.sort(key=lambda a: a.image_id)
    return annotations


def _require_checkpoint(path, spec):
    from .errors import PipelineOrderError
    from .network import load_checkpoint
    if not Path(path).exists():
        raise PipelineOrderError(f"{path}: checkpoint not found; train the "
                                 f"network first")
    return load_checkpoint(path, spec)


def _load_maps_dir(directory):
    from .errors import PipelineOrderError
    from .infer import load_pmap
    directory = Path(directory)
    paths = sorted(directory.glob("*.pmap")) if directory.is_dir() else []
    if not paths:
        raise PipelineOrderError(f"{directory}: no probability maps; run "
                                 f"inference first")
    return {p.stem: load_pmap(p) for p in paths}


# ------------------------------------------------------------------ stages

def cmd_gen_synthetic(args):
    from .data import generate_synthetic, save_annotations, save_image
    records, annotations = generate_synthetic(
        args.seed, args.n_images, args.image_size,
        (args.n_ma_min, args.n_ma_max), (args.contrast_min, args.contrast_max))
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for record in records:
        save_image(out / "images" / f"{record.image_id}.png", record)
    save_annotations(out / "annotations.csv", annotations)
    _write_manifest(out / "manifest.json", "gen-synthetic", args,
                    outputs=[out / "images", out / "annotations.csv"])
    print(f"wrote {len(records)} images and "
          f"{sum(len(a.centroids) for a in annotations)} lesions to {out}")
    return 0


def cmd_preprocess(args):
    from .preprocess import preprocess_record, save_preprocessed
    cfg = _load_config(args)
    records, _ = _load_dataset(args.data, cfg.fov_threshold)
    preprocessed = [preprocess_record(r, cfg.median_window) for r in records]
    out = Path(args.out) if args.out else _dataset_paths(args.data)[2]
    save_preprocessed(out, preprocessed)
    _write_manifest(out / "manifest.json", "preprocess", args, cfg,
                    inputs=[_dataset_paths(args.data)[0]], outputs=[out])
    print(f"preprocessed {len(preprocessed)} images into {out}")
    return 0


def _train_common(args, stage):
    import numpy as np
    from .network import build_basic_spec, build_final_spec, save_checkpoint
    from .patches import SamplePlan
    from .training import TrainConfig, save_report, train

    cfg = _load_config(args)
    preprocessed = _require_preprocessed(args.data)
    annotations = _require_annotations(args.data, preprocessed)
    prob_maps = _load_maps_dir(args.prob_maps) if stage == "final" else None
    spec = build_basic_spec() if stage == "basic" else build_final_spec()
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        plan=SamplePlan(cfg.epoch_size, cfg.ma_fraction, cfg.stage2_threshold),
        learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        batch_size=cfg.batch_size, seed=cfg.seed)
    dtype = np.float64 if cfg.precision == 64 else np.float32
    ckpt, report = train(spec, preprocessed, annotations, train_cfg, stage,
                         prob_maps=prob_maps, checkpoint_path=args.out,
                         dtype=dtype)
    save_checkpoint(args.out, ckpt)
    report_path = args.report or f"{args.out}.report.csv"
    save_report(report_path, report)
    inputs = [_dataset_paths(args.data)[2]]
    if stage == "final":
        inputs.append(args.prob_maps)
    _write_manifest(f"{args.out}.manifest.json", f"train-{stage}", args, cfg,
                    inputs=inputs, outputs=[args.out, report_path])
    print(f"trained {stage} network: {cfg.epochs} epochs, "
          f"final loss {report.losses[-1]:.4f}, "
          f"accuracy {report.accuracies[-1]:.3f} -> {args.out}")
    return 0


def cmd_train_basic(args):
    return _train_common(args, "basic")


def cmd_train_final(args):
    return _train_common(args, "final")


def _infer_common(args, stage):
    import numpy as np
    from .infer import export_pgm, infer_maps, save_pmap
    from .network import build_basic_spec, build_final_spec

    cfg = _load_config(args)
    spec = build_basic_spec() if stage == "basic" else build_final_spec()
    ckpt = _require_checkpoint(args.ckpt, spec)
    preprocessed = _require_preprocessed(args.data)
    stride = args.stride if args.stride is not None else \
        (cfg.stage1_stride if stage == "basic" else cfg.stride)
    dtype = np.float64 if cfg.precision == 64 else np.float32
    maps = infer_maps(spec, ckpt, preprocessed, stride=stride,
                      threads=cfg.threads, dtype=dtype)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for image_id in sorted(maps):
        path = out / f"{image_id}.pmap"
        save_pmap(path, maps[image_id])
        outputs.append(path)
        if args.pgm:
            export_pgm(out / f"{image_id}.pgm", maps[image_id])
    _write_manifest(out / "manifest.json", f"infer-{stage}", args, cfg,
                    inputs=[args.ckpt, _dataset_paths(args.data)[2]],
                    outputs=outputs)
    print(f"scored {len(maps)} images at stride {stride} -> {out}")
    return 0


def cmd_infer_basic(args):
    return _infer_common(args, "basic")


def cmd_infer(args):
    return _infer_common(args, "final")


def cmd_postprocess(args):
    from .postproc import disk_smooth, extract_candidates, save_candidates
    cfg = _load_config(args)
    maps = _load_maps_dir(args.maps)
    candidates = []
    for image_id in sorted(maps):
        smoothed = disk_smooth(maps[image_id], cfg.smooth_radius)
        candidates.extend(extract_candidates(smoothed, cfg.smooth_radius,
                                             cfg.score_floor))
    save_candidates(args.out, candidates)
    _write_manifest(f"{args.out}.manifest.json", "postprocess", args, cfg,
                    inputs=[args.maps], outputs=[args.out])
    print(f"extracted {len(candidates)} candidates from {len(maps)} maps "
          f"-> {args.out}")
    return 0


def _group_candidates(candidates):
    grouped = {}
    for cand in candidates:
        grouped.setdefault(cand.image_id, []).append(cand)
    return grouped


def cmd_evaluate(args):
    from .data import load_annotations
    from .evaluate import cpm, froc, save_froc_csv, save_operating_points_csv, \
        sensitivity_at
    from .postproc import load_candidates
    cfg = _load_config(args)
    candidates = _group_candidates(load_candidates(args.candidates))
    annotations = load_annotations(args.annotations)
    truths = {a.image_id: a.centroids for a in annotations}
    for image_id in candidates:
        truths.setdefault(image_id, [])
    curve = froc(candidates, truths, cfg.match_radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_froc_csv(out / "froc.csv", curve)
    save_operating_points_csv(out / "operating_points.csv", curve)
    _write_manifest(out / "manifest.json", "evaluate", args, cfg,
                    inputs=[args.candidates, args.annotations],
                    outputs=[out / "froc.csv", out / "operating_points.csv"])
    print(f"cpm {cpm(curve):.4f}, sensitivity {sensitivity_at(curve, 8.0):.3f} "
          f"at 8 FP/image -> {out}")
    return 0


def cmd_froc_report(args):
    from .data import load_annotations
    from .evaluate import CPM_OPERATING_POINTS, cpm, froc, sensitivity_at, \
        save_operating_points_csv
    from .postproc import load_candidates
    from .reference import load_reference_tables
    cfg = _load_config(args)
    candidates = _group_candidates(load_candidates(args.candidates))
    annotations = load_annotations(args.annotations)
    truths = {a.image_id: a.centroids for a in annotations}
    for image_id in candidates:
        truths.setdefault(image_id, [])
    curve = froc(candidates, truths, cfg.match_radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_operating_points_csv(out / "operating_points.csv", curve)

    rows = [["method"] + [f"fp_{q:g}" for q in CPM_OPERATING_POINTS] + ["cpm"]]
    measured = ["this-run"] + [f"{sensitivity_at(curve, q):.3f}"
                               for q in CPM_OPERATING_POINTS] + [f"{cpm(curve):.3f}"]
    rows.append(measured)
    for table in load_reference_tables():
        if table.dataset != args.dataset:
            continue
        rows.append([table.method]
                    + ["" if s is None else f"{s:.2f}" for s in table.sensitivities]
                    + [f"{table.cpm:.2f}"])
    import csv as _csv
    with open(out / "reference_comparison.csv", "w", newline="") as handle:
        _csv.writer(handle).writerows(rows)
    _write_manifest(out / "manifest.json", "froc-report", args, cfg,
                    inputs=[args.candidates, args.annotations],
                    outputs=[out / "operating_points.csv",
                             out / "reference_comparison.csv"])
    print(f"report with {len(rows) - 2} reference rows -> {out}")
    return 0


def cmd_pipeline(args):
    from .evaluate import cross_validate, save_froc_csv, \
        save_operating_points_csv, sensitivity_at
    from .infer import save_pmap
    from .network import save_checkpoint
    from .postproc import save_candidates

    cfg = _load_config(args)
    records, annotations = _load_dataset(args.data, cfg.fov_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(message):
        if not args.quiet:
            print(message, flush=True)

    report = cross_validate(records, annotations, cfg, progress=progress)

    candidates = []
    for image_id in sorted(report.candidates):
        candidates.extend(report.candidates[image_id])
    save_candidates(out / "candidates.csv", candidates)
    save_froc_csv(out / "froc.csv", report.pooled_curve)
    save_operating_points_csv(out / "operating_points.csv", report.pooled_curve)

    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    fold_rows = [["fold", "cpm", "test_images"]]
    for fold in report.folds:
        for image_id in fold.test_ids:
            save_pmap(maps_dir / f"{image_id}.pmap", fold.maps[image_id])
        save_checkpoint(ckpt_dir / f"fold{fold.fold}_basic.ckpt",
                        fold.basic_checkpoint)
        save_checkpoint(ckpt_dir / f"fold{fold.fold}_final.ckpt",
                        fold.final_checkpoint)
        fold_rows.append([fold.fold, f"{fold.cpm:.6f}", " ".join(fold.test_ids)])
    import csv as _csv
    with open(out / "folds.csv", "w", newline="") as handle:
        _csv.writer(handle).writerows(fold_rows)

    _write_manifest(out / "manifest.json", "pipeline", args, cfg,
                    inputs=[_dataset_paths(args.data)[0],
                            _dataset_paths(args.data)[1]],
                    outputs=[out / "candidates.csv", out / "froc.csv",
                             out / "operating_points.csv", out / "folds.csv"])
    sens8 = sensitivity_at(report.pooled_curve, 8.0)
    print(f"pipeline done: pooled cpm {report.pooled_cpm:.4f}, "
          f"sensitivity {sens8:.3f} at 8 FP/image -> {out}")
    return 0


# -------------------------------------------------------------------- main

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="madet",
        description="Two-stage CNN microaneurysm detection pipeline")
    parser.add_argument("--version", action="version",
                        version=f"madet {__version__} ({FORMAT_VERSIONS})")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", type=int, default=20)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--n-ma-min", type=int, default=8)
    p.add_argument("--n-ma-max", type=int, default=15)
    p.add_argument("--contrast-min", type=float, default=0.18)
    p.add_argument("--contrast-max", type=float, default=0.38)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="median background removal")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="default: <data>/pre")
    p.set_defaults(func=cmd_preprocess)

    for name, func in (("train-basic", cmd_train_basic),
                       ("train-final", cmd_train_final)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} network")
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint path")
        p.add_argument("--seed", type=int)
        p.add_argument("--report", help="training report CSV path")
        if name == "train-final":
            p.add_argument("--prob-maps", required=True,
                           help="stage-1 probability map directory")
        p.set_defaults(func=func)

    for name, func in (("infer-basic", cmd_infer_basic), ("infer", cmd_infer)):
        p = sub.add_parser(name, help=f"probability maps from the "
                           f"{'basic' if 'basic' in name else 'final'} network")
        p.add_argument("--config")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--stride", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--pgm", action="store_true", help="also export PGM previews")
        p.set_defaults(func=func)

    p = sub.add_parser("postprocess", help="smooth maps and extract candidates")
    p.add_argument("--config")
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True, help="candidate CSV path")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="FROC curve and operating points")
    p.add_argument("--config")
    p.add_argument("--candidates", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("froc-report", help="operating points next to "
                       "published reference rows")
    p.add_argument("--config")
    p.add_argument("--candidates", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dataset", choices=("roc", "e-ophtha"), default="roc")
    p.set_defaults(func=cmd_froc_report)

    p = sub.add_parser("pipeline", help="cross-validated end-to-end run")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    for var in _BLAS_ENV:
        os.environ.setdefault(var, "1")
    parser = _build_parser()
    args = parser.parse_args(argv)
    from . import errors
    try:
        return args.func(args)
    except errors.MadetError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_CODES.get(type(exc).__name__, 1)
    except FileNotFoundError as exc:
        print(f"error (FileNotFound): {exc}", file=sys.stderr)
        return EXIT_CODES["DataError"]


if __name__ == "__main__":
    sys.exit(main())
