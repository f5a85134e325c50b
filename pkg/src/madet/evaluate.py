"""Detection evaluation: candidate/ground-truth matching, sensitivity, FROC
curves, operating-point readout, CPM, and cross-validated end-to-end runs."""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import infer, network, postproc, preprocess, training
from .errors import ConfigError, UndefinedMetricError, ValidationError
from .patches import SamplePlan

MATCH_RADIUS = 5
CPM_OPERATING_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class MatchStats:
    tp: int
    fp: int
    fn: int
    tn: int = 0  # pixel-level complement; reported, unused by FROC


@dataclass
class FrocCurve:
    thresholds: list                 # descending candidate-score thresholds
    points: list                     # (avg_fp_per_image, sensitivity), fp asc


def canonical_order(candidates):
    """Deterministic processing order: score descending, ties by (y, x)."""
    return sorted(candidates,
                  key=lambda c: (-c.score, c.position[1], c.position[0]))


def match(candidates, centroids, radius=MATCH_RADIUS, n_scored_pixels=None):
    """Greedy one-to-one matching in score order.

    A candidate is a true positive if some unmatched centroid lies within
    `radius` (the nearest one is consumed), otherwise a false positive;
    leftover centroids are false negatives.  Returns (MatchStats, labeled)
    where labeled pairs each candidate (in canonical order) with its TP flag.
    """
    ordered = canonical_order(candidates)
    remaining = sorted(centroids, key=lambda p: (p[1], p[0]))
    taken = [False] * len(remaining)
    labeled = []
    tp = fp = 0
    limit = radius * radius
    for cand in ordered:
        x, y = cand.position
        best = None
        best_d2 = limit + 1
        for j, (gx, gy) in enumerate(remaining):
            if taken[j]:
                continue
            d2 = (x - gx) ** 2 + (y - gy) ** 2
            if d2 <= limit and d2 < best_d2:
                best, best_d2 = j, d2
        if best is None:
            fp += 1
            labeled.append((cand, False))
        else:
            taken[best] = True
            tp += 1
            labeled.append((cand, True))
    fn = taken.count(False)
    tn = 0
    if n_scored_pixels is not None:
        tn = max(0, int(n_scored_pixels) - tp - fp - fn)
    return MatchStats(tp, fp, fn, tn), labeled


def sensitivity(stats):
    """Lesion-level recall: tp / (tp + fn)."""
    if stats.tp + stats.fn == 0:
        raise UndefinedMetricError("sensitivity undefined without ground truth")
    return stats.tp / (stats.tp + stats.fn)


def _normalize_truths(truths):
    normalized = {}
    for image_id, value in truths.items():
        normalized[image_id] = list(getattr(value, "centroids", value))
    return normalized


def froc(candidates_by_image, truths, radius=MATCH_RADIUS):
    """Sweep thresholds over the distinct candidate scores (descending);
    at each one keep candidates scoring >= threshold, match per image, and
    aggregate counts over all images."""
    truths = _normalize_truths(truths)
    if not truths:
        raise ValidationError("froc needs at least one evaluated image")
    unknown = set(candidates_by_image) - set(truths)
    if unknown:
        raise ValidationError(f"candidates reference unevaluated images: "
                              f"{sorted(unknown)}")
    total_truth = sum(len(c) for c in truths.values())
    if total_truth == 0:
        raise UndefinedMetricError("froc undefined: no ground-truth lesions")
    n_images = len(truths)

    scores = sorted({c.score for cands in candidates_by_image.values()
                     for c in cands}, reverse=True)
    if not scores:
        return FrocCurve([float("inf")], [(0.0, 0.0)])

    thresholds = []
    points = []
    for theta in scores:
        tp = fp = 0
        for image_id, centroids in truths.items():
            kept = [c for c in candidates_by_image.get(image_id, [])
                    if c.score >= theta]
            stats, _ = match(kept, centroids, radius)
            tp += stats.tp
            fp += stats.fp
        thresholds.append(theta)
        points.append((fp / n_images, tp / total_truth))
    return FrocCurve(thresholds, points)


def sensitivity_at(curve, fp_per_image):
    """Linear interpolation on the curve; clamps to 0 below the first point
    and to the last sensitivity above the last point."""
    if not curve.points:
        raise ValidationError("empty FROC curve")
    below = None
    above = None
    for f, s in curve.points:  # fp ascending, sensitivity ascending
        if f <= fp_per_image:
            below = (f, s)
        elif above is None:
            above = (f, s)
            break
    if below is None:
        return 0.0
    if above is None:
        return below[1]
    f1, s1 = below
    f2, s2 = above
    return s1 + (fp_per_image - f1) * (s2 - s1) / (f2 - f1)


def cpm(curve):
    """Competition performance measure: mean sensitivity at the seven
    operating points 1/8 .. 8 FP/image."""
    return float(np.mean([sensitivity_at(curve, q) for q in CPM_OPERATING_POINTS]))


# ---------------------------------------------------------------- reports

def save_froc_csv(path, curve):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["threshold", "avg_fp_per_image", "sensitivity"])
        for theta, (avg_fp, sens) in zip(curve.thresholds, curve.points):
            writer.writerow([f"{theta:.6f}" if np.isfinite(theta) else "inf",
                             f"{avg_fp:.6f}", f"{sens:.6f}"])


def save_operating_points_csv(path, curve):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["fp_per_img", "sensitivity"])
        for q in CPM_OPERATING_POINTS:
            writer.writerow([f"{q:g}", f"{sensitivity_at(curve, q):.6f}"])
        writer.writerow(["cpm", f"{cpm(curve):.6f}"])


# ---------------------------------------------------------- cross-validation

@dataclass
class FoldResult:
    fold: int
    test_ids: list
    curve: FrocCurve
    cpm: float
    candidates: dict          # image_id -> [Candidate] (held-out images)
    maps: dict                # image_id -> smoothed ProbabilityMap
    basic_checkpoint: object = None
    final_checkpoint: object = None


@dataclass
class CrossValReport:
    folds: list
    pooled_curve: FrocCurve
    pooled_cpm: float
    candidates: dict = field(default_factory=dict)


def partition_folds(image_ids, folds, seed):
    """Deterministic seeded split into `folds` near-equal groups."""
    ids = sorted(image_ids)
    if len(ids) < folds:
        raise ConfigError(f"cannot make {folds} folds from {len(ids)} images")
    rng = np.random.default_rng([int(seed), 0xF01D])
    order = rng.permutation(len(ids))
    groups = [[] for _ in range(folds)]
    for position, index in enumerate(order):
        groups[position % folds].append(ids[index])
    return [sorted(group) for group in groups]


def cross_validate(records, annotations, cfg, progress=None):
    """Rotate train/test over seeded folds, running the full two-stage
    pipeline per fold and evaluating on the held-out images.

    cfg carries the run settings (see config.RunConfig).  Returns a
    CrossValReport with per-fold and pooled curves.
    """
    ann_by_id = {a.image_id: a for a in annotations}
    groups = partition_folds([r.image_id for r in records], cfg.folds, cfg.seed)

    def note(message):
        if progress is not None:
            progress(message)

    note(f"preprocessing {len(records)} images")
    pre_by_id = {r.image_id: preprocess.preprocess_record(r, cfg.median_window)
                 for r in records}

    basic_spec = network.build_basic_spec()
    final_spec = network.build_final_spec()
    dtype = np.float64 if cfg.precision == 64 else np.float32

    fold_results = []
    all_candidates = {}
    for fold_index, test_ids in enumerate(groups):
        train_ids = sorted(set(pre_by_id) - set(test_ids))
        train_images = [pre_by_id[i] for i in train_ids]
        train_annots = [ann_by_id[i] for i in train_ids if i in ann_by_id]
        test_images = [pre_by_id[i] for i in test_ids]

        note(f"fold {fold_index}: training basic network on {len(train_ids)} images")
        basic_cfg = training.TrainConfig(
            epochs=cfg.epochs, plan=SamplePlan(cfg.epoch_size,
                                               stage2_threshold=cfg.stage2_threshold),
            learning_rate=cfg.learning_rate, momentum=cfg.momentum,
            batch_size=cfg.batch_size,
            seed=training._derive_seed(cfg.seed, fold_index, 10))
        basic_ckpt, _ = training.train(basic_spec, train_images, train_annots,
                                       basic_cfg, "basic", dtype=dtype)

        note(f"fold {fold_index}: stage-1 maps for hard-negative mining")
        stage1_maps = infer.infer_maps(basic_spec, basic_ckpt, train_images,
                                       stride=cfg.stage1_stride,
                                       threads=cfg.threads, dtype=dtype)

        note(f"fold {fold_index}: training final network")
        final_cfg = training.TrainConfig(
            epochs=cfg.epochs, plan=SamplePlan(cfg.epoch_size,
                                               stage2_threshold=cfg.stage2_threshold),
            learning_rate=cfg.learning_rate, momentum=cfg.momentum,
            batch_size=cfg.batch_size,
            seed=training._derive_seed(cfg.seed, fold_index, 11))
        final_ckpt, _ = training.train(final_spec, train_images, train_annots,
                                       final_cfg, "final", prob_maps=stage1_maps,
                                       dtype=dtype)

        note(f"fold {fold_index}: scoring {len(test_ids)} held-out images")
        test_maps = infer.infer_maps(final_spec, final_ckpt, test_images,
                                     stride=cfg.stride, threads=cfg.threads,
                                     dtype=dtype)

        fold_candidates = {}
        smoothed_maps = {}
        for image_id in test_ids:
            smoothed = postproc.disk_smooth(test_maps[image_id], cfg.smooth_radius)
            smoothed_maps[image_id] = smoothed
            fold_candidates[image_id] = postproc.extract_candidates(
                smoothed, cfg.smooth_radius, cfg.score_floor)

        truths = {i: ann_by_id[i].centroids if i in ann_by_id else []
                  for i in test_ids}
        curve = froc(fold_candidates, truths, cfg.match_radius)
        fold_results.append(FoldResult(fold_index, list(test_ids), curve,
                                       cpm(curve), fold_candidates, smoothed_maps,
                                       basic_ckpt, final_ckpt))
        all_candidates.update(fold_candidates)
        note(f"fold {fold_index}: cpm {fold_results[-1].cpm:.3f}")

    pooled_truths = {r.image_id: ann_by_id[r.image_id].centroids
                     if r.image_id in ann_by_id else [] for r in records}
    pooled_curve = froc(all_candidates, pooled_truths, cfg.match_radius)
    return CrossValReport(fold_results, pooled_curve, cpm(pooled_curve),
                          all_candidates)
