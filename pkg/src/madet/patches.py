"""Labeled 101x101 patch extraction, right-angle augmentation, and the two
sampling regimes: class-balanced (stage 1) and probability-map-driven hard
negatives (stage 2).

A patch center is labeled lesion (1) iff it lies within MA_LABEL_RADIUS
pixels of an annotated centroid; uniformly drawn negatives additionally keep
NEG_MIN_DIST pixels away from every centroid.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (DataError, ParseError, PipelineOrderError,
                     ValidationError)

PATCH_SIZE = 101
PATCH_MARGIN = 50       # center must be at least this far from every border
MA_LABEL_RADIUS = 5
NEG_MIN_DIST = 6

LABEL_NON_MA = 0
LABEL_MA = 1

AUGMENT_OPS = ("flip_h", "flip_v", "rot90", "rot180", "rot270")


@dataclass
class Patch:
    source_id: str
    center: tuple            # (x, y)
    data: np.ndarray         # (3, 101, 101)
    label: int
    augment_op: str = "none"


@dataclass
class SamplePlan:
    epoch_size: int
    ma_fraction: float = 0.5
    stage2_threshold: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.epoch_size < 1:
            raise ValidationError(f"epoch_size must be >= 1, got {self.epoch_size}")
        if not 0.0 < self.ma_fraction < 1.0:
            raise ValidationError(f"ma_fraction must be in (0,1), got {self.ma_fraction}")
        if not 0.0 <= self.stage2_threshold <= 1.0:
            raise ValidationError(
                f"stage2_threshold must be in [0,1], got {self.stage2_threshold}")


def valid_center(image_shape, center):
    """True if a full patch around (x, y) stays inside the image."""
    h, w = image_shape
    x, y = center
    return (PATCH_MARGIN <= x < w - PATCH_MARGIN
            and PATCH_MARGIN <= y < h - PATCH_MARGIN)


def label_for(center, centroids):
    x, y = center
    for cx, cy in centroids:
        if (x - cx) ** 2 + (y - cy) ** 2 <= MA_LABEL_RADIUS ** 2:
            return LABEL_MA
    return LABEL_NON_MA


def extract_patch(image, center, centroids):
    """Cut the 101x101 window centered on (x, y) out of a preprocessed image
    and label it from the ground-truth centroids."""
    x, y = center
    h, w = image.residual.shape[1:]
    if not valid_center((h, w), center):
        raise ValidationError(
            f"{image.image_id}: patch center ({x},{y}) closer than "
            f"{PATCH_MARGIN}px to the border of the {w}x{h} image")
    window = image.residual[:, y - PATCH_MARGIN:y + PATCH_MARGIN + 1,
                            x - PATCH_MARGIN:x + PATCH_MARGIN + 1]
    return Patch(image.image_id, (int(x), int(y)), np.ascontiguousarray(window),
                 label_for(center, centroids))


def augment(patch, op):
    """Apply an exact right-angle transform; label and center are metadata
    of the source location and are preserved."""
    if op == "flip_h":
        transformed = patch.data[:, :, ::-1]
    elif op == "flip_v":
        transformed = patch.data[:, ::-1, :]
    elif op == "rot90":
        transformed = np.rot90(patch.data, 1, axes=(1, 2))
    elif op == "rot180":
        transformed = np.rot90(patch.data, 2, axes=(1, 2))
    elif op == "rot270":
        transformed = np.rot90(patch.data, 3, axes=(1, 2))
    else:
        raise ValidationError(f"unknown augment op {op!r}")
    return Patch(patch.source_id, patch.center, np.ascontiguousarray(transformed),
                 patch.label, op)


def _centroids_by_image(images, annotations):
    by_id = {a.image_id: sorted(a.centroids, key=lambda p: (p[1], p[0]))
             for a in annotations}
    return [by_id.get(img.image_id, []) for img in images]


def _lesion_distance_sq(shape, centroids):
    """Raster of squared distance to the nearest centroid (inf if none)."""
    h, w = shape
    if not centroids:
        return np.full((h, w), np.inf)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = np.full((h, w), np.inf)
    for cx, cy in centroids:
        np.minimum(d2, (xx - cx) ** 2 + (yy - cy) ** 2, out=d2)
    return d2


def _margin_box(shape):
    h, w = shape
    box = np.zeros((h, w), bool)
    if h > 2 * PATCH_MARGIN and w > 2 * PATCH_MARGIN:
        box[PATCH_MARGIN:h - PATCH_MARGIN, PATCH_MARGIN:w - PATCH_MARGIN] = True
    return box


def _uniform_negative_pools(images, centroids_per_image):
    """Per-image (y, x) coordinate arrays of pixels eligible as uniformly
    drawn negatives: in FOV, full margin, >= NEG_MIN_DIST from centroids."""
    pools = []
    for image, centroids in zip(images, centroids_per_image):
        shape = image.residual.shape[1:]
        mask = image.fov_mask & _margin_box(shape)
        mask &= _lesion_distance_sq(shape, centroids) >= NEG_MIN_DIST ** 2
        pools.append(np.argwhere(mask))
    return pools


def _draw_from_pools(rng, pools, count):
    """Draw `count` (image_index, x, y) triples uniformly over the union of
    per-image coordinate pools, with replacement."""
    sizes = np.array([len(p) for p in pools])
    total = int(sizes.sum())
    if total == 0:
        raise DataError("no eligible pixels to sample negatives from")
    cumulative = np.cumsum(sizes)
    draws = []
    for _ in range(count):
        flat = int(rng.integers(total))
        img_idx = int(np.searchsorted(cumulative, flat, side="right"))
        y, x = pools[img_idx][flat - (cumulative[img_idx] - sizes[img_idx])]
        draws.append((img_idx, int(x), int(y)))
    return draws


def _positive_pool(images, centroids_per_image):
    pool = []
    for idx, (image, centroids) in enumerate(zip(images, centroids_per_image)):
        shape = image.residual.shape[1:]
        for center in centroids:
            if valid_center(shape, center):
                pool.append((idx, center))
    return pool


def _draw_positives(rng, pool, n_ma):
    """All distinct lesion centers first (shuffled); once the pool is
    exhausted, duplicates carry a random augmentation op."""
    order = rng.permutation(len(pool))
    draws = []
    for i in range(min(n_ma, len(pool))):
        idx, center = pool[order[i]]
        draws.append((idx, center, None))
    while len(draws) < n_ma:
        idx, center = pool[int(rng.integers(len(pool)))]
        op = AUGMENT_OPS[int(rng.integers(len(AUGMENT_OPS)))]
        draws.append((idx, center, op))
    return draws


def _materialize(images, centroids_per_image, positive_draws, negative_draws):
    out = []
    for idx, center, op in positive_draws:
        patch = extract_patch(images[idx], center, centroids_per_image[idx])
        if op is not None:
            patch = augment(patch, op)
        out.append(patch)
    for idx, x, y in negative_draws:
        out.append(extract_patch(images[idx], (x, y), centroids_per_image[idx]))
    return out


def sample_balanced(images, annotations, plan):
    """Stage-1 epoch: round(epoch_size * ma_fraction) lesion patches and the
    rest uniform negatives; deterministic for a fixed plan.rng_seed."""
    rng = np.random.default_rng(plan.rng_seed)
    centroids_per_image = _centroids_by_image(images, annotations)
    pool = _positive_pool(images, centroids_per_image)
    if not pool:
        raise DataError("no annotated lesion lies far enough from the image "
                        "borders to cut a full patch")
    n_ma = int(round(plan.epoch_size * plan.ma_fraction))
    positives = _draw_positives(rng, pool, n_ma)
    negatives = _draw_from_pools(rng, _uniform_negative_pools(images, centroids_per_image),
                                 plan.epoch_size - n_ma)
    return _materialize(images, centroids_per_image, positives, negatives)


def sample_stage2(images, annotations, prob_maps, plan):
    """Stage-2 epoch: same positives as stage 1; negatives are hard examples
    drawn from scored pixels with probability >= plan.stage2_threshold that
    are labeled non-MA and have full patch margin.  Falls back to uniform
    negative sampling for any shortfall."""
    if not prob_maps:
        raise PipelineOrderError("stage-2 sampling needs stage-1 probability "
                                 "maps; run basic-CNN inference first")
    missing = [img.image_id for img in images if img.image_id not in prob_maps]
    if missing:
        raise PipelineOrderError(f"no probability map for images: {missing}")

    rng = np.random.default_rng(plan.rng_seed)
    centroids_per_image = _centroids_by_image(images, annotations)
    pool = _positive_pool(images, centroids_per_image)
    if not pool:
        raise DataError("no annotated lesion lies far enough from the image "
                        "borders to cut a full patch")
    n_ma = int(round(plan.epoch_size * plan.ma_fraction))
    positives = _draw_positives(rng, pool, n_ma)
    n_neg = plan.epoch_size - n_ma

    hard_pools = []
    for image, centroids in zip(images, centroids_per_image):
        pmap = prob_maps[image.image_id]
        shape = image.residual.shape[1:]
        mask = (pmap.scores >= plan.stage2_threshold) & pmap.valid_mask
        mask &= _margin_box(shape)
        mask &= _lesion_distance_sq(shape, centroids) > MA_LABEL_RADIUS ** 2
        hard_pools.append(np.argwhere(mask))

    n_hard_available = sum(len(p) for p in hard_pools)
    if n_hard_available >= n_neg:
        negatives = _draw_from_pools(rng, hard_pools, n_neg)
    else:
        # Take every hard example once, then fill uniformly.
        negatives = [(idx, int(x), int(y))
                     for idx, coords in enumerate(hard_pools)
                     for y, x in coords]
        shortfall = n_neg - len(negatives)
        if shortfall > 0:
            negatives += _draw_from_pools(
                rng, _uniform_negative_pools(images, centroids_per_image), shortfall)
    return _materialize(images, centroids_per_image, positives, negatives)


# ---------------------------------------------------------------------------
# Optional on-disk patch plan: locations and op tags only; pixel data is
# always re-derived from the images so the cache cannot go stale.

def save_patch_plan(path, patches):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["source_id", "x", "y", "label", "augment"])
        for patch in patches:
            writer.writerow([patch.source_id, patch.center[0], patch.center[1],
                             patch.label, patch.augment_op])


def load_patch_plan(path, images, annotations):
    by_id = {img.image_id: img for img in images}
    centroids_per_image = {a.image_id: a.centroids for a in annotations}
    out = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["source_id", "x", "y", "label", "augment"]:
            raise ParseError(f"bad patch plan header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                source_id, x, y, label, op = row
                x, y, label = int(x), int(y), int(label)
            except ValueError:
                raise ParseError(f"malformed patch plan row {row!r}", line=lineno)
            if source_id not in by_id:
                raise ValidationError(f"line {lineno}: unknown image {source_id!r}")
            patch = extract_patch(by_id[source_id], (x, y),
                                  centroids_per_image.get(source_id, []))
            if op != "none":
                patch = augment(patch, op)
            if patch.label != label:
                raise ValidationError(
                    f"line {lineno}: cached label {label} does not match "
                    f"ground truth {patch.label} (stale annotations?)")
            out.append(patch)
    return out
