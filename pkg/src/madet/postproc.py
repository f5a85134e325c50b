"""Probability-map post-processing: disk smoothing followed by local-maxima
extraction turns a noisy per-pixel score raster into discrete candidates."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ParseError, ValidationError
from .infer import ProbabilityMap

SMOOTH_RADIUS = 5
SCORE_FLOOR = 1e-3

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class Candidate:
    image_id: str
    position: tuple  # (x, y)
    score: float


def disk_footprint(radius):
    """Boolean lattice disk: offsets (i, j) with i^2 + j^2 <= radius^2."""
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    span = np.arange(-radius, radius + 1)
    ii, jj = np.meshgrid(span, span, indexing="ij")
    return ii ** 2 + jj ** 2 <= radius ** 2


def disk_smooth(pmap, radius=SMOOTH_RADIUS):
    """Convolve with the normalized flat disk, renormalizing over the
    in-mask support so border smoothing conserves a constant map."""
    disk = disk_footprint(radius).astype(np.float64)
    masked = np.where(pmap.valid_mask, pmap.scores, 0.0)
    numerator = ndimage.correlate(masked, disk, mode="constant", cval=0.0)
    support = ndimage.correlate(pmap.valid_mask.astype(np.float64), disk,
                                mode="constant", cval=0.0)
    smoothed = np.zeros_like(pmap.scores)
    inside = pmap.valid_mask & (support > 0)
    smoothed[inside] = numerator[inside] / support[inside]
    return ProbabilityMap(pmap.image_id, smoothed, pmap.stride,
                          pmap.valid_mask.copy())


def extract_candidates(pmap, radius=SMOOTH_RADIUS, floor=SCORE_FLOOR):
    """Local maxima of a smoothed map.

    A pixel qualifies when its value is >= every value within Euclidean
    distance `radius` and exceeds `floor`.  Plateaus (8-connected runs of
    equal qualifying pixels) collapse to their rounded centroid, and a final
    greedy pass guarantees every two candidates are more than `radius`
    apart.  Result is sorted by descending score, ties by (y, x).
    """
    footprint = disk_footprint(radius)
    local_max = ndimage.maximum_filter(pmap.scores, footprint=footprint,
                                       mode="constant", cval=-1.0)
    peaks = pmap.valid_mask & (pmap.scores == local_max) & (pmap.scores > floor)
    if not peaks.any():
        return []

    labels, count = ndimage.label(peaks, structure=EIGHT_CONNECTED)
    raw = []
    for index, (cy, cx) in enumerate(
            ndimage.center_of_mass(peaks, labels, range(1, count + 1)), start=1):
        x, y = int(np.rint(cx)), int(np.rint(cy))
        if not peaks[y, x]:
            # Concave plateau: snap to the nearest pixel of the component.
            ys, xs = np.nonzero(labels == index)
            nearest = np.argmin((xs - cx) ** 2 + (ys - cy) ** 2)
            x, y = int(xs[nearest]), int(ys[nearest])
        raw.append(Candidate(pmap.image_id, (x, y), float(pmap.scores[y, x])))

    raw.sort(key=lambda c: (-c.score, c.position[1], c.position[0]))
    kept = []
    limit = radius ** 2
    for cand in raw:
        x, y = cand.position
        if all((x - k.position[0]) ** 2 + (y - k.position[1]) ** 2 > limit
               for k in kept):
            kept.append(cand)
    return kept


def save_candidates(path, candidates):
    """Candidate CSV: image_id,x,y,score with six-decimal scores."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["image_id", "x", "y", "score"])
        for cand in candidates:
            writer.writerow([cand.image_id, cand.position[0], cand.position[1],
                             f"{cand.score:.6f}"])


def load_candidates(path):
    candidates = []
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["image_id", "x", "y", "score"]:
            raise ParseError(f"bad candidate header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            try:
                image_id, x, y, score = row
                cand = Candidate(image_id, (int(x), int(y)), float(score))
            except ValueError:
                raise ParseError(f"malformed candidate row {row!r}", line=lineno)
            candidates.append(cand)
    return candidates
