"""Sliding-window inference: score every eligible pixel with the network's
lesion probability by classifying the 101x101 patch centered on it.

Patches are scored one at a time through the exact same code path, so any
tiling of an image produces identical scores and repeated runs are
byte-identical.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import network
from .errors import FormatError, ValidationError
from .patches import PATCH_MARGIN
from .training import MA_CLASS

PMAP_MAGIC = "PMAP"
PMAP_VERSION = 1


@dataclass
class ProbabilityMap:
    image_id: str
    scores: np.ndarray      # (H, W) float64 in [0, 1]; 0 outside valid_mask
    stride: int
    valid_mask: np.ndarray  # (H, W) bool: pixels carrying a score


def _valid_region(image):
    h, w = image.fov_mask.shape
    box = np.zeros((h, w), bool)
    if h > 2 * PATCH_MARGIN and w > 2 * PATCH_MARGIN:
        box[PATCH_MARGIN:h - PATCH_MARGIN, PATCH_MARGIN:w - PATCH_MARGIN] = True
    return image.fov_mask & box


def infer_map(spec, checkpoint, image, stride=1, dtype=np.float64):
    """Score the image with a trained network.

    Pixels on the absolute stride grid (row % stride == 0 and
    col % stride == 0) inside the field of view and the patch margin are
    classified; with stride > 1 the remaining valid pixels copy their
    nearest scored neighbor.
    """
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if checkpoint.spec_digest != spec.digest():
        raise ValidationError("checkpoint does not belong to this network spec")
    c, ph, pw = spec.input_shape
    h, w = image.fov_mask.shape
    if image.residual.shape[0] != c or h < ph or w < pw:
        raise ValidationError(
            f"{image.image_id}: image {image.residual.shape} too small for "
            f"network input {spec.input_shape}")

    params = [[np.asarray(a, dtype=dtype) for a in group]
              for group in checkpoint.params]
    valid = _valid_region(image)
    scores = np.zeros((h, w))
    scored = np.zeros((h, w), bool)
    scored_rows = np.flatnonzero(valid.any(axis=1))
    for y in scored_rows:
        if y % stride != 0:
            continue
        for x in np.flatnonzero(valid[y]):
            if x % stride != 0:
                continue
            patch = np.ascontiguousarray(
                image.residual[:, y - PATCH_MARGIN:y + PATCH_MARGIN + 1,
                               x - PATCH_MARGIN:x + PATCH_MARGIN + 1]).astype(
                                   dtype, copy=False)
            probs, _ = network.forward(spec, params, patch, training=False)
            scores[y, x] = float(probs[MA_CLASS])
            scored[y, x] = True

    if stride > 1 and scored.any():
        # Nearest scored neighbor; the distance transform gives, for every
        # pixel, the indices of the closest True pixel in `scored`.
        _, (iy, ix) = ndimage.distance_transform_edt(~scored, return_indices=True)
        scores = np.where(valid, scores[iy, ix], 0.0)
    else:
        scores = np.where(valid, scores, 0.0)
    return ProbabilityMap(image.image_id, scores, int(stride), valid)


def _infer_one(args):
    spec, checkpoint, image, stride, dtype = args
    return infer_map(spec, checkpoint, image, stride, dtype)


def infer_maps(spec, checkpoint, images, stride=1, threads=1, dtype=np.float64):
    """Maps for several images; images are independent, so worker processes
    produce exactly the single-threaded result."""
    if threads <= 1 or len(images) <= 1:
        return {img.image_id: infer_map(spec, checkpoint, img, stride, dtype)
                for img in images}
    jobs = [(spec, checkpoint, img, stride, dtype) for img in images]
    with ProcessPoolExecutor(max_workers=min(threads, len(images))) as pool:
        results = list(pool.map(_infer_one, jobs))
    return {pmap.image_id: pmap for pmap in results}


# ------------------------------------------------------------------- files

def save_pmap(path, pmap):
    """Text container: 'PMAP 1 <width> <height> <stride>' then one row of
    scores per line (shortest exact decimal form)."""
    h, w = pmap.scores.shape
    lines = [f"{PMAP_MAGIC} {PMAP_VERSION} {w} {h} {pmap.stride}"]
    for row in pmap.scores:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pmap(path, image_id=None):
    path = Path(path)
    with open(path) as handle:
        header = handle.readline().split()
        if len(header) != 5 or header[0] != PMAP_MAGIC:
            raise FormatError(f"{path}: not a probability-map file")
        if int(header[1]) != PMAP_VERSION:
            raise FormatError(f"{path}: unsupported version {header[1]}")
        w, h, stride = int(header[2]), int(header[3]), int(header[4])
        scores = np.loadtxt(handle, dtype=np.float64, ndmin=2)
    if scores.shape != (h, w):
        raise FormatError(f"{path}: expected {h}x{w} scores, got {scores.shape}")
    if not np.isfinite(scores).all() or scores.min() < 0 or scores.max() > 1:
        raise FormatError(f"{path}: scores outside [0, 1]")
    # Valid pixels carry strictly positive softmax outputs; zeros mark the
    # unscored surround.
    return ProbabilityMap(image_id or path.stem, scores, stride, scores > 0)


def export_pgm(path, pmap):
    """16-bit binary PGM (big-endian, maxval 65535) for quick viewing."""
    h, w = pmap.scores.shape
    values = np.rint(pmap.scores * 65535.0).astype(">u2")
    with open(path, "wb") as handle:
        handle.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        handle.write(values.tobytes())


def grid_points(pmap):
    """Centers actually classified (stride grid inside the valid mask)."""
    ys, xs = np.nonzero(pmap.valid_mask)
    on_grid = (ys % pmap.stride == 0) & (xs % pmap.stride == 0)
    return list(zip(xs[on_grid].tolist(), ys[on_grid].tolist()))
