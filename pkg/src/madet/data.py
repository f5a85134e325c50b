"""Fundus image and annotation ingestion, field-of-view masking, and the
deterministic synthetic dataset generator used for desk-scale runs.

Coordinate convention everywhere: x = column, y = row, origin top-left.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import FormatError, GenerationError, ParseError, ValidationError

FOV_THRESHOLD = 0.03
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

# Placement constraints for generated lesions: keep them mutually separated
# and far enough from the border that a full 101x101 patch fits around them.
MIN_LESION_SPACING = 15
LESION_BORDER_MARGIN = 55


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray    # (3, H, W) float64 in [0, 1], channels R,G,B
    fov_mask: np.ndarray  # (H, W) bool, True inside the retinal disc


@dataclass
class AnnotationSet:
    image_id: str
    centroids: list  # [(x, y)] integer pixel coordinates

    def validate_against(self, record):
        """Check the bounds/mask/uniqueness invariants for one image."""
        h, w = record.fov_mask.shape
        seen = set()
        for x, y in self.centroids:
            if not (0 <= x < w and 0 <= y < h):
                raise ValidationError(
                    f"{self.image_id}: centroid ({x},{y}) outside {w}x{h} image")
            if not record.fov_mask[y, x]:
                raise ValidationError(
                    f"{self.image_id}: centroid ({x},{y}) outside field of view")
            if (x, y) in seen:
                raise ValidationError(
                    f"{self.image_id}: duplicate centroid ({x},{y})")
            seen.add((x, y))


def load_image(path, fov_threshold=FOV_THRESHOLD):
    """Read an 8-bit RGB PNG/JPEG into an ImageRecord with values in [0,1]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.float64) / 255.0   # (H, W, 3)
    pixels = arr.transpose(2, 0, 1).copy()
    return ImageRecord(path.stem, pixels, compute_fov_mask(pixels, fov_threshold))


def save_image(path, record):
    """Write an ImageRecord as 8-bit RGB PNG (lossless round trip)."""
    arr = np.rint(np.clip(record.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_annotations(path, records=None):
    """Parse the centroid CSV (header image_id,x,y) into AnnotationSets.

    Output is independent of row order: sets are sorted by image_id and
    centroids by (y, x).  If `records` (mapping image_id -> ImageRecord) is
    given, bounds and field-of-view membership are validated too.
    """
    groups = {}
    seen = set()
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty annotation file", line=1)
        if [h.strip() for h in header] != ["image_id", "x", "y"]:
            raise ParseError(f"expected header image_id,x,y, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            image_id = row[0].strip()
            try:
                x, y = int(row[1]), int(row[2])
            except ValueError:
                raise ParseError(f"non-integer coordinate in {row[1:]!r}", line=lineno)
            if x < 0 or y < 0:
                raise ValidationError(f"line {lineno}: negative coordinate ({x},{y})")
            if (image_id, x, y) in seen:
                raise ValidationError(
                    f"line {lineno}: duplicate centroid ({image_id},{x},{y})")
            seen.add((image_id, x, y))
            groups.setdefault(image_id, []).append((x, y))

    sets = [AnnotationSet(image_id, sorted(pts, key=lambda p: (p[1], p[0])))
            for image_id, pts in sorted(groups.items())]
    if records is not None:
        for annots in sets:
            if annots.image_id not in records:
                raise ValidationError(f"annotations reference unknown image "
                                      f"{annots.image_id!r}")
            annots.validate_against(records[annots.image_id])
    return sets


def save_annotations(path, annotation_sets):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["image_id", "x", "y"])
        for annots in annotation_sets:
            for x, y in annots.centroids:
                writer.writerow([annots.image_id, x, y])


def mask_to_centroids(mask):
    """One (x, y) centroid per 8-connected component, at the rounded
    pixel-mean position."""
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    centroids = []
    for center in ndimage.center_of_mass(mask, labels, range(1, count + 1)):
        y, x = center
        centroids.append((int(np.rint(x)), int(np.rint(y))))
    return centroids


def compute_fov_mask(pixels, threshold=FOV_THRESHOLD):
    """Field-of-view estimate: smoothed green channel above threshold, then
    keep the largest 8-connected component and fill its holes."""
    green = pixels[1]
    smoothed = ndimage.uniform_filter(green, size=5, mode="reflect")
    raw = smoothed > threshold
    if not raw.any():
        return np.zeros_like(raw)
    labels, count = ndimage.label(raw, structure=EIGHT_CONNECTED)
    sizes = ndimage.sum_labels(raw, labels, range(1, count + 1))
    keep = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(keep)


def _best_candidate_points(rng, n, low, high, min_dist, reject, tries_per_point=40):
    """Mitchell best-candidate sampling of n integer points in [low, high]^2,
    pairwise at least min_dist apart and rejected by the `reject` predicate."""
    points = []
    for _ in range(n):
        best = None
        best_d = -1.0
        attempts = 0
        while attempts < tries_per_point * 20:
            batch = rng.integers(low, high + 1, size=(tries_per_point, 2))
            attempts += tries_per_point
            for x, y in batch:
                x, y = int(x), int(y)
                if reject(x, y):
                    continue
                if points:
                    d = min((x - px) ** 2 + (y - py) ** 2 for px, py in points) ** 0.5
                else:
                    d = float("inf")
                if d > best_d:
                    best, best_d = (x, y), d
            if best is not None and best_d >= min_dist:
                break
        if best is None or best_d < min_dist:
            raise GenerationError(
                f"could not place {n} lesions with spacing {min_dist} "
                f"in [{low},{high}]^2 after bounded retries")
        points.append(best)
    return points


def generate_synthetic(seed, n_images, image_size=224, n_ma_range=(8, 15),
                       contrast_range=(0.18, 0.38)):
    """Deterministic synthetic fundus dataset.

    Each image carries a bright disc field of view on a black surround, a
    smooth illumination gradient, dark curvilinear vessel strokes, and dark
    Gaussian lesion blobs (radius 2-5 px) at the returned centroids.  A fixed
    seed reproduces the dataset byte for byte.
    """
    if n_images < 1:
        raise ValidationError("n_images must be >= 1")
    if image_size < 101:
        raise ValidationError("image_size must be >= 101")
    lo, hi = n_ma_range
    if not (0 <= lo <= hi):
        raise ValidationError(f"bad n_ma_range {n_ma_range}")

    records = []
    annotations = []
    size = int(image_size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for index in range(n_images):
        rng = np.random.default_rng([int(seed), index])
        image_id = f"img{index:03d}"

        cx = size / 2 + rng.uniform(-2, 2)
        cy = size / 2 + rng.uniform(-2, 2)
        fov_radius = 0.46 * size
        dist = np.hypot(xx - cx, yy - cy)
        disc = dist <= fov_radius

        # Illumination: base level, a random linear gradient, mild vignette.
        angle = rng.uniform(0, 2 * np.pi)
        ramp = ((xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)) / size
        level = 0.66 + 0.16 * ramp - 0.10 * (dist / fov_radius) ** 2

        # Vessels: quadratic curves through the disc, rendered into a depth
        # raster so crossings do not double-darken.
        depth = np.zeros((size, size))
        n_vessels = int(rng.integers(5, 9))
        for _ in range(n_vessels):
            theta = rng.uniform(0, 2 * np.pi)
            span = rng.uniform(0.75 * np.pi, 1.25 * np.pi)
            r0 = fov_radius * rng.uniform(0.85, 0.98)
            p0 = np.array([cx + r0 * np.cos(theta), cy + r0 * np.sin(theta)])
            p2 = np.array([cx + r0 * np.cos(theta + span),
                           cy + r0 * np.sin(theta + span)])
            mid = np.array([cx, cy]) + rng.uniform(-0.3, 0.3, size=2) * fov_radius
            width = rng.uniform(1.6, 3.2)
            dark = rng.uniform(0.30, 0.50)
            t = np.linspace(0.0, 1.0, int(2.5 * fov_radius))[:, None]
            pts = ((1 - t) ** 2) * p0 + 2 * t * (1 - t) * mid + (t ** 2) * p2
            reach = int(np.ceil(3 * width))
            for px, py in pts:
                ix, iy = int(round(px)), int(round(py))
                x0, x1 = max(ix - reach, 0), min(ix + reach + 1, size)
                y0, y1 = max(iy - reach, 0), min(iy + reach + 1, size)
                if x0 >= x1 or y0 >= y1:
                    continue
                local = np.hypot(xx[y0:y1, x0:x1] - px, yy[y0:y1, x0:x1] - py)
                stamp = dark * np.exp(-0.5 * (local / width) ** 2)
                np.maximum(depth[y0:y1, x0:x1], stamp, out=depth[y0:y1, x0:x1])

        # Lesions: dark round blobs, kept clear of vessels and the border.
        n_lesions = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        margin = LESION_BORDER_MARGIN
        max_center_dist = fov_radius - 20

        def in_fov(x, y):
            return np.hypot(x - cx, y - cy) <= max_center_dist

        def clear_of_vessels(x, y):
            return (in_fov(x, y)
                    and depth[y - 3:y + 4, x - 3:x + 4].max(initial=0.0) <= 0.04)

        if n_lesions > 0:
            if size - 1 - margin <= margin:
                raise GenerationError(f"image_size {size} leaves no room for "
                                      f"lesions inside the {margin}px margin")
            try:
                centers = _best_candidate_points(
                    rng, n_lesions, margin, size - 1 - margin,
                    MIN_LESION_SPACING, lambda x, y: not clear_of_vessels(x, y))
            except GenerationError:
                # Dense vasculature can block every clean spot in small
                # images; allow lesions next to vessels before giving up.
                centers = _best_candidate_points(
                    rng, n_lesions, margin, size - 1 - margin,
                    MIN_LESION_SPACING, lambda x, y: not in_fov(x, y))
        else:
            centers = []

        blob = np.zeros((size, size))
        lesion_params = [(x, y, rng.uniform(2.0, 5.0),
                          rng.uniform(contrast_range[0], contrast_range[1]))
                         for x, y in centers]
        for x, y, radius, amp in lesion_params:
            sigma = radius / 2.0
            reach = int(np.ceil(3 * sigma))
            x0, x1 = x - reach, x + reach + 1
            y0, y1 = y - reach, y + reach + 1
            local = np.hypot(xx[y0:y1, x0:x1] - x, yy[y0:y1, x0:x1] - y)
            blob[y0:y1, x0:x1] += amp * np.exp(-0.5 * (local / sigma) ** 2)

        shading = np.clip(level, 0.2, 1.0) * (1.0 - depth)
        channel_gain = np.array([0.92, 0.64, 0.34])
        blob_gain = np.array([0.55, 1.0, 0.45])
        noise = rng.normal(0.0, 0.008, size=(3, size, size))
        pixels = np.empty((3, size, size))
        for c in range(3):
            chan = channel_gain[c] * shading - blob_gain[c] * blob + noise[c]
            pixels[c] = np.where(disc, np.clip(chan, 0.0, 1.0), 0.0)
        # Quantize to 8 bits so the in-memory dataset equals its PNG round trip.
        pixels = np.rint(pixels * 255.0) / 255.0

        record = ImageRecord(image_id, pixels, compute_fov_mask(pixels))
        annots = AnnotationSet(image_id,
                               sorted(centers, key=lambda p: (p[1], p[0])))
        annots.validate_against(record)
        records.append(record)
        annotations.append(annots)
    return records, annotations
