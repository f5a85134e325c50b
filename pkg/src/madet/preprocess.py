"""Background estimation and removal: a large median filter approximates the
slowly varying retina background, and subtracting it leaves small dark
structures (lesions, vessels) as negative residuals."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import FormatError, ShapeError, ValidationError

MEDIAN_WINDOW = 30

# Row budget per median chunk, sized to keep the window copy around ~16 MB.
_CHUNK_ELEMENTS = 2_000_000


@dataclass
class PreprocessedImage:
    image_id: str
    residual: np.ndarray  # (3, H, W) float64 in [-1, 1]
    fov_mask: np.ndarray  # (H, W) bool


def median_background(pixels, k=MEDIAN_WINDOW):
    """Per-channel k x k median filter with reflect padding.

    An even window is anchored with ceil(k/2)-1 pixels above/left of the
    center pixel (and k-ceil(k/2) below/right), fixed for reproducibility.
    """
    if k < 1:
        raise ValidationError(f"median window must be >= 1, got {k}")
    if pixels.ndim != 3:
        raise ShapeError("median_background expects (C,H,W)", pixels.shape)
    h, w = pixels.shape[1], pixels.shape[2]
    above = (k + 1) // 2 - 1
    below = k - 1 - above
    if max(above, below) > min(h, w) - 1:
        raise ValidationError(f"median window {k} too large for {h}x{w} image")

    out = np.empty_like(pixels)
    rows_per_chunk = max(1, _CHUNK_ELEMENTS // (w * k * k))
    for c in range(pixels.shape[0]):
        padded = np.pad(pixels[c], ((above, below), (above, below)), mode="reflect")
        windows = sliding_window_view(padded, (k, k))  # (H, W, k, k) view
        for r0 in range(0, h, rows_per_chunk):
            r1 = min(r0 + rows_per_chunk, h)
            out[c, r0:r1] = np.median(windows[r0:r1], axis=(2, 3))
    return out


def subtract_background(record, background):
    """residual = pixels - background, clamped to [-1, 1]; the record's
    field-of-view mask is carried through."""
    if record.pixels.shape != background.shape:
        raise ShapeError("background shape does not match image",
                         background.shape, record.pixels.shape)
    residual = np.clip(record.pixels - background, -1.0, 1.0)
    return PreprocessedImage(record.image_id, residual, record.fov_mask.copy())


def preprocess_record(record, k=MEDIAN_WINDOW):
    return subtract_background(record, median_background(record.pixels, k))


# ---------------------------------------------------------------------------
# On-disk form used by the CLI: residual channels as offset-encoded 16-bit
# PNGs (stored = round((value+1)/2 * 65535)) plus the binarized FOV mask,
# indexed by a manifest CSV.

_CHANNELS = ("r", "g", "b")


def save_preprocessed(directory, preprocessed):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for pre in preprocessed:
        names = []
        for idx, suffix in enumerate(_CHANNELS):
            encoded = np.rint((pre.residual[idx] + 1.0) / 2.0 * 65535.0)
            arr = encoded.astype("<u2")  # PIL maps uint16 to 16-bit grayscale
            name = f"{pre.image_id}_{suffix}.png"
            Image.fromarray(arr).save(directory / name)
            names.append(name)
        fov_name = f"{pre.image_id}_fov.png"
        Image.fromarray(pre.fov_mask.astype(np.uint8) * 255, mode="L").save(
            directory / fov_name)
        rows.append([pre.image_id, *names, fov_name])
    with open(directory / "manifest.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["image_id", "red", "green", "blue", "fov"])
        writer.writerows(rows)


def load_preprocessed(directory):
    directory = Path(directory)
    manifest = directory / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"{manifest}: no preprocess manifest found")
    result = []
    with open(manifest, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["image_id", "red", "green", "blue", "fov"]:
            raise FormatError(f"{manifest}: unexpected header {header}")
        for row in reader:
            image_id, red, green, blue, fov = row
            channels = []
            for name in (red, green, blue):
                arr = np.asarray(Image.open(directory / name), dtype=np.float64)
                channels.append(arr / 65535.0 * 2.0 - 1.0)
            mask = np.asarray(Image.open(directory / fov)) > 0
            result.append(PreprocessedImage(image_id, np.stack(channels), mask))
    return result
