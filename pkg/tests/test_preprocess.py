import numpy as np
import pytest

from madet import data, preprocess
from madet.errors import ShapeError, ValidationError
from helpers import median_filter_loop


rng = np.random.default_rng(99)


def test_median_constant_image():
    pixels = np.full((3, 40, 40), 0.7)
    background = preprocess.median_background(pixels, k=30)
    assert np.array_equal(background, pixels)


def test_median_rejects_outlier():
    pixels = np.full((1, 30, 30), 0.4)
    pixels[0, 15, 15] = 1.0
    background = preprocess.median_background(pixels, k=7)
    assert np.array_equal(background, np.full((1, 30, 30), 0.4))


def test_median_matches_sort_oracle():
    for k in (1, 2, 3, 4, 5, 6, 30):
        img = rng.random((16, 16)) if k <= 6 else rng.random((40, 40))
        got = preprocess.median_background(img[None], k=k)[0]
        want = median_filter_loop(img, k)
        assert np.array_equal(got, want), f"k={k}"


def test_median_rot90_equivariance_odd_window():
    img = rng.random((3, 24, 24))
    filtered = preprocess.median_background(img, k=5)
    rotated = preprocess.median_background(np.rot90(img, axes=(1, 2)), k=5)
    assert np.array_equal(np.rot90(filtered, axes=(1, 2)), rotated)


def test_median_window_too_large():
    with pytest.raises(ValidationError):
        preprocess.median_background(np.zeros((1, 10, 10)), k=30)
    with pytest.raises(ValidationError):
        preprocess.median_background(np.zeros((1, 10, 10)), k=0)


def _record(pixels):
    return data.ImageRecord("rec", pixels, np.ones(pixels.shape[1:], bool))


def test_subtract_background_zero_residual():
    pixels = rng.random((3, 20, 20))
    pre = preprocess.subtract_background(_record(pixels), pixels.copy())
    assert not pre.residual.any()
    assert pre.image_id == "rec"
    assert pre.fov_mask.all()


def test_constant_image_zero_residual_composed():
    pixels = np.full((3, 40, 40), 0.3)
    pre = preprocess.preprocess_record(_record(pixels), k=30)
    assert not pre.residual.any()


def test_subtract_shape_mismatch():
    with pytest.raises(ShapeError):
        preprocess.subtract_background(_record(np.zeros((3, 10, 10))),
                                       np.zeros((3, 11, 10)))


def test_dark_blob_negative_residual():
    pixels = np.full((3, 60, 60), 0.6)
    yy, xx = np.mgrid[0:60, 0:60]
    blob = 0.3 * np.exp(-0.5 * (np.hypot(xx - 30, yy - 30) / 2.0) ** 2)
    pixels -= blob[None]
    pre = preprocess.preprocess_record(_record(pixels), k=15)
    assert pre.residual[:, 30, 30].max() < -0.2
    assert np.abs(pre.residual[:, :10, :10]).max() < 1e-9
    assert pre.residual.min() >= -1.0 and pre.residual.max() <= 1.0


def test_second_pass_is_stable():
    pixels = np.full((3, 50, 50), 0.5)
    pixels[:, 25, 25] -= 0.3
    first = preprocess.preprocess_record(_record(pixels), k=11)
    second = preprocess.preprocess_record(
        data.ImageRecord("rec", first.residual, first.fov_mask), k=11)
    assert np.abs(second.residual - first.residual).max() < 1e-6


def test_preprocessed_disk_roundtrip(tmp_path):
    records, _ = data.generate_synthetic(21, 2, image_size=176, n_ma_range=(2, 3))
    pres = [preprocess.preprocess_record(r) for r in records]
    preprocess.save_preprocessed(tmp_path, pres)
    loaded = preprocess.load_preprocessed(tmp_path)
    assert [p.image_id for p in loaded] == [p.image_id for p in pres]
    for a, b in zip(loaded, pres):
        # 16-bit offset encoding quantizes to 2/65535 steps
        assert np.abs(a.residual - b.residual).max() <= 1.0 / 65535.0 * 2.001
        assert np.array_equal(a.fov_mask, b.fov_mask)
