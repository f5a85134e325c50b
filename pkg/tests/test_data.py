import numpy as np
import pytest

from madet import data
from madet.errors import (FormatError, GenerationError, ParseError,
                          ValidationError)


def _flat_record(value=0.5, size=120):
    pixels = np.full((3, size, size), value)
    return data.ImageRecord("flat", pixels, data.compute_fov_mask(pixels))


# ------------------------------------------------------------------ images

def test_image_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(5)
    pixels = rng.integers(0, 256, size=(3, 110, 130)).astype(np.float64) / 255.0
    record = data.ImageRecord("sample", pixels, data.compute_fov_mask(pixels))
    path = tmp_path / "sample.png"
    data.save_image(path, record)
    loaded = data.load_image(path)
    assert loaded.image_id == "sample"
    assert np.array_equal(loaded.pixels, pixels)
    assert loaded.pixels.max() <= 1.0 and loaded.pixels.min() >= 0.0


def test_image_value_scaling(tmp_path):
    pixels = np.zeros((3, 101, 101))
    pixels[:, 0, 0] = 1.0  # 8-bit 255
    record = data.ImageRecord("scale", pixels, np.ones((101, 101), bool))
    path = tmp_path / "scale.png"
    data.save_image(path, record)
    loaded = data.load_image(path)
    assert loaded.pixels[0, 0, 0] == 1.0
    assert loaded.pixels[0, 1, 1] == 0.0


def test_load_image_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_image(tmp_path / "missing.png")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"this is not a png")
    with pytest.raises(FormatError):
        data.load_image(bad)
    from PIL import Image
    gray = tmp_path / "gray.png"
    Image.new("L", (120, 120)).save(gray)
    with pytest.raises(FormatError):
        data.load_image(gray)


# ------------------------------------------------------------- annotations

def test_load_annotations_basic(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("image_id,x,y\nimg1,10,20\n")
    sets = data.load_annotations(path)
    assert len(sets) == 1
    assert sets[0].image_id == "img1"
    assert sets[0].centroids == [(10, 20)]


def test_load_annotations_header_only(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("image_id,x,y\n")
    assert data.load_annotations(path) == []


def test_load_annotations_duplicate_rejected(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("image_id,x,y\nimg1,10,20\nimg1,10,20\n")
    with pytest.raises(ValidationError):
        data.load_annotations(path)


def test_load_annotations_parse_error_has_line(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("image_id,x,y\nimg1,10,20\nimg1,ten,20\n")
    with pytest.raises(ParseError) as exc:
        data.load_annotations(path)
    assert exc.value.line == 3


def test_load_annotations_order_independent(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("image_id,x,y\nimg2,5,6\nimg1,10,20\nimg1,3,4\n")
    b.write_text("image_id,x,y\nimg1,3,4\nimg1,10,20\nimg2,5,6\n")
    assert data.load_annotations(a) == data.load_annotations(b)


def test_annotations_out_of_bounds_validation(tmp_path):
    record = _flat_record()
    path = tmp_path / "ann.csv"
    path.write_text("image_id,x,y\nflat,500,20\n")
    with pytest.raises(ValidationError):
        data.load_annotations(path, records={"flat": record})


def test_annotations_roundtrip(tmp_path):
    sets = [data.AnnotationSet("img1", [(3, 4), (10, 20)]),
            data.AnnotationSet("img2", [(5, 6)])]
    path = tmp_path / "out.csv"
    data.save_annotations(path, sets)
    assert data.load_annotations(path) == sets


# --------------------------------------------------------------- centroids

def test_mask_to_centroids_single_pixel():
    mask = np.zeros((20, 20), bool)
    mask[9, 7] = True  # y=9, x=7
    assert data.mask_to_centroids(mask) == [(7, 9)]


def test_mask_to_centroids_block():
    mask = np.zeros((20, 20), bool)
    mask[4:7, 4:7] = True  # 3x3 block centered at (5,5)
    assert data.mask_to_centroids(mask) == [(5, 5)]


def test_mask_to_centroids_diagonal_merged():
    mask = np.zeros((10, 10), bool)
    mask[3, 3] = True
    mask[4, 4] = True  # touches only diagonally
    assert len(data.mask_to_centroids(mask)) == 1


def test_mask_to_centroids_inverts_point_render():
    rng = np.random.default_rng(9)
    points = set()
    while len(points) < 12:
        x, y = rng.integers(5, 95, size=2)
        if all(abs(int(x) - px) + abs(int(y) - py) > 6 for px, py in points):
            points.add((int(x), int(y)))
    mask = np.zeros((100, 100), bool)
    for x, y in points:
        mask[y, x] = True
    assert set(data.mask_to_centroids(mask)) == points


# --------------------------------------------------------------- fov masks

def test_fov_all_black_and_all_gray():
    black = np.zeros((3, 120, 120))
    assert not data.compute_fov_mask(black).any()
    gray = np.full((3, 120, 120), 0.5)
    assert data.compute_fov_mask(gray).all()


def test_fov_disc_iou():
    # Disc sized like a real fundus field of view; the 5x5 smoothing only
    # shifts the boundary by ~2 px, negligible at this scale.
    size = 1280
    yy, xx = np.mgrid[0:size, 0:size]
    disc = np.hypot(xx - 640, yy - 640) <= 600
    pixels = np.zeros((3, size, size))
    pixels[:, disc] = 0.5
    mask = data.compute_fov_mask(pixels)
    iou = np.logical_and(mask, disc).sum() / np.logical_or(mask, disc).sum()
    assert iou > 0.99


# ------------------------------------------------------------- synthetic

def test_synthetic_deterministic():
    recs1, anns1 = data.generate_synthetic(7, 2, image_size=176, n_ma_range=(2, 4))
    recs2, anns2 = data.generate_synthetic(7, 2, image_size=176, n_ma_range=(2, 4))
    for a, b in zip(recs1, recs2):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.fov_mask, b.fov_mask)
    assert anns1 == anns2
    recs3, _ = data.generate_synthetic(8, 2, image_size=176, n_ma_range=(2, 4))
    assert not np.array_equal(recs1[0].pixels, recs3[0].pixels)


def test_synthetic_zero_lesions():
    _, anns = data.generate_synthetic(3, 2, image_size=176, n_ma_range=(0, 0))
    assert all(a.centroids == [] for a in anns)


def test_synthetic_annotations_validate():
    records, annotations = data.generate_synthetic(11, 3, image_size=160,
                                                   n_ma_range=(3, 6))
    for record, annots in zip(records, annotations):
        annots.validate_against(record)
        h, w = record.fov_mask.shape
        for x, y in annots.centroids:
            assert data.LESION_BORDER_MARGIN <= x < w - data.LESION_BORDER_MARGIN
            assert data.LESION_BORDER_MARGIN <= y < h - data.LESION_BORDER_MARGIN
        pts = annots.centroids
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                d = np.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1])
                assert d >= data.MIN_LESION_SPACING


def test_synthetic_matches_png_roundtrip(tmp_path):
    records, _ = data.generate_synthetic(5, 1, image_size=176, n_ma_range=(2, 3))
    data.save_image(tmp_path / "img.png", records[0])
    loaded = data.load_image(tmp_path / "img.png")
    assert np.array_equal(loaded.pixels, records[0].pixels)


def test_synthetic_infeasible_raises():
    with pytest.raises(GenerationError):
        # 112px image leaves a 1x1 box for lesions; 30 cannot fit 15px apart.
        data.generate_synthetic(1, 1, image_size=112, n_ma_range=(30, 30))


def test_synthetic_bad_args():
    with pytest.raises(ValidationError):
        data.generate_synthetic(1, 0, image_size=176)
    with pytest.raises(ValidationError):
        data.generate_synthetic(1, 1, image_size=100)
