import numpy as np
import pytest

from madet import postproc
from madet.errors import ParseError, ValidationError
from madet.infer import ProbabilityMap


def _pmap(scores, valid=None, image_id="im"):
    scores = np.asarray(scores, dtype=np.float64)
    if valid is None:
        valid = np.ones_like(scores, bool)
    return ProbabilityMap(image_id, scores, 1, valid)


def test_disk_support_count():
    assert int(postproc.disk_footprint(5).sum()) == 81
    assert int(postproc.disk_footprint(1).sum()) == 5
    with pytest.raises(ValidationError):
        postproc.disk_footprint(0)


def test_impulse_response():
    scores = np.zeros((40, 40))
    scores[20, 20] = 1.0
    smoothed = postproc.disk_smooth(_pmap(scores), radius=5)
    inside = postproc.disk_footprint(5)
    region = smoothed.scores[15:26, 15:26]
    assert np.allclose(region[inside], 1.0 / 81.0)
    assert not region[~inside].any()
    assert np.count_nonzero(smoothed.scores) == 81


def test_constant_map_preserved_including_borders():
    smoothed = postproc.disk_smooth(_pmap(np.full((30, 30), 0.37)), radius=5)
    assert np.allclose(smoothed.scores, 0.37, atol=1e-14)


def test_constant_preserved_on_partial_mask():
    valid = np.zeros((30, 30), bool)
    valid[5:25, 8:27] = True
    scores = np.where(valid, 0.81, 0.0)
    smoothed = postproc.disk_smooth(_pmap(scores, valid), radius=5)
    assert np.allclose(smoothed.scores[valid], 0.81, atol=1e-14)
    assert not smoothed.scores[~valid].any()


def test_disk_smooth_linearity():
    rng = np.random.default_rng(0)
    m1 = rng.random((25, 25))
    m2 = rng.random((25, 25))
    a, b = 0.3, 1.7
    lhs = postproc.disk_smooth(_pmap(a * m1 + b * m2)).scores
    rhs = a * postproc.disk_smooth(_pmap(m1)).scores \
        + b * postproc.disk_smooth(_pmap(m2)).scores
    assert np.abs(lhs - rhs).max() < 1e-12


def test_single_bump_single_candidate():
    scores = np.zeros((50, 50))
    scores[25, 25] = 1.0
    smoothed = postproc.disk_smooth(_pmap(scores))
    candidates = postproc.extract_candidates(smoothed)
    assert len(candidates) == 1
    assert candidates[0].position == (25, 25)
    assert candidates[0].score == pytest.approx(1.0 / 81.0)


def test_two_distant_bumps_two_candidates():
    scores = np.zeros((60, 60))
    scores[20, 15] = 1.0
    scores[20, 35] = 0.8
    smoothed = postproc.disk_smooth(_pmap(scores))
    candidates = postproc.extract_candidates(smoothed)
    assert len(candidates) == 2
    assert candidates[0].position == (15, 20)  # sorted by descending score
    assert candidates[1].position == (35, 20)


def test_equal_bumps_nearby_collapse_to_centroid():
    scores = np.zeros((60, 60))
    scores[30, 30] = 1.0
    scores[30, 33] = 1.0
    smoothed = postproc.disk_smooth(_pmap(scores))
    candidates = postproc.extract_candidates(smoothed)
    assert len(candidates) == 1
    x, y = candidates[0].position
    assert y == 30 and x in (31, 32)  # integer centroid of the overlap plateau
    assert candidates[0].score == pytest.approx(2.0 / 81.0)


def test_candidate_count_monotone_in_floor():
    rng = np.random.default_rng(1)
    smoothed = postproc.disk_smooth(_pmap(rng.random((60, 60)) ** 3))
    counts = [len(postproc.extract_candidates(smoothed, floor=f))
              for f in (1e-4, 1e-3, 0.05, 0.2, 0.5)]
    assert counts == sorted(counts, reverse=True)


def test_candidates_pairwise_separated():
    rng = np.random.default_rng(2)
    smoothed = postproc.disk_smooth(_pmap(rng.random((80, 80))))
    candidates = postproc.extract_candidates(smoothed, radius=5)
    for i in range(len(candidates)):
        for j in range(i + 1, len(candidates)):
            xi, yi = candidates[i].position
            xj, yj = candidates[j].position
            assert (xi - xj) ** 2 + (yi - yj) ** 2 > 25


def test_candidates_scores_match_map_and_mask():
    rng = np.random.default_rng(3)
    valid = np.zeros((70, 70), bool)
    valid[10:60, 10:60] = True
    smoothed = postproc.disk_smooth(_pmap(rng.random((70, 70)), valid))
    for cand in postproc.extract_candidates(smoothed):
        x, y = cand.position
        assert valid[y, x]
        assert cand.score == smoothed.scores[y, x]


def test_floor_suppresses_flat_noise():
    smoothed = _pmap(np.full((30, 30), 5e-4))
    assert postproc.extract_candidates(smoothed, floor=1e-3) == []


def test_candidates_csv_roundtrip(tmp_path):
    candidates = [postproc.Candidate("a", (3, 4), 0.8125),
                  postproc.Candidate("b", (10, 2), 0.0625)]
    path = tmp_path / "cands.csv"
    postproc.save_candidates(path, candidates)
    text = path.read_text().splitlines()
    assert text[0] == "image_id,x,y,score"
    assert text[1] == "a,3,4,0.812500"
    loaded = postproc.load_candidates(path)
    assert [(c.image_id, c.position, c.score) for c in loaded] == \
        [("a", (3, 4), 0.8125), ("b", (10, 2), 0.0625)]
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n")
    with pytest.raises(ParseError):
        postproc.load_candidates(bad)
