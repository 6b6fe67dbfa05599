from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from eagle_iad.coreset import PatchSet, ProjectionMatrix, build_coreset
from eagle_iad.features import DatasetManifest, FeatureGrid, patch_mask
from eagle_iad.neighbors import nearest_neighbors
from eagle_iad.scoring import ScoreGrid, extract_boxes, image_score, score_grid, upsample_map

import oracles


def _grid_of(vectors, h, w):
    return FeatureGrid(np.asarray(vectors, np.float32).T.reshape(-1, h, w))


def test_two_point_bank():
    sg = score_grid(_grid_of([[0.6, 0.0]], 1, 1), np.array([[0.0, 0.0], [1.0, 0.0]], np.float32))
    assert sg.scores[0, 0] == pytest.approx(0.4, abs=1e-6)
    assert sg.nearest_ids[0, 0] == 1


def test_identical_patch_scores_zero():
    rng = np.random.default_rng(1)
    bank = rng.standard_normal((50, 7)).astype(np.float32) * 100
    sg = score_grid(_grid_of(bank[[3, 17, 42, 0]], 2, 2), bank)
    assert np.all(sg.scores == 0.0)
    assert sg.nearest_ids.ravel().tolist() == [3, 17, 42, 0]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        score_grid(FeatureGrid(np.zeros((3, 2, 2))), np.zeros((4, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 30), st.integers(1, 6))
def test_nn_matches_loop_oracle(seed, nq, nb, d):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((nq, d)).astype(np.float32)
    b = rng.standard_normal((nb, d)).astype(np.float32)
    dist, ids = nearest_neighbors(q, b, block=7)
    for i in range(nq):
        ref_d, _ = oracles.nearest(q[i].tolist(), b.tolist())
        assert dist[i] == pytest.approx(ref_d, rel=1e-6, abs=1e-6)
        assert oracles.dist(q[i], b[ids[i]]) == pytest.approx(ref_d, rel=1e-6, abs=1e-6)


def test_nn_tie_takes_lowest_id():
    bank = np.array([[1.0], [-1.0], [1.0]], np.float32)
    _, ids = nearest_neighbors(np.array([[0.0]], np.float32), bank)
    assert ids[0] == 0


def test_bank_permutation_invariance():
    rng = np.random.default_rng(2)
    bank = rng.standard_normal((30, 4)).astype(np.float32)
    g = FeatureGrid(rng.standard_normal((4, 3, 5)))
    perm = rng.permutation(30)
    a, b = score_grid(g, bank), score_grid(g, bank[perm])
    np.testing.assert_allclose(a.scores, b.scores, rtol=1e-6)
    np.testing.assert_array_equal(perm[b.nearest_ids], a.nearest_ids)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 4.0, 16.0]))
def test_homogeneity(seed, c):
    # powers of two keep the float32 scaling exact
    rng = np.random.default_rng(seed)
    bank = rng.standard_normal((20, 3)).astype(np.float32)
    data = rng.standard_normal((3, 4, 4)).astype(np.float32)
    a = score_grid(FeatureGrid(data), bank)
    b = score_grid(FeatureGrid(data * c), bank * c)
    np.testing.assert_allclose(b.scores, c * a.scores, rtol=1e-5, atol=1e-6)
    assert image_score(a).argmax_patch == image_score(b).argmax_patch


def test_image_score_rules():
    z = image_score(ScoreGrid(np.zeros((3, 3)), np.zeros((3, 3), int)))
    assert (z.value, z.argmax_patch) == (0.0, (0, 0))
    s = image_score(ScoreGrid(np.array([[1.0, 3.0], [2.0, 3.0]]), np.zeros((2, 2), int)))
    assert (s.value, s.argmax_patch) == (3.0, (0, 1))
    assert s.argmax_index(2) == 1


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 100)))
def test_image_score_is_max(arr):
    s = image_score(ScoreGrid(arr, np.zeros(arr.shape, int)))
    assert np.all(arr <= s.value)
    assert arr[s.argmax_patch] == s.value


# --------------------------------------------------------------------------- maps


def test_constant_map():
    m = upsample_map(np.full((3, 4), 2.5), (12, 16)).values
    assert m.shape == (12, 16)
    assert np.all(m == 2.5)


def test_monotone_row():
    row = upsample_map(np.array([[0.0, 1.0]]), (1, 4)).values[0]
    assert np.all(np.diff(row) >= 0)
    np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_two_by_two_bilinear_oracle():
    src = [[1.0, 2.0], [3.0, 5.0]]
    np.testing.assert_allclose(upsample_map(np.array(src), (4, 4)).values, oracles.bilinear(src, 4, 4), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-50, 50)),
    st.integers(1, 4),
    st.integers(0, 3),
)
def test_bilinear_matches_oracle_and_preserves_range(src, scale, extra):
    h, w = src.shape[0] * scale + extra, src.shape[1] * scale
    out = upsample_map(src, (h, w)).values
    np.testing.assert_allclose(out, oracles.bilinear(src.tolist(), h, w), atol=1e-9)
    assert out.min() >= src.min() - 1e-9 and out.max() <= src.max() + 1e-9


def test_upsample_rejects_smaller_target():
    with pytest.raises(ValueError):
        upsample_map(np.zeros((4, 4)), (3, 8))


def test_optional_blur_keeps_shape():
    m = upsample_map(np.eye(3), (9, 9), blur_sigma=1.0).values
    assert m.shape == (9, 9)
    assert m.max() < 1.0


# --------------------------------------------------------------------------- boxes


def test_no_box_below_threshold():
    assert extract_boxes(np.zeros((5, 5)), 0.5) == []


def test_single_blob_box():
    m = np.zeros((8, 10))
    m[2:5, 5:8] = 1.0
    m[3, 6] = 2.0
    (b,) = extract_boxes(m, 0.5)
    assert (b.x0, b.y0, b.x1, b.y1) == (5, 2, 7, 4)
    assert b.peak_score == 2.0 and b.area == 9


def test_diagonal_pixels_are_one_component():
    m = np.zeros((4, 4))
    m[1, 1] = m[2, 2] = 1.0
    assert len(extract_boxes(m, 0.5)) == 1


def test_min_area_and_ordering():
    m = np.zeros((10, 10))
    m[0, 0] = 5.0
    m[5:8, 5:8] = 1.0
    m[2:4, 7:9] = 3.0
    boxes = extract_boxes(m, 0.5)
    assert [b.peak_score for b in boxes] == [5.0, 3.0, 1.0]
    assert [b.peak_score for b in extract_boxes(m, 0.5, min_area=4)] == [3.0, 1.0]
    with pytest.raises(ValueError):
        extract_boxes(m, float("nan"))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 1)), st.floats(0.05, 0.95))
def test_boxes_match_bfs_oracle(values, thr):
    mask = (values >= thr).tolist()
    expected = []
    for comp in oracles.components_8(mask):
        ys = [p[0] for p in comp]
        xs = [p[1] for p in comp]
        expected.append((min(xs), min(ys), max(xs), max(ys), len(comp)))
    got = [(b.x0, b.y0, b.x1, b.y1, b.area) for b in extract_boxes(values, thr)]
    assert sorted(got) == sorted(expected)
    peaks = [b.peak_score for b in extract_boxes(values, thr)]
    assert peaks == sorted(peaks, reverse=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_boxes_stable_under_subthreshold_noise(seed):
    rng = np.random.default_rng(seed)
    m = np.where(rng.random((12, 12)) > 0.7, 1.0, 0.0)
    noisy = m + rng.uniform(-0.2, 0.2, m.shape)
    key = lambda bs: [(b.x0, b.y0, b.x1, b.y1) for b in bs]
    assert sorted(key(extract_boxes(m, 0.5))) == sorted(key(extract_boxes(noisy, 0.5)))


def test_argmax_inside_injected_rectangle(synth_dir):
    m = DatasetManifest.load(synth_dir / "manifest.json")
    train = [m.load_grid(e) for e in m.split("train_normal")]
    ps = PatchSet.from_grids(train)
    tr = build_coreset(ps, 0.1, ProjectionMatrix.default(ps.dim))
    for e in m.split("test_anomalous"):
        g = m.load_grid(e)
        s = image_score(score_grid(g, tr))
        assert patch_mask(m.load_mask(e), (g.height, g.width))[s.argmax_patch]
