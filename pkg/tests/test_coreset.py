from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eagle_iad.coreset import (
    CoresetTrace,
    PatchFeature,
    PatchSet,
    ProjectionMatrix,
    build_coreset,
    coreset_cover_radius,
    load_trace,
    save_trace,
    unsampled_of,
)
from eagle_iad.features import DatasetManifest

import oracles


def _points(values, per_image=None):
    feats = []
    for g, v in enumerate(values):
        img = 0 if per_image is None else g // per_image
        pat = g if per_image is None else g % per_image
        feats.append(PatchFeature(np.atleast_1d(np.asarray(v, dtype=np.float32)), img, pat))
    return PatchSet.from_features(feats)


def test_full_sampling():
    ps = _points(np.arange(12.0).reshape(6, 2), per_image=3)
    tr = build_coreset(ps, 1.0)
    assert len(tr) == 6
    assert all(v == [] for v in unsampled_of(tr).values())
    assert coreset_cover_radius(tr, ps) == 0.0


def test_four_points_farthest_first():
    ps = _points([0.0, 1.0, 10.0, 11.0])
    tr = build_coreset(ps, 0.5, projection=None, start="first")
    pts = [[0.0], [1.0], [10.0], [11.0]]
    assert tr.selection_order.tolist() == oracles.farthest_first(pts, 2, 0) == [0, 3]


def test_cover_radius_of_given_bank():
    ps = _points([0.0, 1.0, 10.0, 11.0])
    tr = CoresetTrace(
        memory_bank=ps.vectors[[0, 2]],
        selection_order=np.array([0, 2]),
        bank_image=np.array([0, 0]),
        bank_patch=np.array([0, 2]),
        total_patches_by_image={0: 4},
    )
    assert coreset_cover_radius(tr, ps) == pytest.approx(1.0)
    assert unsampled_of(tr) == {0: [1, 3]}


def test_unsampled_complement():
    ps = _points(np.arange(4.0))
    tr = CoresetTrace(ps.vectors[[1, 3]], np.array([1, 3]), np.array([0, 0]), np.array([1, 3]), {0: 4})
    assert unsampled_of(tr) == {0: [0, 2]}


def test_tie_goes_to_lowest_id():
    ps = _points([0.0, 5.0, -5.0, 5.0])
    tr = build_coreset(ps, 0.5, start="first")
    assert tr.selection_order.tolist() == [0, 1]


def test_ten_percent_of_thousand():
    rng = np.random.default_rng(0)
    ps = _points(rng.standard_normal((1000, 4)), per_image=10)
    tr = build_coreset(ps, 0.10, ProjectionMatrix.default(4, seed=0))
    assert len(tr) == 100


@pytest.mark.parametrize("seed", range(8))
def test_exact_mode_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(5, 60)), int(rng.integers(1, 6))
    x = rng.standard_normal((n, d)).astype(np.float32)
    ps = _points(x)
    k = max(1, round(0.3 * n))
    tr = build_coreset(ps, 0.3, start="max_norm")
    norms = [oracles.dist(p, [0.0] * d) for p in x.tolist()]
    start = max(range(n), key=lambda i: (norms[i], -i))
    assert tr.selection_order.tolist() == oracles.farthest_first(x.astype(float).tolist(), k, start)


@pytest.mark.parametrize("seed", range(5))
def test_projected_mode_replays_in_projected_space(seed):
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((40, 6)).astype(np.float32)
    proj = ProjectionMatrix(seed=seed, out_dim=3, in_dim=6)
    tr = build_coreset(_points(x), 0.25, proj, start="first")
    y = (x.astype(float) @ proj.matrix.T).tolist()
    assert tr.selection_order.tolist() == oracles.farthest_first(y, 10, 0)
    # the bank keeps the original vectors
    np.testing.assert_array_equal(tr.memory_bank, x[tr.selection_order])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 10), st.integers(1, 3))
def test_greedy_within_twice_optimal(seed, n, k):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, size=(n, 2)).astype(np.float32)
    ps = _points(x)
    k = min(k, n)
    tr = build_coreset(ps, k / n, start="first")
    assert len(tr) == k
    opt = oracles.optimal_k_center(x.astype(float).tolist(), k)
    assert coreset_cover_radius(tr, ps) <= 2 * opt + 1e-5


def test_projection_matrix_statistics():
    p = ProjectionMatrix(seed=3, out_dim=64, in_dim=256)
    m = p.matrix
    assert m.shape == (64, 256)
    np.testing.assert_array_equal(m, ProjectionMatrix(3, 64, 256).matrix)
    assert m.var() == pytest.approx(1 / 64, rel=0.05)
    assert ProjectionMatrix.default(300).out_dim == 128
    assert ProjectionMatrix.default(8).out_dim == 8


def test_errors():
    with pytest.raises(ValueError):
        PatchSet.from_features([])
    ps = _points(np.zeros((5, 3)))
    with pytest.raises(ValueError):
        build_coreset(ps, 0.05)
    with pytest.raises(ValueError):
        build_coreset(ps, 0.5, ProjectionMatrix(0, 2, 4))
    with pytest.raises(ValueError):
        build_coreset(ps, 0.5, start="random")
    with pytest.raises(ValueError):
        build_coreset(ps, 1.5)


def test_synthetic_partition_and_provenance(small_synth_dir, tmp_path):
    m = DatasetManifest.load(small_synth_dir / "manifest.json")
    train = m.split("train_normal")
    ps = PatchSet.from_grids([m.load_grid(e) for e in train])
    tr = build_coreset(ps, 0.1, ProjectionMatrix.default(ps.dim))
    un = unsampled_of(tr)
    sampled = tr.sampled_by_image
    assert sum(map(len, un.values())) + sum(map(len, sampled.values())) == len(ps)
    for i, total in tr.total_patches_by_image.items():
        assert sampled[i].isdisjoint(un[i])
        assert sampled[i] | set(un[i]) == set(range(total))
    pairs = list(zip(tr.bank_image.tolist(), tr.bank_patch.tolist()))
    assert len(set(pairs)) == len(pairs) == len(tr)
    for t, g in enumerate(tr.selection_order):
        i, j = tr.source_of(t)
        np.testing.assert_array_equal(tr.memory_bank[t], ps.vectors[g])
        np.testing.assert_array_equal(tr.memory_bank[t], m.load_grid(train[i]).patches()[j])

    again = build_coreset(ps, 0.1, ProjectionMatrix.default(ps.dim))
    np.testing.assert_array_equal(again.selection_order, tr.selection_order)

    ids = [e.image_id for e in train]
    save_trace(tr, tmp_path, ids, config_hash="abc")
    back, back_ids, doc = load_trace(tmp_path)
    assert back_ids == ids and doc["config_hash"] == "abc"
    np.testing.assert_array_equal(back.memory_bank, tr.memory_bank)
    np.testing.assert_array_equal(back.selection_order, tr.selection_order)
    assert unsampled_of(back) == un
    assert back.projection == tr.projection
