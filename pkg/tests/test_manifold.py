import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components

from binmap import manifold
from helpers import affine_patch, brute_trustworthiness, cylinder


def _edges(graph):
    return {(i, int(j)) for i, adj in enumerate(graph.adjacency) for j in adj}


# ---------------------------------------------------------------- graphs

def test_grid_graph_thins_at_the_boundary():
    g = np.arange(7.0)
    pts = np.array([(x, y) for x in g for y in g])
    graph = manifold.symmetric_knn(pts, 4)
    on_boundary = ((pts == 0) | (pts == 6)).any(axis=1)
    for i, j in _edges(graph):
        length = np.linalg.norm(pts[i] - pts[j])
        # diagonal links only pair boundary points around a corner
        assert length == pytest.approx(1.0) or (length == pytest.approx(np.sqrt(2))
                                                 and on_boundary[i] and on_boundary[j])
    deg = graph.degree()
    assert np.all(deg[~on_boundary] == 4)
    assert np.all(deg[on_boundary] <= 4) and deg[on_boundary].mean() < 4
    assert graph.isolated.size == 0


def test_far_outlier_is_isolated():
    pts = np.vstack([np.random.default_rng(0).normal(size=(20, 3)), [[100.0, 100.0, 100.0]]])
    graph = manifold.symmetric_knn(pts, 2)
    assert 20 in graph.isolated
    assert graph.adjacency[20].size == 0


def test_graph_is_symmetric_without_self_loops():
    pts = np.random.default_rng(1).normal(size=(60, 4))
    graph = manifold.symmetric_knn(pts, 6)
    edges = _edges(graph)
    assert all((j, i) in edges for i, j in edges)
    assert all(i != j for i, j in edges)
    assert (graph.matrix() != graph.matrix().T).nnz == 0


def test_mutual_definition_against_brute_force():
    pts = np.random.default_rng(2).normal(size=(40, 3))
    k = 5
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    np.fill_diagonal(d, np.inf)
    near = [set(np.argsort(row, kind="stable")[:k]) for row in d]
    expected = {(i, j) for i in range(40) for j in near[i] if i in near[j]}
    assert _edges(manifold.symmetric_knn(pts, k)) == expected


def test_duplicates_break_ties_by_index():
    pts = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    nn = manifold.knn_indices(pts, 2)
    np.testing.assert_array_equal(nn[:3], [[1, 2], [0, 2], [0, 1]])


def test_graph_invariant_under_rigid_motion():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 5))
    rot = np.linalg.qr(rng.normal(size=(5, 5)))[0]
    moved = pts @ rot.T + rng.normal(size=5) * 10
    assert _edges(manifold.symmetric_knn(pts, 7)) == _edges(manifold.symmetric_knn(moved, 7))


def test_graph_preconditions():
    with pytest.raises(ValueError):
        manifold.symmetric_knn(np.zeros((3, 2)), 3)
    with pytest.raises(ValueError):
        manifold.symmetric_knn(np.zeros((3, 2)), 0)


# ---------------------------------------------------------------- LTSA

def test_affine_subspace_recovered():
    pts, coords = affine_patch()
    emb = manifold.ltsa_embed(pts, 12, 2)
    assert emb.coords.shape[1] == 3
    assert manifold.procrustes_residual(coords[emb.kept_indices], emb.coords) <= 1e-6


def test_cylinder_neighborhoods_preserved():
    pts, intrinsic = cylinder()
    emb = manifold.ltsa_embed(pts, 20, 2)
    tw = manifold.trustworthiness(pts[emb.kept_indices], emb.coords, 10)
    assert tw >= 0.95


def test_trustworthiness_matches_brute_force():
    # jittered so that no distance ranks tie
    rng = np.random.default_rng(4)
    high = rng.normal(size=(80, 6))
    low = high[:, :2] + 0.3 * rng.normal(size=(80, 2))
    for k in (5, 10):
        assert manifold.trustworthiness(high, low, k) == pytest.approx(
            brute_trustworthiness(high, low, k), abs=1e-12)


def test_embedding_stable_across_neighborhood_sizes():
    pts, _ = cylinder()
    a = manifold.ltsa_embed(pts, 15, 2, out_dim=2)
    b = manifold.ltsa_embed(pts, 25, 2, out_dim=2)
    common, ia, _ = np.intersect1d(a.kept_indices, b.kept_indices, return_indices=True)
    ref = a.coords[ia]
    diameter = np.max(np.linalg.norm(ref[:, None] - ref[None], axis=2))
    assert manifold.embedding_residual(a, b) < 0.1 * diameter


def test_ltsa_is_deterministic_with_sign_convention():
    pts, _ = cylinder(n_side=15)
    a = manifold.ltsa_embed(pts, 12, 2)
    b = manifold.ltsa_embed(pts, 12, 2)
    np.testing.assert_array_equal(a.coords, b.coords)
    for col in a.coords.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_eigen_order_conventions():
    pts, _ = affine_patch(n=200)
    small = manifold.ltsa_embed(pts, 10, 2)
    large = manifold.ltsa_embed(pts, 10, 2, eigen_order="largest")
    assert np.all(np.diff(small.eigvals) >= -1e-12)
    assert np.all(np.diff(large.eigvals) <= 1e-12)
    assert small.eigvals[-1] <= large.eigvals[-1]
    with pytest.raises(ValueError):
        manifold.ltsa_embed(pts, 10, 2, eigen_order="middle")


def test_outliers_dropped_and_kept_component_connected():
    pts, _ = cylinder(n_side=15)
    far = np.full((2, pts.shape[1]), 50.0)
    far[1] += 30.0
    data = np.vstack([pts, far])
    emb = manifold.ltsa_embed(data, 12, 2)
    assert set(emb.dropped_indices) >= {225, 226}
    sub = manifold.symmetric_knn(data, 12).matrix()[emb.kept_indices][:, emb.kept_indices]
    assert connected_components(sub, directed=False)[0] == 1
    assert np.all(np.isfinite(emb.coords))


def test_k_below_intrinsic_dimension_rejected():
    with pytest.raises(ValueError):
        manifold.ltsa_embed(np.random.default_rng(0).normal(size=(30, 3)), 2, 2)


# ---------------------------------------------------------------- PCA

def test_isotropic_cloud_has_even_spectrum():
    pts = np.random.default_rng(0).normal(size=(20000, 3))
    emb = manifold.pca_embed(pts, 3)
    np.testing.assert_allclose(emb.eigvals, 1.0, rtol=0.05)


def test_rank_two_data_warns():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(100, 2)) @ rng.normal(size=(2, 5))
    with pytest.warns(RuntimeWarning, match="degenerate"):
        emb = manifold.pca_embed(pts, 3)
    assert emb.eigvals[2] == pytest.approx(0.0, abs=1e-10)


def test_pca_reconstruction_error_is_discarded_variance():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    emb = manifold.pca_embed(pts, 2)
    centered = pts - pts.mean(axis=0)
    full = np.sort(np.linalg.eigvalsh(np.cov(pts.T, bias=True)))[::-1]
    axes = np.linalg.lstsq(emb.coords, centered, rcond=None)[0]
    err = np.mean(np.sum((centered - emb.coords @ axes) ** 2, axis=1))
    assert err == pytest.approx(full[2:].sum(), rel=1e-9)
    np.testing.assert_allclose(emb.eigvals, full[:2], rtol=1e-10)
    np.testing.assert_allclose(emb.coords.mean(axis=0), 0.0, atol=1e-10)
