import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score

from oodmat.splitting import (LOCO_DEFAULT_K, Scenario, SplitTask, embed_2d, kmeans, knn_distance, knn_regress,
                              load_scenario, loco_split, make_scenario, nearest_neighbors, optimize_cluster_count,
                              random_split, save_scenario, sparse_x_cluster, sparse_x_single, sparse_y_cluster,
                              sparse_y_single)


def blobs(seed=0, n=100, spread=0.1):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0], [10, 0], [5, 10 * np.sqrt(0.75)]])
    X = np.concatenate([c + spread * rng.normal(size=(n, 2)) for c in centers])
    return X, np.repeat(np.arange(3), n)


def check_scenario(sc, n):
    for t in sc.tasks:
        t.check_bounds(n)
        pool = len(t.train_idx) + len(t.val_idx)
        assert len(t.val_idx) == pool // 5
        assert set(t.train_idx) | set(t.val_idx) | set(t.test_idx) == set(range(n))


def test_kmeans_separated_1d():
    labels = kmeans(np.array([[0.0], [0.1], [10.0], [10.1]]), 2, seed=0)
    assert labels[0] == labels[1] != labels[2] == labels[3]


def test_kmeans_k_equals_n():
    X = np.random.default_rng(0).normal(size=(7, 3))
    labels, inertia = kmeans(X, 7, seed=1, return_inertia=True)
    assert sorted(labels.tolist()) == list(range(7))
    assert inertia == 0.0


def test_kmeans_blobs_ari():
    X, truth = blobs()
    assert adjusted_rand_score(truth, kmeans(X, 3, seed=0)) == 1.0


def test_kmeans_identical_points_no_empty_cluster():
    labels = kmeans(np.zeros((6, 2)), 3, seed=0)
    assert len(set(labels.tolist())) == 3


def test_kmeans_errors_and_determinism():
    X = np.random.default_rng(1).normal(size=(30, 4))
    with pytest.raises(ValueError):
        kmeans(X, 31)
    assert np.array_equal(kmeans(X, 4, seed=5), kmeans(X, 4, seed=5))


def test_loco_equal_clusters_arithmetic():
    rng = np.random.default_rng(0)
    X = np.concatenate([c * 100 + rng.normal(size=(20, 2)) for c in range(5)])
    sc = loco_split(X, 5, seed=3)
    assert len(sc) == 5
    for t in sc.tasks:
        assert (len(t.test_idx), len(t.val_idx), len(t.train_idx)) == (20, 16, 64)
    check_scenario(sc, 100)
    tests = sorted(i for t in sc.tasks for i in t.test_idx)
    assert tests == list(range(100))


def test_loco_default_k():
    X = np.random.default_rng(0).normal(size=(120, 3))
    sc = make_scenario("LOCO", X, seed=0)
    assert LOCO_DEFAULT_K == 50 and len(sc) == 50
    assert sorted(i for t in sc.tasks for i in t.test_idx) == list(range(120))


def test_loco_rejects_k1():
    with pytest.raises(ValueError):
        loco_split(np.zeros((5, 2)), 1)


def test_embed_2d_preserves_planar_distances():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(30, 2))
    basis = np.linalg.qr(rng.normal(size=(3, 3)))[0][:, :2]
    X = P @ basis.T + rng.normal(size=3)
    E = embed_2d(X)
    d = lambda A: np.sqrt(((A[:, None] - A[None]) ** 2).sum(-1))
    np.testing.assert_allclose(d(E), d(X), atol=1e-8)


def test_embed_2d_degenerate():
    with pytest.warns(UserWarning):
        E = embed_2d(np.ones((5, 3)))
    assert np.all(E == 0)


def test_sparse_x_single_outlier_and_counts():
    g = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0)), -1).reshape(-1, 2)
    X = np.concatenate([g, [[100.0, 100.0]]])
    X = np.hstack([X, np.zeros((len(X), 1))])
    sc = sparse_x_single(X, seed=0)
    assert len(sc) == 50 and all(len(t.test_idx) == 1 for t in sc.tasks)
    assert sc.tasks[0].test_idx == (100,)
    check_scenario(sc, 101)


def test_sparse_n60():
    X = np.random.default_rng(4).normal(size=(60, 3))
    sc = sparse_x_single(X, seed=1)
    assert len(sc) == 50
    assert all(len(t.train_idx) + len(t.val_idx) == 59 for t in sc.tasks)
    with pytest.raises(ValueError):
        sparse_x_single(X[:59])


def test_sparse_x_cluster():
    X = np.random.default_rng(4).normal(size=(200, 5))
    sc = sparse_x_cluster(X, seed=0)
    E = embed_2d(X)
    anchors = set()
    for t in sc.tasks:
        assert len(t.test_idx) == 11
        assert not set(t.test_idx) & (set(t.train_idx) | set(t.val_idx))
        check_scenario(sc, 200)
    # anchor is the first index of the selection; its nearest neighbour is in the test set
    from oodmat.splitting import sparsest
    for t, a in zip(sc.tasks, sparsest(E, 50)):
        anchors.add(int(a))
        assert int(a) in t.test_idx
        assert int(nearest_neighbors(E, int(a), 1)[0]) in t.test_idx
    assert len(anchors) == 50


def test_sparse_ties_deterministic():
    X = np.zeros((80, 3))
    with pytest.warns(UserWarning):
        a = sparse_x_cluster(X, seed=0)
    # all densities tie: anchors are 0..49, neighbours the lowest other indices
    for t, task in enumerate(a.tasks):
        expected = sorted({t} | set([i for i in range(12) if i != t][:10]))
        assert list(task.test_idx) == expected
    with pytest.warns(UserWarning):
        b = sparse_x_cluster(X, seed=0)
    assert a == b


def test_sparse_y():
    rng = np.random.default_rng(0)
    y = np.append(rng.random(99), 100.0)
    sc = sparse_y_single(y, seed=0)
    assert sc.tasks[0].test_idx == (99,)
    syc = sparse_y_cluster(y, seed=0)
    assert all(len(t.test_idx) == 11 for t in syc.tasks)
    const = sparse_y_single(np.ones(70), seed=0)
    assert [t.test_idx[0] for t in const.tasks] == list(range(50))


def test_knn_distance_brute_force():
    P = np.random.default_rng(1).normal(size=(40, 2))
    D = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
    np.fill_diagonal(D, np.inf)
    np.testing.assert_allclose(knn_distance(P, 10), np.sort(D, axis=1)[:, 9])


def test_knn_regress_against_sklearn():
    from sklearn.neighbors import KNeighborsRegressor

    rng = np.random.default_rng(0)
    Xt, yt, Xq = rng.normal(size=(50, 3)), rng.normal(size=50), rng.normal(size=(20, 3))
    ref = KNeighborsRegressor(5, weights="distance").fit(Xt, yt).predict(Xq)
    np.testing.assert_allclose(knn_regress(Xt, yt, Xq, 5), ref, rtol=1e-12)
    assert knn_regress(Xt, yt, Xt[:1], 5)[0] == yt[0]


def test_optimize_cluster_count_planted():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(size=(60, 2)), rng.normal(size=(20, 2)) + [30, 0]])
    y = np.concatenate([np.zeros(60), np.full(20, 50.0)]) + 0.01 * rng.normal(size=80)
    k, scores = optimize_cluster_count(X, y, [2, 4, 8], seed=0, return_scores=True)
    assert k == 2 and scores[2] == max(scores.values())


def test_optimize_cluster_count_noise_and_errors():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(40, 3)), rng.normal(size=40)
    assert optimize_cluster_count(X, y, [40, 20, 5, 40, 10], seed=0) == optimize_cluster_count(
        X, y, [5, 10, 20, 40], seed=0)
    with pytest.warns(UserWarning):
        optimize_cluster_count(X, y, [3, 100], seed=0)
    with pytest.raises(ValueError), pytest.warns(UserWarning):
        optimize_cluster_count(X, y, [100], seed=0)
    with pytest.raises(ValueError):
        optimize_cluster_count(X, y, [], seed=0)


def test_random_split_sizes():
    sc = random_split(100, [5, 30], seed=2)
    assert [len(t.test_idx) for t in sc.tasks] == [5, 30]
    check_scenario(sc, 100)


def test_manifest_round_trip_bytes(tmp_path):
    X, _ = blobs(n=20)
    sc = loco_split(X, 3, seed=4)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_scenario(sc, p1)
    back = load_scenario(p1)
    assert back == sc
    save_scenario(back, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_split_task_contract():
    with pytest.raises(ValueError):
        SplitTask("t", [0, 1], [1], [2])
    with pytest.raises(ValueError):
        SplitTask("t", [0], [], [])
    with pytest.raises(ValueError):
        SplitTask("t", [5], [], [0]).check_bounds(3)


@settings(max_examples=25, deadline=None)
@given(st.integers(10, 60), st.integers(2, 6), st.integers(0, 10**6))
def test_loco_partition_property(n, k, seed):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    sc = loco_split(X, k, seed)
    check_scenario(sc, n)
    assert sorted(i for t in sc.tasks for i in t.test_idx) == list(range(n))
    assert sc == loco_split(X, k, seed)
