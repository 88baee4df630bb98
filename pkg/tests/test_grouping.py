import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from v2v_oe import grouping
from v2v_oe.grouping import cluster, determine_winners, grid_partition, kmeans, spectral_embedding


def synthetic(rng, n_clusters=15, per=2, sep=15.0, noise=1.0, side=250.0):
    centres = []
    while len(centres) < n_clusters:
        c = rng.uniform(0, side, 2)
        if all(np.linalg.norm(c - o) >= sep for o in centres):
            centres.append(c)
    truth = np.repeat(np.arange(n_clusters), per)
    pts = np.array(centres)[truth] + rng.normal(0, noise, (len(truth), 2))
    return pts, truth


def test_two_distant_points():
    a = cluster([[0.0, 0.0], [200.0, 200.0]], 2)
    assert a.labels[0] != a.labels[1]


def test_single_group():
    a = cluster(np.random.default_rng(0).uniform(0, 250, (10, 2)), 1)
    assert np.all(a.labels == 0)


def test_fewer_pairs_than_groups():
    a = cluster([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 15)
    assert len(set(a.labels)) == 3


def test_recovers_tight_clusters():
    rng = np.random.default_rng(0)
    for trial in range(10):
        pts, truth = synthetic(rng)
        a = cluster(pts, 15, seed=trial)
        assert oracles.same_partition(a.labels, truth)


@given(seed=st.integers(0, 10_000), K=st.integers(1, 40), groups=st.integers(1, 15))
def test_partition_valid(seed, K, groups):
    pts = np.random.default_rng(seed).uniform(0, 250, (K, 2))
    a = cluster(pts, groups, seed=seed)
    assert a.labels.shape == (K,)
    assert np.all((a.labels >= 0) & (a.labels < groups))
    if K >= groups:
        # k-means repairs empty clusters, so every group is used
        assert len(set(a.labels.tolist())) == groups


def test_cluster_deterministic():
    pts = np.random.default_rng(3).uniform(0, 250, (30, 2))
    assert np.array_equal(cluster(pts, 15, seed=9).labels, cluster(pts, 15, seed=9).labels)


def test_fallback_on_eigensolver_failure(monkeypatch):
    def broken(*args):
        raise np.linalg.LinAlgError("no convergence")
    monkeypatch.setattr(grouping, "_spectral_labels", broken)
    pts = np.array([[10.0, 10.0], [240.0, 10.0], [10.0, 240.0], [240.0, 240.0], [125.0, 125.0]])
    a = cluster(pts, 4, region_side=250.0)
    assert a.fallback
    assert list(a.labels) == [0, 1, 2, 3, 3]


def test_grid_partition_bounds():
    pts = np.random.default_rng(1).uniform(-2, 252, (200, 2))
    labels = grid_partition(pts, 15, 250.0)
    assert labels.min() >= 0 and labels.max() <= 14


def test_embedding_shape_and_nullspace():
    pts = np.random.default_rng(2).uniform(0, 250, (12, 2))
    emb = spectral_embedding(pts, 3, kernel_width=40.0)
    assert emb.shape == (12, 3)
    # the constant vector spans the Laplacian null space
    assert np.allclose(np.abs(emb[:, 0]), 1 / np.sqrt(12), atol=1e-8)


def test_kmeans_simple():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
    assert list(kmeans(X, 2, 3, 100, 1)) == [0, 0, 1, 1]


# -- auction -----------------------------------------------------------------

def test_second_price():
    r = determine_winners([5.0, 3.0], [0, 0], np.random.default_rng(0))
    assert list(r.winners) == [True, False]
    assert list(r.payments) == [3.0, 0.0]


def test_solo_bidder_pays_nothing():
    r = determine_winners([4.0], [0], np.random.default_rng(0))
    assert r.winners[0] and r.payments[0] == 0.0


def test_brute_force_instances():
    rng = np.random.default_rng(5)
    for _ in range(200):
        K = int(rng.integers(1, 9))
        groups = rng.integers(0, int(rng.integers(1, 4)), K)
        bids = np.round(rng.uniform(0, 10, K), 1)
        r = determine_winners(bids, groups, rng)
        assert sum(float(t) * float(b) for t, b in zip(r.winners, bids)) == oracles.best_allocation(bids, groups)
        assert list(r.payments) == oracles.second_prices(bids, groups, r.winners)
        for g in set(groups.tolist()):
            assert r.winners[groups == g].sum() == 1


def test_ties_uniform():
    rng = np.random.default_rng(6)
    wins = np.zeros(3)
    for _ in range(6000):
        wins += determine_winners([2.0, 2.0, 2.0], [0, 0, 0], rng).winners
    assert np.all(np.abs(wins / 6000 - 1 / 3) < 3 * np.sqrt(2 / 9 / 6000))


def test_tie_payment_equals_bid():
    r = determine_winners([2.0, 2.0], [0, 0], np.array([0.1, 0.9]))
    assert list(r.winners) == [False, True] and r.payments[1] == 2.0


@given(bids=st.lists(st.floats(0, 100), min_size=1, max_size=10), seed=st.integers(0, 99))
def test_payment_bounds(bids, seed):
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, 3, len(bids))
    r = determine_winners(bids, groups, rng)
    assert np.all(r.payments >= 0)
    assert np.all(r.payments <= r.bids + 1e-12)
    assert np.all(r.payments[~r.winners] == 0)


def test_truthful_small_grid():
    # no deviation beats truthful bidding against fixed competitors
    grid = np.round(np.arange(0, 10.01, 0.5), 1)
    for v in grid:
        for others in ((3.0,), (2.5, 7.0), (0.0, 5.0, 9.5)):
            def outcome(b):
                r = determine_winners([b, *others], [0] * (1 + len(others)), np.arange(1 + len(others), 0, -1.0))
                return v * r.winners[0] - r.payments[0]
            truthful = outcome(v)
            assert all(outcome(b) <= truthful + 1e-12 for b in grid)


def test_invalid_bids():
    with pytest.raises(ValueError):
        determine_winners([-1.0], [0], np.random.default_rng(0))
    with pytest.raises(ValueError):
        determine_winners([np.nan], [0], np.random.default_rng(0))


def test_log_rows():
    r = determine_winners([5.0, 3.0, 1.0], [0, 0, 1], np.random.default_rng(0))
    assert list(r.log_rows(7)) == [(7, 0, 0, 5.0, 3.0), (7, 1, 2, 1.0, 0.0)]
