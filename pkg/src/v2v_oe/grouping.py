"""Geographic grouping of pairs and the per-group sealed second-price auction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroupAssignment:
    labels: np.ndarray  # group index of each pair
    num_groups: int
    fallback: bool = False

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.labels == group)


@dataclass(frozen=True)
class AuctionRound:
    bids: np.ndarray
    winners: np.ndarray  # bool per pair
    payments: np.ndarray
    groups: np.ndarray

    def log_rows(self, slot: int):
        """(slot, group, winner, winning bid, payment) for every group with a winner."""
        for k in np.flatnonzero(self.winners):
            yield slot, int(self.groups[k]), int(k), float(self.bids[k]), float(self.payments[k])


AUCTION_LOG_HEADER = "slot,group,winner,bid,payment\n"


# -- k-means -----------------------------------------------------------------

@njit(cache=True)
def _uniform(state):
    # splitmix64
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _pairwise_sq(X):
    n, d = X.shape
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for m in range(d):
                t = X[i, m] - X[j, m]
                s += t * t
            P[i, j] = s
            P[j, i] = s
    return P


@njit(cache=True)
def _kmeanspp(P, k, state):
    # returns the point index seeding each cluster
    n = P.shape[0]
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = min(int(_uniform(state) * n), n - 1)
    dist = P[seeds[0]].copy()
    for c in range(1, k):
        total = 0.0
        for i in range(n):
            total += dist[i]
        pick = n - 1
        if total > 0.0:
            u = _uniform(state) * total
            acc = 0.0
            for i in range(n):
                acc += dist[i]
                if acc > u:
                    pick = i
                    break
        else:
            pick = min(int(_uniform(state) * n), n - 1)
        seeds[c] = pick
        for i in range(n):
            if P[i, pick] < dist[i]:
                dist[i] = P[i, pick]
    return seeds


@njit(cache=True)
def _lloyd(P, seeds, max_iter):
    """Lloyd iterations with centroids kept implicit.

    For a cluster S with centroid m, |x_i - m|^2 equals
    mean_j P[i, j] - sum_{j,l} P[j, l] / (2 |S|^2) over j, l in S.
    """
    n = P.shape[0]
    k = seeds.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    prev = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    dist = np.empty((n, k))
    for i in range(n):
        for c in range(k):
            dist[i, c] = P[i, seeds[c]]
    for it in range(max_iter):
        for i in range(n):
            best = 0
            for c in range(1, k):
                if dist[i, c] < dist[i, best]:
                    best = c
            labels[i] = best
        counts[:] = 0
        for i in range(n):
            counts[labels[i]] += 1
        # repair empty clusters by splitting off the farthest point of the largest
        for c in range(k):
            if counts[c] == 0:
                big = np.argmax(counts)
                far = -1
                fd = -1.0
                for i in range(n):
                    if labels[i] == big and dist[i, big] > fd:
                        fd = dist[i, big]
                        far = i
                labels[far] = c
                counts[big] -= 1
                counts[c] = 1
        # distances to the new centroids
        row = np.zeros((n, k))
        for i in range(n):
            for j in range(n):
                row[i, labels[j]] += P[i, j]
        intra = np.zeros(k)
        for i in range(n):
            intra[labels[i]] += row[i, labels[i]]
        for i in range(n):
            for c in range(k):
                cnt = counts[c]
                dist[i, c] = row[i, c] / cnt - intra[c] / (2.0 * cnt * cnt)
        same = True
        for i in range(n):
            if labels[i] != prev[i]:
                same = False
                prev[i] = labels[i]
        if same:
            break
    inertia = 0.0
    for i in range(n):
        inertia += dist[i, labels[i]]
    return labels, inertia


@njit(cache=True)
def _canonical(labels, k):
    # relabel in order of first appearance
    mapping = np.full(k, -1, dtype=np.int64)
    nxt = 0
    out = np.empty_like(labels)
    for i in range(labels.shape[0]):
        if mapping[labels[i]] < 0:
            mapping[labels[i]] = nxt
            nxt += 1
        out[i] = mapping[labels[i]]
    return out


@njit(cache=True)
def kmeans(X, k, restarts, max_iter, seed):
    """Seeded k-means++ / Lloyd with restarts; returns canonical labels."""
    state = np.array([np.uint64(seed)], dtype=np.uint64)
    best_labels = np.zeros(X.shape[0], dtype=np.int64)
    best = np.inf
    P = _pairwise_sq(X)
    for r in range(restarts):
        seeds = _kmeanspp(P, k, state)
        labels, inertia = _lloyd(P, seeds, max_iter)
        if inertia < best - 1e-12:
            best = inertia
            best_labels = labels
    return _canonical(best_labels, k)


# -- clustering --------------------------------------------------------------

def grid_partition(positions, num_groups: int, region_side: float) -> np.ndarray:
    """Split the region into ``num_groups`` rectangles (row-major cells)."""
    cols = math.ceil(math.sqrt(num_groups))
    rows = math.ceil(num_groups / cols)
    p = np.clip(np.asarray(positions, dtype=float) / region_side, 0.0, 1.0 - 1e-12)
    c = (p[:, 0] * cols).astype(np.int64)
    r = (p[:, 1] * rows).astype(np.int64)
    return np.minimum(r * cols + c, num_groups - 1)


@njit(cache=True)
def _nn_scale(sq):
    n = sq.shape[0]
    nearest = np.empty(n)
    for i in range(n):
        m = np.inf
        for j in range(n):
            if j != i and sq[i, j] < m:
                m = sq[i, j]
        nearest[i] = m
    scale = np.sqrt(np.median(nearest))
    return scale if scale > 0.0 else 1.0


@njit(cache=True)
def _laplacian(sq, width):
    n = sq.shape[0]
    L = np.empty((n, n))
    scale = -1.0 / (2.0 * width * width)
    for i in range(n):
        deg = 0.0
        for j in range(n):
            a = np.exp(sq[i, j] * scale)
            L[i, j] = -a
            deg += a
        L[i, i] += deg
    return L


@njit(cache=True)
def _spectral_labels(p, k, width, restarts, max_iter, seed):
    sq = _pairwise_sq(p)
    if width <= 0.0:
        width = _nn_scale(sq)
    _, vecs = np.linalg.eigh(_laplacian(sq, width))
    return kmeans(np.ascontiguousarray(vecs[:, :k]), k, restarts, max_iter, seed)


def nearest_neighbour_scale(positions) -> float:
    """Median distance from each position to its nearest neighbour."""
    p = np.ascontiguousarray(positions, dtype=float)
    return float(_nn_scale(_pairwise_sq(p)))


def spectral_embedding(positions, k: int, kernel_width: float | None = None) -> np.ndarray:
    """Rows of the ``k`` unnormalised-Laplacian eigenvectors of smallest eigenvalue."""
    p = np.ascontiguousarray(positions, dtype=float)
    sq = _pairwise_sq(p)
    if kernel_width is None:
        kernel_width = _nn_scale(sq)
    affinity = np.exp(sq / (-2.0 * kernel_width ** 2))
    laplacian = np.diag(affinity.sum(axis=1)) - affinity
    _, vecs = np.linalg.eigh(laplacian)
    return np.ascontiguousarray(vecs[:, :k])


def cluster(positions, num_groups: int, kernel_width: float | None = None, seed: int = 0,
            restarts: int = 5, max_iter: int = 100,
            region_side: float | None = None) -> GroupAssignment:
    """Partition pairs into ``num_groups`` groups by spectral clustering of ``positions``.

    ``kernel_width`` is the Gaussian affinity scale in metres; ``None`` uses
    the median nearest-neighbour distance of ``positions``.
    """
    p = np.asarray(positions, dtype=float)
    K = len(p)
    if K == 0:
        raise ValueError("no positions to cluster")
    if num_groups < 1:
        raise ValueError("num_groups must be positive")
    if num_groups == 1:
        return GroupAssignment(np.zeros(K, dtype=np.int64), 1)
    if K <= num_groups:
        return GroupAssignment(np.arange(K, dtype=np.int64), num_groups)
    try:
        labels = _spectral_labels(np.ascontiguousarray(p), num_groups,
                                  0.0 if kernel_width is None else float(kernel_width),
                                  restarts, max_iter, seed)
    except np.linalg.LinAlgError:
        log.warning("eigensolver failed; falling back to grid grouping")
        side = region_side if region_side is not None else float(np.max(p) or 1.0)
        return GroupAssignment(grid_partition(p, num_groups, side), num_groups, fallback=True)
    return GroupAssignment(labels, num_groups)


# -- auction -----------------------------------------------------------------

@njit(cache=True)
def _auction_kernel(bids, groups, keys, num_groups):
    # per group: leader by (bid, key) and the highest bid among the rest
    lead = np.full(num_groups, -1, dtype=np.int64)
    second = np.full(num_groups, -np.inf)
    for k in range(bids.shape[0]):
        g = groups[k]
        j = lead[g]
        if j < 0:
            lead[g] = k
        elif bids[k] > bids[j] or (bids[k] == bids[j] and keys[k] > keys[j]):
            if bids[j] > second[g]:
                second[g] = bids[j]
            lead[g] = k
        elif bids[k] > second[g]:
            second[g] = bids[k]
    winners = np.zeros(bids.shape[0], dtype=np.bool_)
    payments = np.zeros(bids.shape[0])
    for g in range(num_groups):
        if lead[g] >= 0:
            winners[lead[g]] = True
            if second[g] > -np.inf:
                payments[lead[g]] = second[g]
    return winners, payments


def determine_winners(bids, groups, tie_rng) -> AuctionRound:
    """Highest bid in each group wins and pays the group's second-highest bid.

    ``tie_rng`` is a generator (one uniform key drawn per pair) or an array
    of pre-drawn keys; among equal bids the largest key wins. A solo bidder
    pays nothing.
    """
    bids = np.ascontiguousarray(bids, dtype=float)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    if not np.all(np.isfinite(bids)) or np.any(bids < 0):
        raise ValueError("bids must be finite and non-negative")
    if len(groups) and groups.min() < 0:
        raise ValueError("group labels must be non-negative")
    keys = tie_rng.random(len(bids)) if isinstance(tie_rng, np.random.Generator) else tie_rng
    keys = np.ascontiguousarray(keys, dtype=float)
    num_groups = int(groups.max()) + 1 if len(groups) else 0
    winners, payments = _auction_kernel(bids, groups, keys, num_groups)
    return AuctionRound(bids, winners, payments, groups)
