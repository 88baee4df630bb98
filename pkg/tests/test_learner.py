import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from v2v_oe.channel import LinkBudget
from v2v_oe.grouping import determine_winners
from v2v_oe.learner import (
    Transcript, ValueTables, best_q_factor, compute_bid, measure_queue_distribution,
    observe_and_update, post_decision_returns, select_departures, train_frozen, u_overflow,
    u_power, u_queue, utility,
)
from v2v_oe.queueing import QueueContractError
from v2v_oe.scenario import LearningConfig, ScenarioConfig

GAMMA, ALPHA = 0.1, 6.0
G = 7.45e-10


def transcript(q, theta, d, c, tau, a, q_max, next_q=None):
    post = q - theta * d
    o = max(post + a - q_max, 0)
    nq = min(post + a, q_max) if next_q is None else next_q
    arr = lambda x: np.array([x])  # noqa: E731
    return Transcript(arr(q), arr(theta), arr(d), arr(c), arr(tau), arr(post), arr(a), arr(o), arr(nq))


def test_utilities():
    assert u_queue(0) == u_power(0) == u_overflow(0) == 1.0
    assert utility(0, 0, 0, ALPHA) == 8.0
    assert np.all(np.diff(u_queue(np.arange(5))) < 0)


# -- departures and bids -----------------------------------------------------

def test_empty_queue_sends_nothing():
    t = ValueTables.fresh(1, 5)
    assert select_departures(t, [0], 1, [3])[0] == 0


def test_loser_sends_nothing():
    t = ValueTables.fresh(1, 5)
    t.q_factor[0, 4, 1, 3] = 9.0
    assert select_departures(t, [4], 0, [4])[0] == 0
    assert select_departures(t, [4], 1, [4])[0] == 3


def test_uniform_table_picks_zero():
    t = ValueTables.fresh(1, 5, init_q=2.5)
    assert select_departures(t, [5], 1, [5])[0] == 0


def test_departures_respect_cap():
    t = ValueTables.fresh(1, 5)
    t.q_factor[0, :, 1, :] = np.arange(6)
    assert select_departures(t, [5], 1, [2])[0] == 2
    assert select_departures(t, [3], 1, [5])[0] == 3


BUDGET = LinkBudget(ScenarioConfig(num_pairs=1, pair_distance=26.0, arrival_rate=1.0, max_queue=8))


@given(seed=st.integers(0, 10_000))
def test_selected_departures_feasible(seed):
    budget = BUDGET
    rng = np.random.default_rng(seed)
    t = ValueTables.fresh(10, 8)
    t.q_factor[:] = rng.normal(size=t.q_factor.shape)
    q = rng.integers(0, 9, 10)
    g = G * rng.exponential(size=10)
    dec = compute_bid(t, q, g, budget, ALPHA, GAMMA)
    assert np.all(dec.departures <= q)
    assert np.all(dec.power <= 2.0)
    assert np.all(dec.departures <= budget.max_departures(g, q))


def test_fresh_bid_is_seven(budget):
    dec = compute_bid(ValueTables.fresh(1, 5), np.array([0]), np.array([G]), budget, ALPHA, GAMMA)
    assert (dec.departures[0], dec.power[0]) == (0, 0.0)
    assert dec.bid[0] == pytest.approx(7.0, abs=1e-15)


def test_bid_with_poor_channel(budget):
    dec = compute_bid(ValueTables.fresh(1, 5), np.array([5]), np.array([1e-16]), budget, ALPHA, GAMMA)
    assert dec.departures[0] == 0
    assert dec.bid[0] == pytest.approx(math.exp(-5) + 6.0, rel=1e-15)


def test_bid_increases_with_value(budget):
    t = ValueTables.fresh(1, 5)
    b0 = compute_bid(t, np.array([3]), np.array([G]), budget, ALPHA, GAMMA).bid[0]
    t.v_tilde[0, 3] = 0.05
    b1 = compute_bid(t, np.array([3]), np.array([G]), budget, ALPHA, GAMMA).bid[0]
    assert b1 == pytest.approx(b0 + 0.05 / GAMMA)


def test_truthful_bid_is_best_response(budget):
    rng = np.random.default_rng(0)
    grid = np.round(np.arange(0, 10.01, 0.1), 1)
    for _ in range(20):
        t = ValueTables.fresh(1, 5)
        t.v_tilde[:] = rng.uniform(0, 0.2, 6)
        t.q_factor[:] = rng.uniform(0, 1, t.q_factor.shape)
        q = int(rng.integers(0, 6))
        own = compute_bid(t, np.array([q]), np.array([G]), budget, ALPHA, GAMMA).bid[0]
        others = list(rng.uniform(0, 10, int(rng.integers(1, 4))))

        def outcome(b):
            r = determine_winners([b, *others], [0] * (1 + len(others)), np.arange(len(others) + 1, 0, -1.0))
            return own * r.winners[0] - r.payments[0]
        best = outcome(own)
        assert all(outcome(b) <= best + 1e-12 for b in grid)


# -- updates -------------------------------------------------------------------

LC = LearningConfig()


def test_zero_rate_keeps_value():
    t = ValueTables.fresh(1, 5)
    t.v_tilde[0] = 0.4
    observe_and_update(t, transcript(2, 1, 1, 0.3, 0.5, 1, 5), LC, GAMMA, ALPHA, rate=0.0)
    assert np.all(t.v_tilde[0] == 0.4)
    want = GAMMA * (math.exp(-2) + ALPHA * math.exp(-0.3) - 0.5) + 0.4
    assert t.q_factor[0, 2, 1, 1] == pytest.approx(want, rel=1e-15)


def test_first_update_by_hand():
    t = ValueTables.fresh(1, 5)
    observe_and_update(t, transcript(0, 0, 0, 0.0, 0.0, 0, 5), LC, GAMMA, ALPHA)
    zeta = 0.3 / 1 ** 0.7
    v0 = zeta * GAMMA * (1 + 0)
    assert t.v_tilde[0, 0] == pytest.approx(v0, rel=1e-15)
    assert t.q_factor[0, 0, 0, 0] == pytest.approx(GAMMA * (1 + ALPHA) + v0, rel=1e-15)
    assert t.visit_counts[0, 0] == 1


def test_rate_decays_with_visits():
    t = ValueTables.fresh(1, 5)
    t.q_factor[0, 1, 0, 0] = 2.0
    for n in range(4):
        before = t.v_tilde[0, 1]
        # transcript: q=1 lost the auction, nothing arrived, next queue length 1
        target = GAMMA * (1 + 2.0)
        observe_and_update(t, transcript(1, 0, 0, 0.0, 0.0, 0, 5, next_q=1), LC, GAMMA, ALPHA)
        t.q_factor[0, 1, 0, 0] = 2.0
        zeta = 0.3 / (1 + n) ** 0.7
        assert t.v_tilde[0, 1] == pytest.approx(before + zeta * (target - before), rel=1e-14)
        assert t.visit_counts[0, 1] == n + 1


def test_target_uses_next_queue():
    t = ValueTables.fresh(1, 5)
    t.q_factor[0, 4, 1, 2] = 3.0
    t.q_factor[0, 0, 0, 0] = -1.0
    observe_and_update(t, transcript(3, 1, 3, 0.0, 0.0, 4, 5, next_q=4), LC, GAMMA, ALPHA, rate=1.0)
    assert t.v_tilde[0, 0] == pytest.approx(GAMMA * (1 + 3.0))
    t2 = ValueTables.fresh(1, 5)
    t2.q_factor[0, 4, 1, 2] = 3.0
    # after a termination the next queue is empty and only its entries count
    observe_and_update(t2, transcript(3, 1, 3, 0.0, 0.0, 4, 5, next_q=0), LC, GAMMA, ALPHA, rate=1.0)
    assert t2.v_tilde[0, 0] == pytest.approx(GAMMA * 1.0)


def test_best_q_factor_masks():
    t = ValueTables.fresh(1, 5)
    t.q_factor[0, 2, 1, 4] = 10.0   # D > q: never eligible
    t.q_factor[0, 2, 0, 3] = 10.0   # losing with D > 0: never eligible
    t.q_factor[0, 2, 1, 2] = 1.0
    assert best_q_factor(t, np.array([2]))[0] == 1.0


@given(seed=st.integers(0, 10_000), q=st.integers(0, 6), theta=st.integers(0, 1),
       data=st.data(), a=st.integers(0, 8), tau=st.floats(0, 10), c=st.floats(0, 2))
def test_q_factor_consistency(seed, q, theta, data, a, tau, c):
    d = data.draw(st.integers(0, q))
    rng = np.random.default_rng(seed)
    t = ValueTables.fresh(1, 6)
    t.v_tilde[:] = rng.normal(size=t.v_tilde.shape)
    t.q_factor[:] = rng.normal(size=t.q_factor.shape)
    tr = transcript(q, theta, d, c, tau, a, 6)
    observe_and_update(t, tr, LC, GAMMA, ALPHA)
    p = q - theta * d
    got = t.q_factor[0, q, theta, d * theta] - t.v_tilde[0, p]
    assert got == pytest.approx(GAMMA * (math.exp(-q) + ALPHA * math.exp(-c) - tau), abs=1e-12)
    assert np.all(np.isfinite(t.v_tilde))


def test_inconsistent_transcript():
    with pytest.raises(QueueContractError):
        observe_and_update(ValueTables.fresh(1, 5), transcript(1, 1, 2, 0.0, 0.0, 0, 5), LC, GAMMA, ALPHA)


def test_table_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    t = ValueTables.fresh(2, 3)
    t.v_tilde[:] = rng.normal(size=t.v_tilde.shape)
    t.q_factor[:] = rng.normal(size=t.q_factor.shape)
    t.visit_counts[:] = rng.integers(0, 9, t.visit_counts.shape)
    t.export(tmp_path / "tables.csv")
    back = ValueTables.load(tmp_path / "tables.csv")
    for name in ("v_tilde", "q_factor", "visit_counts"):
        assert np.array_equal(getattr(t, name), getattr(back, name))


# -- frozen environment --------------------------------------------------------

@pytest.mark.parametrize("arrivals", [1, 2])
def test_frozen_matches_value_iteration(budget, arrivals):
    lc = LearningConfig(exploration=0.3)
    run = train_frozen(budget, G, arrivals, 3, lc, GAMMA, ALPHA, 100_000, rng=np.random.default_rng(0))
    want = oracles.frozen_value_iteration(3, arrivals, GAMMA, ALPHA,
                                          lambda d: float(oracles.power(G, d)))
    visited = np.flatnonzero(run.tables.visit_counts[0])
    assert len(visited) == 4
    assert np.max(np.abs(run.tables.v_tilde[0, visited] - np.array(want)[visited])) < 1e-3


def test_frozen_learning_converges_in_place(budget):
    lc = LearningConfig(exploration=0.3)
    a = train_frozen(budget, G, 1, 3, lc, GAMMA, ALPHA, 20_000, rng=np.random.default_rng(0))
    b = train_frozen(budget, G, 1, 3, lc, GAMMA, ALPHA, 20_000, rng=np.random.default_rng(0))
    assert np.array_equal(a.tables.v_tilde, b.tables.v_tilde)
    assert np.all(a.departures <= a.q)


def test_empirical_return_tracks_learned_value(budget):
    # greedy after learning: realised discounted returns agree with the table
    lc = LearningConfig(exploration=0.3)
    run = train_frozen(budget, G, 1, 3, lc, GAMMA, ALPHA, 50_000, rng=np.random.default_rng(0))
    greedy = train_frozen(budget, G, 1, 3, LearningConfig(rate_scale=1e-9), GAMMA, ALPHA, 2_000,
                          tables=run.tables.copy())
    ret = post_decision_returns(greedy, GAMMA, ALPHA)[:-10]
    for p in np.unique(greedy.post_decision[:-10]):
        sel = greedy.post_decision[:-10] == p
        assert ret[sel].mean() == pytest.approx(run.tables.v_tilde[0, p], rel=0.05)


# -- queue distribution ----------------------------------------------------------

def test_distribution_point_mass():
    assert list(measure_queue_distribution(np.zeros((10, 4), dtype=int), 3)) == [1, 0, 0, 0]


def test_distribution_alternating():
    h = np.array([[0, 1], [1, 0]] * 5)
    assert list(measure_queue_distribution(h, 2)) == [0.5, 0.5, 0.0]


def test_distribution_window():
    h = np.array([[3]] * 5 + [[1]] * 5)
    assert measure_queue_distribution(h, 3, window=5)[1] == 1.0
    with pytest.raises(ValueError):
        measure_queue_distribution(np.zeros((0, 2), dtype=int), 3)


@given(seed=st.integers(0, 1000))
def test_distribution_sums_to_one(seed):
    h = np.random.default_rng(seed).integers(0, 6, (50, 7))
    assert measure_queue_distribution(h, 5).sum() == pytest.approx(1.0)
