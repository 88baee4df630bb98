"""The slot loop: mobility, channels, bidding, grouping, auction, queues and learning."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from numba import njit

from . import baselines
from .channel import LinkBudget, _max_departures_kernel, _path_loss_kernel, draw_fading
from .grouping import AUCTION_LOG_HEADER, AuctionRound, _auction_kernel, cluster
from .learner import Transcript, ValueTables, _greedy_departures, _update_kernel, measure_queue_distribution
from .mobility import TRACE_HEADER, GridMap, _classify_kernel, advance, initialize_fleet, write_trace_rows
from .queueing import QueueBank, QueueContractError
from .results import METRIC_NAMES, RunSummary, SlotMetrics, first_quiet_slot
from .scenario import BlockDraws, RngPlan, ScenarioConfig, derive_substream, with_overrides

log = logging.getLogger(__name__)


class InvariantError(RuntimeError):
    """A per-slot consistency check failed."""

    def __init__(self, slot: int, message: str):
        super().__init__(f"slot {slot}: {message}")
        self.slot = slot


class Simulation:
    """World state of one run: fleet, queues, agent tables and random streams.

    Every per-pair random stream advances by exactly one draw per slot
    regardless of the policy, so two policies under the same seed see the
    same mobility, fading, arrivals and terminations.
    """

    def __init__(self, cfg: ScenarioConfig, seed: int, policy: str | None = None,
                 mobility_trace=None, auction_trace=None):
        self.cfg = cfg
        self.seed = int(seed)
        self.policy = policy or cfg.policy
        if self.policy != "oe" and self.policy not in baselines.BASELINES:
            raise ValueError(f"unknown policy {self.policy!r}")
        self.plan = RngPlan(self.seed)
        K = cfg.num_pairs
        self.grid = GridMap.from_config(cfg)
        self._mob_rngs = [derive_substream(self.plan, "mobility", k) for k in range(K)]
        self.fleet = initialize_fleet(cfg, self.grid, self._mob_rngs)
        self.budget = LinkBudget(cfg)
        self.queues = QueueBank(K, cfg.max_queue)
        lam, model = cfg.arrival_rate, cfg.fading_model
        self._fading = BlockDraws(self.plan, "fading", K, lambda g, n: draw_fading(g, n, model))
        self._arrivals = BlockDraws(self.plan, "arrivals", K, lambda g, n: g.poisson(lam, n))
        self._termination = BlockDraws(self.plan, "termination", K, lambda g, n: g.random(n))
        self._ties = BlockDraws(self.plan, "tie_breaks", K, lambda g, n: g.random(n))
        self._cluster_rng = derive_substream(self.plan, "clustering")
        self.t = 0

        self.tables = None
        self._explore = None
        self._baseline_u = None
        self._ewma = None
        if self.policy == "oe":
            lc = cfg.learning
            self.tables = ValueTables.fresh(K, cfg.max_queue, lc.init_value_v, lc.init_value_q)
            if lc.exploration > 0:
                self._explore = BlockDraws(self.plan, "exploration", K, lambda g, n: g.random((n, 2)))
        elif self.policy == baselines.RANDOM:
            self._baseline_u = BlockDraws(self.plan, "baseline_bids", K, lambda g, n: g.random(n))
        elif self.policy == baselines.QUEUE_AWARE:
            self._ewma = baselines.DepartureAverage(K)
        self._b_ref = baselines.random_bid_scale(cfg.power_weight, cfg.continue_prob)
        self._rows = np.arange(K, dtype=np.int64)
        self._no_rate = np.zeros(0)
        self._npi = cfg.noise_plus_interference
        self._half_w = cfg.lane_width / 2.0
        self._step_len = cfg.vehicle_speed * cfg.slot_duration
        self.last_dv = 0.0
        self.last_terminated = np.zeros(K, dtype=bool)
        self.last_channel = None
        self.last_transcript = None

        self.mobility_trace = mobility_trace
        self.auction_trace = auction_trace
        if mobility_trace is not None:
            mobility_trace.write(TRACE_HEADER)
        if auction_trace is not None:
            auction_trace.write(AUCTION_LOG_HEADER)

    # -- one slot -------------------------------------------------------------

    def _bids(self, q, g, dcap):
        cfg = self.cfg
        if self.policy == "oe":
            d = _greedy_departures(self.tables.q_factor, self._rows, q, dcap)
            if self._explore is not None:
                u = self._explore()
                pick = np.minimum((u[:, 1] * (dcap + 1)).astype(np.int64), dcap)
                d = np.where(u[:, 0] < cfg.learning.exploration, pick, d)
            c = self.budget.power(g, 1, d)
            bid = (np.exp(-q) + cfg.power_weight * np.exp(-c)
                   + self.tables.v_tilde[self._rows, q - d] / cfg.continue_prob)
            # a negative valuation is bid as zero: the pair would rather not win
            return np.maximum(bid, 0.0), d, c
        if self.policy == baselines.CHANNEL_AWARE:
            bid = baselines.channel_aware_bid(g, cfg.nominal_path_loss)
        elif self.policy == baselines.QUEUE_AWARE:
            bid = baselines.queue_aware_bid(q, dcap, self._ewma.value)
        else:
            bid = baselines.random_bid(self._baseline_u(), self._b_ref)
        return bid, dcap, self.budget.power(g, 1, dcap)

    def channel_gains(self):
        """Advance mobility one slot and return ``(geometry, path loss, channel gain)``."""
        cfg, fleet = self.cfg, self.fleet
        advance(fleet, self.grid, self._mob_rngs, self._step_len, cfg.turn_probs)
        self.vrx = fleet.vrx
        geometry, dx, dy = _classify_kernel(fleet.vtx, self.vrx, fleet.heading, fleet.vrx_heading,
                                            self._half_w, cfg.intersection_radius, 1e-6)
        H, bad = _path_loss_kernel(geometry, dx, dy, cfg.pathloss_exponent_coeff,
                                   cfg.nlos_exponent, cfg.pathloss_coefficient)
        if bad >= 0:
            raise InvariantError(self.t, f"pair {bad}: degenerate vTx-vRx separation")
        return geometry, H, H * self._fading()

    def step(self) -> SlotMetrics:
        """Run one scheduling slot and return its metrics."""
        cfg, t, b = self.cfg, self.t, self.budget
        geometry, H, g = self.channel_gains()
        if self.mobility_trace is not None:
            write_trace_rows(self.mobility_trace, t, self.fleet, geometry, self.vrx)

        q = self.queues.q.copy()
        dcap = _max_departures_kernel(g, q, b.c_max, self._npi, b.bandwidth, b.packet_size, b.slot)
        bid, intended, c_intended = self._bids(q, g, dcap)

        groups = cluster(self.fleet.vtx, cfg.num_groups, cfg.kernel_width,
                         seed=int(self._cluster_rng.integers(0, 2**63 - 1)),
                         restarts=cfg.kmeans_restarts, max_iter=cfg.kmeans_max_iter,
                         region_side=cfg.region_side)
        winners, tau = _auction_kernel(bid, groups.labels, self._ties(), cfg.num_groups)
        if self.auction_trace is not None:
            for row in AuctionRound(bid, winners, tau, groups.labels).log_rows(t):
                self.auction_trace.write("%d,%d,%d,%r,%r\n" % row)

        theta = winners.astype(np.int64)
        dep = theta * intended
        c = np.where(winners, c_intended, 0.0)
        a = self._arrivals()
        terminated = self._termination() >= cfg.continue_prob
        try:
            post, o, nxt = self.queues.step(theta, dep, a, terminated)
        except QueueContractError as exc:
            raise InvariantError(t, str(exc)) from exc

        self.last_dv = 0.0
        if self.tables is not None:
            lc = cfg.learning
            dv = _update_kernel(self.tables.v_tilde, self.tables.q_factor, self.tables.visit_counts,
                                self._rows, q, theta, dep, c, tau, post, o.astype(float), nxt,
                                self._no_rate, lc.rate_scale, lc.rate_exponent,
                                lc.q_update == "smoothed", cfg.continue_prob, cfg.power_weight)
            self.last_dv = float(dv.max())
        elif self._ewma is not None:
            self._ewma.update(dep)

        u = _utility_kernel(q, c, o, cfg.power_weight)
        bad = _slot_violation(theta, c, groups.labels, b.c_max, cfg.num_groups,
                              self.queues.conservation_gap(), self.queues.q, cfg.max_queue)
        if bad:
            raise InvariantError(t, _VIOLATIONS[bad])
        self.last_terminated = terminated
        self.last_channel = H
        self.last_transcript = Transcript(q, theta, dep, c, tau, post, a, o, nxt)
        self.t += 1
        return SlotMetrics(t, q, c, o, u, tau, theta)


_VIOLATIONS = {
    1: "transmit power above the budget",
    2: "a losing pair transmitted",
    3: "more than one winner in a group",
    4: "queue conservation or bounds broken",
}


@njit(cache=True)
def _utility_kernel(q, c, o, alpha):
    u = np.empty(q.shape[0])
    for k in range(q.shape[0]):
        u[k] = math.exp(-q[k]) + alpha * math.exp(-c[k]) + math.exp(-o[k])
    return u


@njit(cache=True)
def _slot_violation(theta, c, labels, c_max, num_groups, gap, q, q_max):
    per_group = np.zeros(num_groups, dtype=np.int64)
    for k in range(theta.shape[0]):
        if c[k] > c_max * (1.0 + 1e-9):
            return 1
        if theta[k] == 0 and c[k] != 0.0:
            return 2
        if theta[k] == 1:
            per_group[labels[k]] += 1
            if per_group[labels[k]] > 1:
                return 3
        if gap[k] != 0 or q[k] < 0 or q[k] > q_max:
            return 4
    return 0


# -- whole runs ----------------------------------------------------------------

def _segment_returns(ell, terminated, gamma, start):
    """Mean discounted sum of ``ell`` over completed episode segments from slot ``start``.

    ``ell`` and ``terminated`` are (slots, pairs). Segments run from the slot
    after a termination (or ``start``) up to and including the next termination;
    step ``j`` of a segment is weighted ``gamma ** (j + 1)``.
    """
    K = ell.shape[1]
    acc = np.zeros(K)
    disc = np.full(K, gamma)
    total, count = 0.0, 0
    for t in range(start, len(ell)):
        acc += disc * ell[t]
        disc *= gamma
        end = terminated[t]
        if end.any():
            total += acc[end].sum()
            count += int(end.sum())
            acc[end] = 0.0
            disc[end] = gamma
    return total / count if count else None


def run(cfg: ScenarioConfig, seed: int, policy: str | None = None, slots: int | None = None,
        mobility_trace=None, auction_trace=None) -> RunSummary:
    """Simulate ``slots`` (default: the configured horizon) and summarise.

    Time averages cover slots ``warmup_slots .. T-1``; a ``slots`` override
    shorter than the warmup shrinks the warmup to keep at least one slot.
    """
    if slots is not None:
        cfg = cfg.replace(horizon_slots=int(slots), warmup_slots=min(cfg.warmup_slots, int(slots) - 1))
    sim = Simulation(cfg, seed, policy, mobility_trace, auction_trace)
    T, K, Q = cfg.horizon_slots, cfg.num_pairs, cfg.max_queue
    means = np.zeros((T, 5))
    wins = np.zeros(T)
    sup_dv = np.zeros(T)
    v_trace = np.zeros((T, Q + 1)) if sim.tables is not None else np.zeros((0, 0))
    ell = np.zeros((T, K))
    ended = np.zeros((T, K), dtype=bool)
    q_hist = np.zeros((T, K), dtype=np.int64)
    for t in range(T):
        m = sim.step()
        means[t] = m.mean_vector()
        wins[t] = m.theta.sum()
        sup_dv[t] = sim.last_dv
        if sim.tables is not None:
            v_trace[t] = sim.tables.v_tilde[0]
        ell[t] = m.u - m.tau
        ended[t] = sim.last_terminated
        q_hist[t] = m.q
    series = {name: means[:, i].copy() for i, name in enumerate(METRIC_NAMES)}
    series["wins"] = wins
    series["sup_dv"] = sup_dv
    w = cfg.warmup_slots
    averages = {name: float(series[name][w:].mean()) for name in METRIC_NAMES}
    conv = None
    if sim.tables is not None:
        lc = cfg.learning
        conv = first_quiet_slot(sup_dv, lc.convergence_epsilon, lc.convergence_window)
    return RunSummary(
        config=cfg.to_dict(), seed=int(seed), policy=sim.policy, series=series, v_trace=v_trace,
        averages=averages, convergence_slot=conv,
        empirical_return=_segment_returns(ell, ended, cfg.continue_prob, w),
        queue_distribution=measure_queue_distribution(q_hist[w:], Q))


def _run_one(args):
    cfg, seed, policy = args
    return run(cfg, seed, policy)


def aggregate(summaries) -> dict[str, float]:
    """Mean and sample standard deviation of the post-warmup averages across runs."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([s.averages[name] for s in summaries])
        out[name] = float(vals.mean())
        out[name.replace("mean_", "std_")] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def run_experiment(cfg: ScenarioConfig, seeds, policy: str | None = None, jobs: int = 1):
    """Independent runs over ``seeds``; returns ``(summaries, aggregate)``."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    tasks = [(cfg, s, policy) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(_run_one, tasks))
    else:
        summaries = [_run_one(task) for task in tasks]
    return summaries, aggregate(summaries)


def sweep(cfg: ScenarioConfig, param: str, values, seeds, policy: str | None = None, jobs: int = 1):
    """One aggregate row per value of ``param``, all other settings held fixed."""
    rows = []
    for value in values:
        _, agg = run_experiment(with_overrides(cfg, {param: value}), seeds, policy, jobs)
        rows.append({"param": value, **agg})
    return rows
