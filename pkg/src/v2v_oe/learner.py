"""Online learning of post-decision queue-state values and the bids derived from them.

Every agent keeps a value table over post-decision queue lengths and a
Q-factor table over (queue length, allocation, departures). At each slot it
bids the value of winning the frequency resource, schedules the departures
with the best Q-factor, and after the slot refreshes both tables from what it
observed. All functions operate on a batch of agents at once; ``idx`` selects
which rows of the tables belong to the agents in the arrays passed in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .queueing import QueueContractError


def u_queue(q):
    return np.exp(-np.asarray(q, dtype=float))


def u_power(c):
    return np.exp(-np.asarray(c, dtype=float))


def u_overflow(o):
    return np.exp(-np.asarray(o, dtype=float))


def utility(q, c, o, alpha):
    return u_queue(q) + alpha * u_power(c) + u_overflow(o)


@dataclass
class ValueTables:
    v_tilde: np.ndarray        # (agents, q_max + 1)
    q_factor: np.ndarray       # (agents, q_max + 1, 2, q_max + 1)
    visit_counts: np.ndarray   # (agents, q_max + 1)

    @classmethod
    def fresh(cls, num_agents: int, q_max: int, init_v: float = 0.0, init_q: float = 0.0):
        n = q_max + 1
        return cls(np.full((num_agents, n), float(init_v)),
                   np.full((num_agents, n, 2, n), float(init_q)),
                   np.zeros((num_agents, n), dtype=np.int64))

    @property
    def q_max(self) -> int:
        return self.v_tilde.shape[1] - 1

    def copy(self) -> "ValueTables":
        return ValueTables(self.v_tilde.copy(), self.q_factor.copy(), self.visit_counts.copy())

    def export(self, path) -> None:
        """Write a delimited snapshot: one row per table entry."""
        lines = ["table,agent,q,theta,d,value"]
        for k, row in enumerate(self.v_tilde):
            for q, v in enumerate(row):
                lines.append(f"v,{k},{q},,,{float(v)!r}")
        for k, row in enumerate(self.visit_counts):
            for q, v in enumerate(row):
                lines.append(f"n,{k},{q},,,{int(v)}")
        for (k, q, th, d), v in np.ndenumerate(self.q_factor):
            lines.append(f"q,{k},{q},{th},{d},{float(v)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ValueTables":
        rows = [line.split(",") for line in Path(path).read_text().splitlines()[1:] if line]
        agents = 1 + max(int(r[1]) for r in rows)
        q_max = max(int(r[2]) for r in rows)
        tables = cls.fresh(agents, q_max)
        for table, k, q, th, d, value in rows:
            k, q = int(k), int(q)
            if table == "v":
                tables.v_tilde[k, q] = float(value)
            elif table == "n":
                tables.visit_counts[k, q] = int(value)
            else:
                tables.q_factor[k, q, int(th), int(d)] = float(value)
        return tables


@dataclass(frozen=True)
class SlotDecision:
    bid: np.ndarray
    departures: np.ndarray
    power: np.ndarray


@dataclass(frozen=True)
class Transcript:
    """What each agent observed during one slot."""
    q: np.ndarray
    theta: np.ndarray
    departures: np.ndarray
    power: np.ndarray
    payment: np.ndarray
    post_decision: np.ndarray
    arrivals: np.ndarray
    overflow: np.ndarray
    next_q: np.ndarray


def _rows(tables, idx):
    return np.arange(tables.v_tilde.shape[0]) if idx is None else np.asarray(idx)


@njit(cache=True)
def _greedy_departures(qf, rows, q, dcap):
    out = np.zeros(rows.shape[0], dtype=np.int64)
    for i in range(rows.shape[0]):
        r, qi = rows[i], q[i]
        best = 0
        for d in range(1, min(dcap[i], qi) + 1):
            if qf[r, qi, 1, d] > qf[r, qi, 1, best]:
                best = d
        out[i] = best
    return out


def select_departures(tables: ValueTables, q, theta, dcap, idx=None, explore=None):
    """Departures maximising the Q-factor among feasible counts ``0..dcap``.

    Ties go to the smallest count. Agents with ``theta == 0`` get 0.
    ``explore`` is an optional boolean mask of agents that instead pick
    uniformly, given as ``(mask, uniforms)``.
    """
    rows = _rows(tables, idx).astype(np.int64)
    q = np.asarray(q, dtype=np.int64)
    theta = np.broadcast_to(np.asarray(theta), q.shape)
    dcap = np.minimum(np.broadcast_to(np.asarray(dcap, dtype=np.int64), q.shape), q)
    best = _greedy_departures(tables.q_factor, rows, q, np.ascontiguousarray(dcap))
    if explore is not None:
        mask, u = explore
        best = np.where(mask, np.minimum((u * (dcap + 1)).astype(np.int64), dcap), best)
    return np.where(theta == 1, best, 0)


def compute_bid(tables: ValueTables, q, g, budget, alpha, gamma, idx=None, explore=None) -> SlotDecision:
    """Bid for the resource assuming a win, with the departures that win would use."""
    rows = _rows(tables, idx)
    q = np.asarray(q)
    dcap = budget.max_departures(g, q)
    d = select_departures(tables, q, 1, dcap, idx=idx, explore=explore)
    c = budget.power(g, 1, d)
    bid = u_queue(q) + alpha * u_power(c) + tables.v_tilde[rows, q - d] / gamma
    return SlotDecision(bid, d, c)


def best_q_factor(tables: ValueTables, q, idx=None):
    """max over (theta, D) of the Q-factor at queue length ``q``.

    Losing leaves only D = 0; winning allows any D <= q. Power feasibility is
    not imposed here since the fading of the next slot is not yet known.
    """
    rows = _rows(tables, idx)
    q = np.asarray(q)
    win = tables.q_factor[rows, q, 1, :]
    d = np.arange(win.shape[1])
    win_best = np.where(d[None, :] <= q[:, None], win, -np.inf).max(axis=1)
    return np.maximum(tables.q_factor[rows, q, 0, 0], win_best)


@njit(cache=True)
def _update_kernel(v, qf, visits, rows, q, theta, dep, power, payment, post, overflow, next_q,
                   rate, rate_scale, rate_exponent, smoothed, gamma, alpha):
    dv = np.empty(rows.shape[0])
    for i in range(rows.shape[0]):
        r, p, nq = rows[i], post[i], next_q[i]
        if rate.shape[0] > 0:
            zeta = rate[i]
        else:
            zeta = rate_scale / (1.0 + visits[r, p]) ** rate_exponent
        visits[r, p] += 1
        best = qf[r, nq, 0, 0]
        for d in range(nq + 1):
            if qf[r, nq, 1, d] > best:
                best = qf[r, nq, 1, d]
        old = v[r, p]
        new = (1.0 - zeta) * old + zeta * gamma * (math.exp(-overflow[i]) + best)
        v[r, p] = new
        fresh = gamma * (math.exp(-q[i]) + alpha * math.exp(-power[i]) - payment[i]) + new
        th = theta[i]
        d = dep[i] * th
        if smoothed:
            fresh = (1.0 - zeta) * qf[r, q[i], th, d] + zeta * fresh
        qf[r, q[i], th, d] = fresh
        dv[i] = abs(new - old)
    return dv


def observe_and_update(tables: ValueTables, tr: Transcript, learning, gamma, alpha,
                       idx=None, rate=None):
    """Apply one slot of experience in place.

    The value of the visited post-decision state moves towards
    ``gamma * (u_overflow + best Q-factor at the next queue length)`` with a
    visit-count step size; the Q-factor of the action taken is then rewritten
    from the fresh value. A loser's entry is always (theta=0, D=0).
    ``rate`` overrides the step size (tests).
    Returns the absolute value-table change per agent.
    """
    rows = _rows(tables, idx).astype(np.int64)
    q = np.asarray(tr.q, dtype=np.int64)
    theta = np.asarray(tr.theta, dtype=np.int64)
    dep = np.asarray(tr.departures, dtype=np.int64)
    post = np.asarray(tr.post_decision, dtype=np.int64)
    broken = (dep > q) | (post != q - theta * dep)
    if np.any(broken):
        raise QueueContractError(f"inconsistent transcript for agent {int(np.flatnonzero(broken)[0])}")
    n = len(rows)
    rate = np.zeros(0) if rate is None else np.broadcast_to(np.asarray(rate, dtype=float), (n,)).copy()

    def f64(x):
        return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=float), (n,)))

    return _update_kernel(tables.v_tilde, tables.q_factor, tables.visit_counts, rows, q, theta, dep,
                          f64(tr.power), f64(tr.payment), post, f64(tr.overflow),
                          np.asarray(tr.next_q, dtype=np.int64), rate,
                          float(learning.rate_scale), float(learning.rate_exponent),
                          learning.q_update == "smoothed", float(gamma), float(alpha))


def measure_queue_distribution(history, q_max: int, window=None) -> np.ndarray:
    """Empirical share of (slot, peer) samples at each queue length.

    ``history`` is a (slots, peers) array; ``window`` keeps only the last
    ``window`` slots.
    """
    h = np.asarray(history)
    if h.ndim == 1:
        h = h[:, None]
    if window is not None:
        h = h[-window:]
    if h.size == 0:
        raise ValueError("empty window")
    counts = np.bincount(h.ravel(), minlength=q_max + 1)
    return counts / h.size


# -- frozen single-agent environment -----------------------------------------

@dataclass
class FrozenRun:
    tables: ValueTables
    q: np.ndarray
    departures: np.ndarray
    power: np.ndarray
    post_decision: np.ndarray
    overflow: np.ndarray
    next_q: np.ndarray


@njit(cache=True)
def _frozen_kernel(v, qf, visits, dcap, power, uniforms, eps, arrivals, q0, payment,
                   rate_scale, rate_exponent, smoothed, gamma, alpha, out, out_power):
    # the single-agent special case of compute_bid + observe_and_update, one slot per row
    q_max = v.shape[1] - 1
    rows = np.zeros(1, dtype=np.int64)
    no_rate = np.zeros(0)
    q = q0
    for t in range(out.shape[0]):
        cap = min(dcap[q], q)
        d = _greedy_departures(qf, rows, np.array([q]), np.array([cap]))[0]
        if uniforms.shape[0] > 0 and uniforms[t, 0] < eps:
            d = min(int(uniforms[t, 1] * (cap + 1)), cap)
        post = q - d
        o = max(post + arrivals - q_max, 0)
        nxt = min(post + arrivals, q_max)
        _update_kernel(v, qf, visits, rows, np.array([q]), np.array([1]), np.array([d]),
                       np.array([power[d]]), np.array([payment]), np.array([post]),
                       np.array([float(o)]), np.array([nxt]), no_rate,
                       rate_scale, rate_exponent, smoothed, gamma, alpha)
        out[t, 0], out[t, 1], out[t, 2], out[t, 3], out[t, 4] = q, d, post, o, nxt
        out_power[t] = power[d]
        q = nxt


def train_frozen(budget, g: float, arrivals: int, q_max: int, learning, gamma: float,
                 alpha: float, iterations: int, payment: float = 0.0,
                 rng: np.random.Generator | None = None, tables: ValueTables | None = None,
                 q0: int = 0) -> FrozenRun:
    """One agent that always wins, sees channel ``g`` and ``arrivals`` packets every slot.

    No termination occurs. Exploration follows ``learning.exploration`` and
    needs ``rng`` when positive.
    """
    tables = tables if tables is not None else ValueTables.fresh(
        1, q_max, learning.init_value_v, learning.init_value_q)
    eps = learning.exploration
    levels = np.arange(q_max + 1)
    dcap = np.asarray(budget.max_departures(np.full(q_max + 1, g), levels), dtype=np.int64)
    power = np.asarray(budget.power(g, 1, levels), dtype=float)
    uniforms = rng.random((iterations, 2)) if eps > 0 else np.zeros((0, 2))
    out = np.empty((iterations, 5), dtype=np.int64)
    out_power = np.empty(iterations)
    _frozen_kernel(tables.v_tilde, tables.q_factor, tables.visit_counts, dcap, power, uniforms,
                   float(eps), int(arrivals), int(q0), float(payment),
                   float(learning.rate_scale), float(learning.rate_exponent),
                   learning.q_update == "smoothed", float(gamma), float(alpha), out, out_power)
    return FrozenRun(tables, out[:, 0], out[:, 1], out_power, out[:, 2], out[:, 3], out[:, 4])


def post_decision_returns(run: FrozenRun, gamma: float, alpha: float, payment: float = 0.0):
    """Realised discounted return following each post-decision state of ``run``.

    Matches the value recursion: R_t = gamma * (u_overflow_t + gamma * pre_{t+1} + R_{t+1}),
    where ``pre`` is the slot's queue and power utility net of payment. The tail
    beyond the run is taken as zero.
    """
    pre = u_queue(run.q) + alpha * u_power(run.power) - payment
    u3 = u_overflow(run.overflow)
    out = np.zeros(len(pre))
    acc = nxt_pre = 0.0
    for t in range(len(pre) - 1, -1, -1):
        acc = gamma * (u3[t] + gamma * nxt_pre + acc)
        out[t] = acc
        nxt_pre = pre[t]
    return out
