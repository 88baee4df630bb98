"""Per-pair packet queues: arrivals, departures, overflow and termination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


class QueueContractError(RuntimeError):
    """A scheduler asked for more departures than the queue holds."""


@dataclass(frozen=True)
class SlotQueueOutcome:
    post_decision: int
    arrivals: int
    overflow: int
    terminated: bool
    next_length: int


def draw_arrivals(rng: np.random.Generator, lam: float, size=None):
    return rng.poisson(lam, size)


def draw_termination(rng: np.random.Generator, gamma: float, size=None):
    """True with probability ``1 - gamma``."""
    return rng.random(size) >= gamma


def step_queue(q: int, theta: int, departures: int, arrivals: int,
               terminated: bool, q_max: int) -> SlotQueueOutcome:
    if departures < 0 or departures > q:
        raise QueueContractError(f"departures {departures} exceed queue length {q}")
    post = q - theta * departures
    overflow = max(post + arrivals - q_max, 0)
    nxt = 0 if terminated else min(post + arrivals, q_max)
    return SlotQueueOutcome(post, arrivals, overflow, bool(terminated), nxt)


@njit(cache=True)
def _step_kernel(q, theta, departures, arrivals, terminated, q_max,
                 arrived, departed, dropped, reset_losses):
    n = q.shape[0]
    for k in range(n):
        if departures[k] < 0 or departures[k] > q[k]:
            return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), k
    post = np.empty(n, dtype=np.int64)
    overflow = np.empty(n, dtype=np.int64)
    for k in range(n):
        sent = theta[k] * departures[k]
        post[k] = q[k] - sent
        filled = post[k] + arrivals[k]
        overflow[k] = max(filled - q_max, 0)
        kept = min(filled, q_max)
        arrived[k] += arrivals[k]
        departed[k] += sent
        dropped[k] += overflow[k]
        if terminated[k]:
            reset_losses[k] += kept
            q[k] = 0
        else:
            q[k] = kept
    return post, overflow, -1


class QueueBank:
    """Queue lengths and conservation counters for all pairs."""

    def __init__(self, num_pairs: int, q_max: int):
        self.q_max = int(q_max)
        self.q = np.zeros(num_pairs, dtype=np.int64)
        self.arrived = np.zeros(num_pairs, dtype=np.int64)
        self.departed = np.zeros(num_pairs, dtype=np.int64)
        self.dropped = np.zeros(num_pairs, dtype=np.int64)
        self.reset_losses = np.zeros(num_pairs, dtype=np.int64)

    def step(self, theta, departures, arrivals, terminated):
        """Apply one slot to every queue; returns ``(post_decision, overflow, next)``."""
        post, overflow, bad = _step_kernel(
            self.q, np.asarray(theta, dtype=np.int64), np.asarray(departures, dtype=np.int64),
            np.asarray(arrivals, dtype=np.int64), np.asarray(terminated, dtype=np.bool_), self.q_max,
            self.arrived, self.departed, self.dropped, self.reset_losses)
        if bad >= 0:
            raise QueueContractError(
                f"pair {bad}: departures {departures[bad]} exceed queue length {self.q[bad]}")
        return post, overflow, self.q.copy()

    def conservation_gap(self) -> np.ndarray:
        return self.arrived - (self.departed + self.dropped + self.reset_losses + self.q)

    def check(self) -> None:
        gap = self.conservation_gap()
        if np.any(gap != 0) or np.any(self.q < 0) or np.any(self.q > self.q_max):
            bad = int(np.flatnonzero((gap != 0) | (self.q < 0) | (self.q > self.q_max))[0])
            raise AssertionError(f"queue invariant broken for pair {bad}")
