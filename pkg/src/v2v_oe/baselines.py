"""Comparison policies: Channel-Aware, Queue-Aware and Random bidding.

All three transmit as many queued packets as the power budget allows when
they win and nothing when they lose. Their bid rules are scaled to be of the
same order as the learned bids so that mixed auctions stay competitive.
"""

from __future__ import annotations

import numpy as np

CHANNEL_AWARE = "channel_aware"
QUEUE_AWARE = "queue_aware"
RANDOM = "random"
BASELINES = (CHANNEL_AWARE, QUEUE_AWARE, RANDOM)


def random_bid_scale(alpha: float, gamma: float) -> float:
    """Upper end of random bids: the largest learned bid with zero values."""
    return 1.0 + alpha + 1.0 / gamma


def channel_aware_bid(g, g_ref):
    # the fading magnitude when the path loss is at its nominal value
    return np.asarray(g, dtype=float) / g_ref


def queue_aware_bid(q, dcap, ewma, beta: float = 1.0):
    return np.minimum(q, dcap) + beta * np.asarray(ewma, dtype=float)


def random_bid(uniforms, b_ref: float):
    return np.asarray(uniforms, dtype=float) * b_ref


def baseline_bid(policy: str, q, g, rng, scale_params: dict):
    """Bid of ``policy`` for queue ``q`` and channel ``g``.

    ``scale_params`` carries ``g_ref`` (channel-aware), ``dcap`` and ``ewma``
    (queue-aware) or ``b_ref`` (random). ``rng`` is only used by Random.
    """
    if policy == CHANNEL_AWARE:
        return channel_aware_bid(g, scale_params["g_ref"])
    if policy == QUEUE_AWARE:
        return queue_aware_bid(q, scale_params["dcap"], scale_params.get("ewma", 0.0),
                               scale_params.get("beta", 1.0))
    if policy == RANDOM:
        return random_bid(rng.random(np.shape(q)), scale_params["b_ref"])
    raise ValueError(f"unknown baseline policy {policy!r}")


def baseline_schedule(theta, dcap):
    """Winners send everything the power budget allows; losers send nothing."""
    return np.asarray(theta) * np.asarray(dcap)


class DepartureAverage:
    """Exponentially weighted average of realised departures per agent."""

    def __init__(self, num_agents: int, decay: float = 0.99):
        self.decay = decay
        self.value = np.zeros(num_agents)

    def update(self, departures) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * np.asarray(departures)
