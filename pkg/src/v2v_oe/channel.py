"""Path loss, fading and the power / departure link budget.

All functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .mobility import LOS, NLOS, WLOS


class DegenerateLinkError(ValueError):
    pass


@njit(cache=True)
def _path_loss_kernel(geometry, dx, dy, rho, xi, e):
    out = np.empty(geometry.shape[0])
    for k in range(geometry.shape[0]):
        a, b = abs(dx[k]), abs(dy[k])
        kind = geometry[k]
        if kind == LOS:
            sep, coeff = math.sqrt(a * a + b * b), rho
        elif kind == WLOS:
            sep, coeff = a + b, rho
        elif kind == NLOS:
            sep, coeff = a * b, xi
        else:
            sep, coeff = np.nan, np.nan
        if not sep > 0:
            return out, k
        out[k] = coeff * sep ** (-e)
    return out, -1


def path_loss(geometry, dx, dy, rho, xi, e):
    """Linear path-loss gain for link classes ``geometry`` with offsets ``dx``, ``dy``.

    LOS uses the Euclidean separation, WLOS the Manhattan separation and NLOS
    the product of the axis offsets, each raised to ``-e``.
    """
    geometry, dx, dy = np.broadcast_arrays(np.asarray(geometry, dtype=np.int64),
                                           np.asarray(dx, dtype=float), np.asarray(dy, dtype=float))
    shape = geometry.shape
    out, bad = _path_loss_kernel(geometry.ravel(), dx.ravel(), dy.ravel(),
                                 float(rho), float(xi), float(e))
    if bad >= 0:
        raise DegenerateLinkError(f"zero or undefined vTx-vRx separation for link {bad}")
    return out.reshape(shape) if shape else float(out[0])


def draw_fading(rng: np.random.Generator, size=None, model: str = "exponential"):
    """Fading power gain.

    ``exponential`` is the squared unit-mean Rayleigh amplitude (power gain);
    ``rayleigh`` returns the raw unit-scale amplitude instead.
    """
    if model == "exponential":
        return rng.standard_exponential(size)
    if model == "rayleigh":
        return rng.rayleigh(1.0, size)
    raise ValueError(f"unknown fading model {model!r}")


def required_power(g, theta, departures, noise, bandwidth, psd, packet_size, slot):
    """Transmit power (W) to deliver ``theta * departures`` packets in one slot."""
    n = np.asarray(theta) * np.asarray(departures)
    return (noise + bandwidth * psd) / np.asarray(g, dtype=float) * np.expm1(
        math.log(2.0) * packet_size / (bandwidth * slot) * n)


@njit(cache=True)
def _max_departures_kernel(g, q, c_max, npi, bandwidth, packet_size, slot):
    out = np.empty(g.shape[0], dtype=np.int64)
    ln2 = math.log(2.0)
    scale = ln2 * packet_size / (bandwidth * slot)
    for k in range(g.shape[0]):
        cap = math.floor(slot * bandwidth * math.log2(1.0 + g[k] * c_max / npi) / packet_size)
        cap = max(cap, 0.0)
        if npi / g[k] * math.expm1(scale * (cap + 1.0)) <= c_max:
            cap += 1.0
        elif cap > 0 and npi / g[k] * math.expm1(scale * cap) > c_max:
            cap -= 1.0
        out[k] = min(q[k], int(cap))
    return out


def max_departures(g, q, c_max, noise, bandwidth, psd, packet_size, slot):
    """Largest number of queued packets deliverable within ``c_max``.

    The floor of the Shannon-rate bound is corrected by one step either way so
    that ``required_power(D) <= c_max < required_power(D + 1)`` holds whenever
    ``D < q``.
    """
    g, q = np.broadcast_arrays(np.asarray(g, dtype=float), np.asarray(q, dtype=np.int64))
    out = _max_departures_kernel(np.ascontiguousarray(g.ravel()), np.ascontiguousarray(q.ravel()),
                                 float(c_max), noise + bandwidth * psd, float(bandwidth),
                                 float(packet_size), float(slot))
    return out.reshape(g.shape) if g.shape else int(out[0])


class LinkBudget:
    """Channel constants of a scenario bound for repeated evaluation."""

    def __init__(self, cfg):
        self.noise = cfg.interference
        self.bandwidth = cfg.bandwidth
        self.psd = cfg.noise_psd
        self.packet_size = cfg.packet_size
        self.slot = cfg.slot_duration
        self.c_max = cfg.max_power

    def power(self, g, theta, departures):
        return required_power(g, theta, departures, self.noise, self.bandwidth,
                              self.psd, self.packet_size, self.slot)

    def max_departures(self, g, q):
        return max_departures(g, q, self.c_max, self.noise, self.bandwidth,
                              self.psd, self.packet_size, self.slot)
