"""Manhattan-grid mobility of vTx/vRx pairs and link-geometry classification.

Roads run along every grid line, including the region boundary. Each road
carries two one-way lanes offset by half a lane width to the right of the
direction of travel. A receiver trails its transmitter along the
transmitter's own path at a fixed arc distance, so it turns exactly where
the transmitter turned.

Because consecutive turning points are at least ``spacing - lane_width``
apart and the pair distance is shorter than that, a trail holds at most one
corner; the fleet stores that corner instead of a full path history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

LOS, WLOS, NLOS = 0, 1, 2
GEOMETRY_NAMES = ("LOS", "WLOS", "NLOS")

# headings: east, north, west, south
DIRS = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
_IDIRS = DIRS.astype(np.int64)
STRAIGHT, LEFT, RIGHT, UTURN = 0, 1, 2, 3
_TURN_OFFSET = (0, 1, 3, 2)  # heading increment for each exit kind


class MobilityConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridMap:
    side: float
    n: int
    lane_width: float

    @classmethod
    def from_config(cls, cfg) -> "GridMap":
        return cls(cfg.region_side, cfg.num_intersections_per_axis, cfg.lane_width)

    @property
    def coords(self) -> np.ndarray:
        return np.linspace(0.0, self.side, self.n)

    @property
    def spacing(self) -> float:
        return self.side / (self.n - 1)

    @property
    def min_event_spacing(self) -> float:
        """Shortest path length between two consecutive turning points."""
        return self.spacing - self.lane_width

    @property
    def bounds(self) -> tuple[float, float]:
        # lanes of the boundary roads sit half a lane outside [0, side]
        half = self.lane_width / 2.0
        return -half, self.side + half

    def lane_offset(self, heading):
        return (self.lane_width / 2.0) * DIRS[(np.asarray(heading) + 3) % 4]

    def node_xy(self, node) -> np.ndarray:
        return np.asarray(node, dtype=float) * self.spacing

    def has_node(self, i, j) -> bool:
        return 0 <= i < self.n and 0 <= j < self.n

    def lawful_exits(self, node, heading) -> np.ndarray:
        """Which of (straight, left, right) lead to an existing road."""
        i, j = node
        out = np.zeros(3, dtype=bool)
        for kind in (STRAIGHT, LEFT, RIGHT):
            di, dj = _IDIRS[(heading + _TURN_OFFSET[kind]) % 4]
            out[kind] = self.has_node(i + di, j + dj)
        return out

    def turn_point(self, node, heading, exit_heading) -> np.ndarray:
        """Where a vehicle on ``heading`` leaves its lane for ``exit_heading``."""
        p = self.node_xy(node) + self.lane_offset(heading)
        if exit_heading != heading:
            p = p + self.lane_offset(exit_heading)
        return p

    def centerline_distance(self, points) -> np.ndarray:
        """Distance from each point to the nearest lane centerline."""
        points = np.atleast_2d(points)
        half = self.lane_width / 2.0
        lines = np.concatenate([self.coords - half, self.coords + half])
        lo, hi = self.bounds
        dist_h = np.abs(points[:, 1, None] - lines[None, :]).min(axis=1)
        dist_v = np.abs(points[:, 0, None] - lines[None, :]).min(axis=1)
        inside_x = (points[:, 0] >= lo - 1e-9) & (points[:, 0] <= hi + 1e-9)
        inside_y = (points[:, 1] >= lo - 1e-9) & (points[:, 1] <= hi + 1e-9)
        dist_h = np.where(inside_x, dist_h, np.inf)
        dist_v = np.where(inside_y, dist_v, np.inf)
        return np.minimum(dist_h, dist_v)


def choose_exit(rng: np.random.Generator, turn_probs, lawful) -> int:
    """Draw STRAIGHT/LEFT/RIGHT from ``turn_probs`` renormalised over lawful exits.

    Falls back to UTURN only when no other exit exists.
    """
    p = np.asarray(turn_probs, dtype=float) * np.asarray(lawful, dtype=bool)
    total = p.sum()
    if total <= 0.0:
        if np.any(lawful):
            # every lawful exit has zero probability; pick the first lawful one
            return int(np.flatnonzero(lawful)[0])
        return UTURN
    u = rng.random() * total
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), 2))


@dataclass(frozen=True)
class VuePairKinematics:
    vtx_position: tuple[float, float]
    vrx_position: tuple[float, float]
    heading: int
    vrx_heading: int
    trail: tuple[tuple[float, float], ...]  # waypoints from vRx to vTx

    @property
    def trail_length(self) -> float:
        pts = np.asarray(self.trail)
        return float(np.abs(np.diff(pts, axis=0)).sum())


@njit(cache=True)
def _vrx_kernel(vtx, heading, corner, prev_heading, since_turn, phi):
    # phi behind the vTx along its own path: straight back, or back past the last corner
    out = np.empty_like(vtx)
    for k in range(vtx.shape[0]):
        if since_turn[k] >= phi:
            h, base, back = heading[k], vtx[k], phi
        else:
            h, base, back = prev_heading[k], corner[k], phi - since_turn[k]
        out[k, 0] = base[0] - back * _IDIRS[h, 0]
        out[k, 1] = base[1] - back * _IDIRS[h, 1]
    return out


class Fleet:
    """Kinematic state of all pairs as parallel arrays."""

    def __init__(self, num_pairs: int, phi: float):
        self.phi = float(phi)
        self.vtx = np.zeros((num_pairs, 2))
        self.heading = np.zeros(num_pairs, dtype=np.int64)
        self.corner = np.zeros((num_pairs, 2))
        self.prev_heading = np.zeros(num_pairs, dtype=np.int64)
        self.since_turn = np.zeros(num_pairs)
        self.node = np.zeros((num_pairs, 2), dtype=np.int64)
        self.next_heading = np.zeros(num_pairs, dtype=np.int64)
        self.target = np.zeros((num_pairs, 2))
        self.crossings = []  # optional log of (pair, node, heading, exit kind)
        self.record_crossings = False

    def __len__(self):
        return len(self.heading)

    @property
    def vrx(self) -> np.ndarray:
        return _vrx_kernel(self.vtx, self.heading, self.corner, self.prev_heading,
                           self.since_turn, self.phi)

    @property
    def vrx_heading(self) -> np.ndarray:
        return np.where(self.since_turn >= self.phi, self.heading, self.prev_heading)

    def pair(self, k: int) -> VuePairKinematics:
        vtx = tuple(map(float, self.vtx[k]))
        vrx = tuple(map(float, self.vrx[k]))
        if self.since_turn[k] >= self.phi:
            trail = (vrx, vtx)
        else:
            trail = (vrx, tuple(map(float, self.corner[k])), vtx)
        return VuePairKinematics(vtx, vrx, int(self.heading[k]), int(self.vrx_heading[k]), trail)

    def copy(self) -> "Fleet":
        new = Fleet.__new__(Fleet)
        new.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                             for k, v in self.__dict__.items()})
        new.crossings = list(self.crossings)
        return new


def _plan_next(fleet: Fleet, k: int, grid: GridMap, rng, turn_probs) -> None:
    node = fleet.node[k]
    h = int(fleet.heading[k])
    kind = choose_exit(rng, turn_probs, grid.lawful_exits(node, h))
    h_next = (h + _TURN_OFFSET[kind]) % 4
    fleet.next_heading[k] = h_next
    fleet.target[k] = grid.turn_point(node, h, h_next)
    if fleet.record_crossings:
        fleet.crossings.append((k, (int(node[0]), int(node[1])), h, kind))


def initialize_fleet(cfg, grid: GridMap, rngs) -> Fleet:
    """Place ``cfg.num_pairs`` pairs uniformly on lanes, receivers trailing by ``phi``.

    ``rngs[k]`` is the mobility generator of pair ``k``.
    """
    phi = cfg.pair_distance
    if phi >= grid.min_event_spacing:
        raise MobilityConfigError(
            f"pair_distance {phi} m does not fit between intersections "
            f"({grid.min_event_spacing} m of straight lane)")
    K = cfg.num_pairs
    fleet = Fleet(K, phi)
    side, n, w = grid.side, grid.n, grid.lane_width
    for k in range(K):
        rng = rngs[k]
        road = int(rng.integers(0, n))
        h = int(rng.integers(0, 4))
        s = rng.uniform(phi, side - w)  # arc length from the lane's entry edge
        d = DIRS[h]
        start = 0.0 if d.sum() > 0 else side
        along = start + s * d.sum()
        centre = np.array([along, grid.coords[road]]) if h % 2 == 0 else np.array([grid.coords[road], along])
        vtx = centre + grid.lane_offset(h)
        fleet.vtx[k] = vtx
        fleet.heading[k] = h
        fleet.prev_heading[k] = h
        fleet.since_turn[k] = phi
        fleet.corner[k] = vtx - phi * d
        # first intersection whose earliest turning point is still ahead
        pos_along = vtx @ d
        idx = range(n) if d.sum() > 0 else range(n - 1, -1, -1)
        for m in idx:
            node = (m, road) if h % 2 == 0 else (road, m)
            if grid.node_xy(node) @ d - w / 2.0 > pos_along:
                break
        fleet.node[k] = node
        _plan_next(fleet, k, grid, rng, cfg.turn_probs)
    return fleet


@njit(cache=True)
def _move_kernel(vtx, heading, target, since_turn, step):
    # straight motion; returns pairs that reached their turning point and the remaining distance
    n = vtx.shape[0]
    hit = np.empty(n, dtype=np.int64)
    rem = np.empty(n)
    m = 0
    for k in range(n):
        dx, dy = _IDIRS[heading[k], 0], _IDIRS[heading[k], 1]
        remaining = (target[k, 0] - vtx[k, 0]) * dx + (target[k, 1] - vtx[k, 1]) * dy
        if remaining <= step:
            hit[m] = k
            rem[m] = remaining
            m += 1
        vtx[k, 0] += step * dx
        vtx[k, 1] += step * dy
        since_turn[k] += step
    return hit[:m], rem[:m]


def advance(fleet: Fleet, grid: GridMap, rngs, step: float, turn_probs) -> Fleet:
    """Move every vTx ``step`` metres along its lane (in place); returns ``fleet``.

    A vTx reaching its planned turning point takes the pre-drawn exit and
    draws the exit for the next intersection from its own generator.
    """
    if not 0.0 <= step < grid.min_event_spacing:
        raise MobilityConfigError("step must be shorter than the distance between turning points")
    hit, remaining = _move_kernel(fleet.vtx, fleet.heading, fleet.target, fleet.since_turn, float(step))
    for k, rem in zip(hit, remaining):
        over = step - rem
        h_new = int(fleet.next_heading[k])
        fleet.corner[k] = fleet.target[k]
        fleet.prev_heading[k] = fleet.heading[k]
        fleet.heading[k] = h_new
        fleet.vtx[k] = fleet.target[k] + over * DIRS[h_new]
        fleet.since_turn[k] = over
        fleet.node[k] += _IDIRS[h_new]
        _plan_next(fleet, k, grid, rngs[k], turn_probs)
    return fleet


@njit(cache=True)
def _classify_kernel(vtx, vrx, h_tx, h_rx, half_w, phi0, tol):
    n = vtx.shape[0]
    geometry = np.empty(n, dtype=np.int64)
    adx = np.empty(n)
    ady = np.empty(n)
    for k in range(n):
        dx = abs(vtx[k, 0] - vrx[k, 0])
        dy = abs(vtx[k, 1] - vrx[k, 1])
        adx[k] = dx
        ady[k] = dy
        ht, hr = h_tx[k], h_rx[k]
        tx_horiz = ht % 2 == 0
        if tx_horiz == (hr % 2 == 0):
            perp = dy if tx_horiz else dx
            geometry[k] = LOS if (ht == hr and perp < tol) else NLOS
            continue
        # perpendicular lanes: the shared intersection sits on both road centrelines
        if tx_horiz:
            road_y = vtx[k, 1] - half_w * _IDIRS[(ht + 3) % 4, 1]
            road_x = vrx[k, 0] - half_w * _IDIRS[(hr + 3) % 4, 0]
        else:
            road_y = vrx[k, 1] - half_w * _IDIRS[(hr + 3) % 4, 1]
            road_x = vtx[k, 0] - half_w * _IDIRS[(ht + 3) % 4, 0]
        near = min(math.hypot(vtx[k, 0] - road_x, vtx[k, 1] - road_y),
                   math.hypot(vrx[k, 0] - road_x, vrx[k, 1] - road_y))
        geometry[k] = WLOS if near <= phi0 else NLOS
    return geometry, adx, ady


def classify_arrays(vtx, vrx, h_tx, h_rx, grid: GridMap, phi0: float, tol: float = 1e-6):
    """Vectorised link classification.

    Returns ``(geometry, |dx|, |dy|)`` arrays. LOS needs both ends on the same
    lane; WLOS needs perpendicular lanes with at least one end within
    ``phi0`` of the intersection the two lanes share; anything else is NLOS.
    """
    vtx = np.ascontiguousarray(np.atleast_2d(vtx), dtype=float)
    vrx = np.ascontiguousarray(np.atleast_2d(vrx), dtype=float)
    h_tx = np.ascontiguousarray(np.atleast_1d(h_tx), dtype=np.int64)
    h_rx = np.ascontiguousarray(np.atleast_1d(h_rx), dtype=np.int64)
    return _classify_kernel(vtx, vrx, h_tx, h_rx, grid.lane_width / 2.0, float(phi0), float(tol))


@dataclass(frozen=True)
class LinkGeometry:
    kind: int
    dx: float
    dy: float

    @property
    def name(self) -> str:
        return GEOMETRY_NAMES[self.kind]


def classify(pair: VuePairKinematics, grid: GridMap, phi0: float) -> LinkGeometry:
    g, dx, dy = classify_arrays(pair.vtx_position, pair.vrx_position,
                                pair.heading, pair.vrx_heading, grid, phi0)
    return LinkGeometry(int(g[0]), float(dx[0]), float(dy[0]))


def classify_fleet(fleet: Fleet, grid: GridMap, phi0: float):
    return classify_arrays(fleet.vtx, fleet.vrx, fleet.heading, fleet.vrx_heading, grid, phi0)


def write_trace_rows(fh, slot: int, fleet: Fleet, geometry, vrx=None) -> None:
    """Append one delimited row per pair: slot, pair, x1, y1, x2, y2, geometry."""
    vrx = fleet.vrx if vrx is None else vrx
    for k in range(len(fleet)):
        fh.write(f"{slot},{k},{fleet.vtx[k, 0]:.6f},{fleet.vtx[k, 1]:.6f},"
                 f"{vrx[k, 0]:.6f},{vrx[k, 1]:.6f},{GEOMETRY_NAMES[geometry[k]]}\n")


TRACE_HEADER = "slot,pair,x1,y1,x2,y2,geometry\n"
