"""Scenario configuration, unit handling and the random-stream plan.

A run is fully determined by a :class:`ScenarioConfig` and a master seed.
Physical quantities are stored in SI units (W, Hz, s, m, bits); values in a
config document may carry a unit suffix (``"40 km/h"``, ``"-68.5 dB"``,
``"500 kHz"``) and are converted when the document is loaded.
"""

from __future__ import annotations

import dataclasses
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(message)
        self.key = key


# -- units -------------------------------------------------------------------

_UNITS: dict[str, tuple[str, float]] = {
    "m": ("length", 1.0),
    "km": ("length", 1e3),
    "m/s": ("speed", 1.0),
    "km/h": ("speed", 1000.0 / 3600.0),
    "hz": ("frequency", 1.0),
    "khz": ("frequency", 1e3),
    "mhz": ("frequency", 1e6),
    "s": ("time", 1.0),
    "ms": ("time", 1e-3),
    "us": ("time", 1e-6),
    "w": ("power", 1.0),
    "mw": ("power", 1e-3),
    "w/hz": ("psd", 1.0),
    "b": ("data", 1.0),
    "bit": ("data", 1.0),
    "bits": ("data", 1.0),
    "kb": ("data", 1e3),
    "kbit": ("data", 1e3),
}

# config key -> physical dimension accepted for unit-suffixed strings
_DIMENSIONS = {
    "region_side": "length",
    "lane_width": "length",
    "pair_distance": "length",
    "intersection_radius": "length",
    "kernel_width": "length",
    "vehicle_speed": "speed",
    "bandwidth": "frequency",
    "slot_duration": "time",
    "interference": "power",
    "max_power": "power",
    "noise_psd": "psd",
    "packet_size": "data",
    "pathloss_exponent_coeff": "ratio",
    "nlos_exponent": "ratio",
}

_QUANTITY = re.compile(r"^\s*([-+]?[0-9.]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z/]+)?\s*$")


def parse_quantity(key: str, value: Any) -> float:
    """Convert ``value`` for config ``key`` into SI (or a linear ratio).

    Plain numbers are taken as already being in SI. Strings may carry a unit;
    ``dB`` is accepted for ratio-valued keys and converted to linear.
    """
    if isinstance(value, bool):
        raise ConfigError(key, f"{key}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(key, f"{key}: expected a number, got {value!r}")
    m = _QUANTITY.match(value)
    if m is None:
        raise ConfigError(key, f"{key}: cannot parse quantity {value!r}")
    number = float(m.group(1))
    unit = (m.group(2) or "").lower()
    if not unit:
        return number
    dim = _DIMENSIONS.get(key)
    if unit == "db":
        if dim != "ratio":
            raise ConfigError(key, f"{key}: dB is only valid for ratios")
        return 10.0 ** (number / 10.0)
    if unit not in _UNITS:
        raise ConfigError(key, f"{key}: unknown unit {m.group(2)!r}")
    udim, factor = _UNITS[unit]
    if dim != udim:
        raise ConfigError(key, f"{key}: unit {m.group(2)!r} is not a {dim}")
    return number * factor


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class LearningConfig:
    rate_scale: float = 0.3
    rate_exponent: float = 0.7
    init_value_v: float = 0.0
    init_value_q: float = 0.0
    convergence_epsilon: float = 1e-3
    convergence_window: int = 100
    # probability of a uniformly random departure choice (0 = pure greedy)
    exploration: float = 0.0
    q_update: str = "verbatim"

    def rate(self, visits):
        """Step size ``rate_scale / (1 + visits) ** rate_exponent``."""
        return self.rate_scale / (1.0 + np.asarray(visits, dtype=float)) ** self.rate_exponent


DEFAULT_PATHLOSS_RHO = 10.0 ** (-68.5 / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    num_pairs: int
    pair_distance: float
    arrival_rate: float
    max_queue: int
    num_groups: int = 15
    region_side: float = 250.0
    num_intersections_per_axis: int = 3
    lane_width: float = 4.0
    vehicle_speed: float = 40.0 * 1000.0 / 3600.0
    intersection_radius: float = 30.0
    pathloss_exponent_coeff: float = DEFAULT_PATHLOSS_RHO
    pathloss_coefficient: float = 1.61
    nlos_exponent: float | None = None
    bandwidth: float = 5e5
    interference: float = 2e-12
    noise_psd: float = 3.98e-21
    slot_duration: float = 9e-3
    continue_prob: float = 0.1
    power_weight: float = 6.0
    packet_size: float = 5000.0
    max_power: float = 2.0
    turn_probs: tuple[float, float, float] = (0.5, 0.25, 0.25)
    horizon_slots: int = 20000
    warmup_slots: int = 1000
    policy: str = "oe"
    fading_model: str = "exponential"
    kernel_width: float | None = None
    kmeans_restarts: int = 5
    kmeans_max_iter: int = 100
    learning: LearningConfig = field(default_factory=LearningConfig)

    def __post_init__(self):
        if self.nlos_exponent is None:
            object.__setattr__(self, "nlos_exponent", self.nlos_bound / 2.0)
        object.__setattr__(self, "turn_probs", tuple(float(p) for p in self.turn_probs))
        validate(self)

    @property
    def nlos_bound(self) -> float:
        """Upper bound on the NLOS coefficient: rho * (phi_0 / 2) ** e."""
        return self.pathloss_exponent_coeff * (self.intersection_radius / 2.0) ** self.pathloss_coefficient

    @property
    def noise_plus_interference(self) -> float:
        return self.interference + self.bandwidth * self.noise_psd

    @property
    def nominal_path_loss(self) -> float:
        return self.pathloss_exponent_coeff * self.pair_distance ** (-self.pathloss_coefficient)

    def replace(self, **changes) -> "ScenarioConfig":
        learning = changes.pop("learning", None)
        lchanges = {k.split(".", 1)[1]: changes.pop(k) for k in list(changes) if k.startswith("learning.")}
        if learning is None:
            learning = self.learning
        if lchanges:
            learning = dataclasses.replace(learning, **lchanges)
        return dataclasses.replace(self, learning=learning, **changes)

    def to_dict(self) -> dict[str, Any]:
        """Flat dotted-key mapping of every field."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "learning":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        for f in dataclasses.fields(self.learning):
            out[f"learning.{f.name}"] = getattr(self.learning, f.name)
        return out


_REQUIRED = ("num_pairs", "pair_distance", "arrival_rate", "max_queue")
_INT_KEYS = {
    "num_pairs", "num_groups", "num_intersections_per_axis", "max_queue",
    "horizon_slots", "warmup_slots", "kmeans_restarts", "kmeans_max_iter",
    "learning.convergence_window",
}
_POSITIVE = (
    "region_side", "lane_width", "vehicle_speed", "pair_distance",
    "intersection_radius", "pathloss_exponent_coeff", "pathloss_coefficient",
    "nlos_exponent", "bandwidth", "interference", "noise_psd", "slot_duration",
    "power_weight", "packet_size", "max_power",
)
POLICIES = ("oe", "channel_aware", "queue_aware", "random")


def _fail(key, msg):
    raise ConfigError(key, msg)


def validate(cfg: ScenarioConfig) -> None:
    """Raise :class:`ConfigError` on the first violated invariant."""
    for key in ("num_pairs", "num_groups", "num_intersections_per_axis", "horizon_slots"):
        if getattr(cfg, key) < 1:
            _fail(key, f"{key} must be a positive integer")
    if cfg.num_intersections_per_axis < 2:
        _fail("num_intersections_per_axis", "num_intersections_per_axis must be at least 2")
    for key in ("max_queue", "warmup_slots"):
        if getattr(cfg, key) < 0:
            _fail(key, f"{key} must be non-negative")
    for key in _POSITIVE:
        v = getattr(cfg, key)
        if not (math.isfinite(v) and v > 0):
            _fail(key, f"{key} must be strictly positive")
    if not (math.isfinite(cfg.arrival_rate) and cfg.arrival_rate >= 0):
        _fail("arrival_rate", "arrival_rate must be non-negative")
    if not 0.0 < cfg.continue_prob < 1.0:
        _fail("continue_prob", "continue_prob out of (0,1)")
    if cfg.pair_distance > cfg.intersection_radius:
        _fail("pair_distance", "pair_distance must not exceed intersection_radius")
    if not cfg.nlos_exponent < cfg.nlos_bound:
        _fail("nlos_exponent", "nlos_exponent must be below rho * (intersection_radius / 2) ** e")
    tp = cfg.turn_probs
    if len(tp) != 3 or any(p < 0 for p in tp) or abs(sum(tp) - 1.0) > 1e-9:
        _fail("turn_probs", "turn_probs must be three non-negative values summing to 1")
    if cfg.warmup_slots >= cfg.horizon_slots:
        _fail("warmup_slots", "warmup_slots must be smaller than horizon_slots")
    if cfg.policy not in POLICIES:
        _fail("policy", f"policy must be one of {', '.join(POLICIES)}")
    if cfg.fading_model not in ("exponential", "rayleigh"):
        _fail("fading_model", "fading_model must be 'exponential' or 'rayleigh'")
    if cfg.kernel_width is not None and not cfg.kernel_width > 0:
        _fail("kernel_width", "kernel_width must be strictly positive")
    if cfg.kmeans_restarts < 1 or cfg.kmeans_max_iter < 1:
        _fail("kmeans_restarts", "k-means restarts and iterations must be positive")
    lc = cfg.learning
    if not 0.0 < lc.rate_scale < 1.0:
        _fail("learning.rate_scale", "learning.rate_scale out of (0,1)")
    if not 0.5 < lc.rate_exponent <= 1.0:
        _fail("learning.rate_exponent", "learning.rate_exponent out of (0.5,1]")
    if not lc.convergence_epsilon > 0:
        _fail("learning.convergence_epsilon", "learning.convergence_epsilon must be positive")
    if lc.convergence_window < 1:
        _fail("learning.convergence_window", "learning.convergence_window must be positive")
    if not 0.0 <= lc.exploration <= 1.0:
        _fail("learning.exploration", "learning.exploration out of [0,1]")
    if lc.q_update not in ("verbatim", "smoothed"):
        _fail("learning.q_update", "learning.q_update must be 'verbatim' or 'smoothed'")


def _flatten(doc: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _field_kinds() -> dict[str, str]:
    kinds = {}
    for f in dataclasses.fields(ScenarioConfig):
        if f.name != "learning":
            kinds[f.name] = str(f.type)
    for f in dataclasses.fields(LearningConfig):
        kinds[f"learning.{f.name}"] = str(f.type)
    return kinds


def _coerce(key: str, kind: str, value: Any) -> Any:
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            _fail(key, f"{key}: expected an integer, got {value!r}")
        return int(value)
    if key == "turn_probs":
        if not isinstance(value, (list, tuple)):
            _fail(key, "turn_probs must be a list of three numbers")
        return tuple(parse_quantity(key, p) for p in value)
    if kind.startswith("str"):
        if not isinstance(value, str):
            _fail(key, f"{key}: expected a string")
        return value
    return parse_quantity(key, value)


def config_from_mapping(values: Mapping[str, Any]) -> ScenarioConfig:
    """Build a validated config from a (possibly nested) mapping."""
    flat = _flatten(values)
    kinds = _field_kinds()
    top, learning = {}, {}
    for key, raw in flat.items():
        if key not in kinds:
            _fail(key, f"unknown configuration key {key!r}")
        val = _coerce(key, kinds[key], raw)
        if key.startswith("learning."):
            learning[key.split(".", 1)[1]] = val
        else:
            top[key] = val
    for key in _REQUIRED:
        if key not in top:
            _fail(key, f"missing required key {key!r}")
    try:
        lc = LearningConfig(**learning)
    except TypeError as exc:  # pragma: no cover - guarded by the key check above
        raise ConfigError("learning", str(exc)) from exc
    return ScenarioConfig(learning=lc, **top)


def with_overrides(cfg: ScenarioConfig, overrides: Mapping[str, Any]) -> ScenarioConfig:
    """``cfg`` with ``overrides`` applied through the same parsing and validation as files."""
    flat = {k: v for k, v in cfg.to_dict().items() if v is not None}
    flat.update(overrides)
    return config_from_mapping(flat)


def parse_override(item: str) -> tuple[str, Any]:
    """Parse a ``key=value`` override; the value uses TOML syntax when it can."""
    if "=" not in item:
        raise ConfigError(item, f"override {item!r} is not of the form key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def load_config(source: str, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    """Parse a TOML document (flat keys and/or dotted sections) into a config."""
    try:
        doc = tomllib.loads(source)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<document>", f"cannot parse config: {exc}") from exc
    flat = _flatten(doc)
    if overrides:
        flat.update(overrides)
    return config_from_mapping(flat)


def load_config_file(path: str | Path, overrides: Mapping[str, Any] | None = None) -> ScenarioConfig:
    return load_config(Path(path).read_text(), overrides)


# -- random streams ----------------------------------------------------------

STREAMS = (
    "mobility",
    "fading",
    "arrivals",
    "termination",
    "tie_breaks",
    "baseline_bids",
    "exploration",
    "clustering",
)


@dataclass(frozen=True)
class RngPlan:
    master_seed: int

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


def derive_substream(plan: RngPlan, label: str, agent_index: int = 0) -> np.random.Generator:
    """Independent generator for ``(label, agent_index)`` under ``plan``."""
    if label not in STREAMS:
        raise KeyError(f"unknown random stream {label!r}")
    # crc32 keeps the label key stable if streams are added or reordered
    key = (zlib.crc32(label.encode()), int(agent_index))
    seq = np.random.SeedSequence(entropy=plan.master_seed, spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))


def derive_seed(plan: RngPlan, label: str) -> int:
    """A 63-bit integer seed drawn once from the ``label`` stream."""
    return int(derive_substream(plan, label).integers(0, 2**63 - 1))


class BlockDraws:
    """Per-agent substreams read one slot at a time.

    Each agent owns a generator from ``derive_substream(plan, label, k)``;
    values are pre-drawn in blocks so a slot costs one array slice. The
    sequence seen by agent ``k`` depends only on its own stream.
    """

    def __init__(self, plan: RngPlan, label: str, num_agents: int,
                 sampler: Callable[[np.random.Generator, int], np.ndarray],
                 block: int = 1024):
        self._gens = [derive_substream(plan, label, k) for k in range(num_agents)]
        self._sampler = sampler
        self._block = block
        self._buf = None
        self._pos = block

    def __call__(self) -> np.ndarray:
        if self._pos == self._block:
            self._buf = np.stack([self._sampler(g, self._block) for g in self._gens])
            self._pos = 0
        col = self._buf[:, self._pos]
        self._pos += 1
        return col
