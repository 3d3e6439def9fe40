"""Mission model: scenario description, queue/agent state, proximity and
idling functions, arrival processes, and the event taxonomy shared by the
simulator and the sensitivity engine.

Conventions used throughout the package:

* the mission space is the rectangle ``[0, L1] x [0, L2]``,
* ``M`` targets generate data at rates ``arrival_rate_i(t)``,
* ``N`` agents move at unit speed along parametric closed curves,
* queue contents are fluid (continuous) levels, never packets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "ConfigError",
    "SimulationError",
    "CurveSingularityError",
    "GrazingEventError",
    "proximity",
    "d_plus",
    "idling",
    "TargetSpec",
    "BaseSpec",
    "ConstantArrival",
    "PiecewiseLinearArrival",
    "ArrivalRealization",
    "realize_arrivals",
    "MissionConfig",
    "SystemState",
    "EventKind",
    "EventRecord",
]


class ConfigError(ValueError):
    """Scenario description violates a model assumption or schema rule."""


class SimulationError(RuntimeError):
    """The hybrid integrator detected an inconsistent state."""


class CurveSingularityError(RuntimeError):
    """A trajectory has a degenerate point where the curve speed vanishes."""


class GrazingEventError(RuntimeError):
    """An event-time derivative is singular (tangential guard crossing)."""


# ---------------------------------------------------------------------------
# proximity / idling primitives
# ---------------------------------------------------------------------------

def proximity(w, v, r: float):
    """Normalized link gain between points ``w`` and ``v`` with range ``r``.

    Returns ``max(0, 1 - d/r)``: 1 at zero separation, linearly decreasing,
    exactly 0 at and beyond the range.  ``r`` must be positive.
    """
    if r <= 0.0:
        raise ConfigError(f"range must be positive, got {r}")
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.linalg.norm(w - v, axis=-1)
    return np.maximum(0.0, 1.0 - d / r)


def d_plus(d, r):
    """Distance in excess of a range: ``max(0, d - r)``; zero inside range."""
    return np.maximum(0.0, np.asarray(d, dtype=float) - r)


def idling(pos, target_positions, target_ranges, base_position, base_range):
    """Idleness measure of an agent at ``pos``.

    ``log(1 + e_B * prod_i e_i)`` where ``e`` are the excess distances beyond
    the base/target ranges.  Zero exactly when the agent is within range of
    the base or of at least one target; positive otherwise.
    """
    pos = np.asarray(pos, dtype=float)
    tp = np.asarray(target_positions, dtype=float).reshape(-1, 2)
    tr = np.asarray(target_ranges, dtype=float).reshape(-1)
    e_b = d_plus(np.linalg.norm(pos - np.asarray(base_position)), base_range)
    e_t = d_plus(np.linalg.norm(tp - pos, axis=1), tr)
    return math.log1p(e_b * np.prod(e_t))


# ---------------------------------------------------------------------------
# arrival processes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantArrival:
    """Deterministic constant arrival rate."""

    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError(f"arrival rate must be >= 0, got {self.rate}")

    @property
    def nominal_rate(self) -> float:
        return self.rate

    def realize(self, horizon: float, rng=None) -> "ArrivalRealization":
        return ArrivalRealization(
            times=np.array([0.0, horizon]),
            rates=np.array([self.rate, self.rate]),
        )


@dataclass(frozen=True)
class PiecewiseLinearArrival:
    """Random piecewise-linear arrival rate with a pinned time average.

    Node values are drawn uniformly in ``mean * [1 - amplitude, 1 + amplitude]``
    at breakpoints spaced ``delta`` apart (default ``horizon / 20``) and then
    rescaled so the exact time average over the horizon equals ``mean``.
    ``amplitude = 0`` degenerates to the constant rate ``mean``.
    """

    mean: float
    amplitude: float = 1.0
    delta: Optional[float] = None

    def __post_init__(self):
        if self.mean <= 0:
            raise ConfigError(f"mean arrival rate must be > 0, got {self.mean}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ConfigError(f"amplitude must lie in [0, 1], got {self.amplitude}")

    @property
    def nominal_rate(self) -> float:
        return self.mean

    def realize(self, horizon: float, rng=None) -> "ArrivalRealization":
        delta = self.delta if self.delta is not None else horizon / 20.0
        n = max(1, int(round(horizon / delta)))
        times = np.linspace(0.0, horizon, n + 1)
        if self.amplitude == 0.0 or rng is None:
            rates = np.full(n + 1, self.mean)
        else:
            lo = self.mean * (1.0 - self.amplitude)
            hi = self.mean * (1.0 + self.amplitude)
            rates = rng.uniform(lo, hi, size=n + 1)
            # pin the exact horizon average at the configured mean
            avg = np.trapezoid(rates, times) / horizon
            if avg > 0:
                rates = rates * (self.mean / avg)
            else:  # pragma: no cover - probability zero draw
                rates = np.full(n + 1, self.mean)
        return ArrivalRealization(times=times, rates=rates)


ArrivalSpec = Union[ConstantArrival, PiecewiseLinearArrival]


@dataclass(frozen=True)
class ArrivalRealization:
    """One sample path of an arrival-rate process: piecewise linear in time."""

    times: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        if np.any(self.rates < 0):
            raise ConfigError("arrival realization has a negative rate")
        const = float(self.rates[0]) if np.all(self.rates == self.rates[0]) else None
        object.__setattr__(self, "_const", const)

    def rate(self, t):
        if self._const is not None and np.ndim(t) == 0:
            return self._const
        return np.interp(t, self.times, self.rates)

    def slope(self, t: float) -> float:
        """Left-continuous slope of the rate at ``t``."""
        if self._const is not None:
            return 0.0
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 2)
        dt = self.times[k + 1] - self.times[k]
        return float((self.rates[k + 1] - self.rates[k]) / dt) if dt > 0 else 0.0

    def integral(self, a: float, b: float) -> float:
        """Exact integral of the piecewise-linear rate over ``[a, b]``."""
        if b <= a:
            return 0.0
        if self._const is not None:
            return self._const * (b - a)
        ts = self.times
        grid = ts[(ts > a) & (ts < b)]
        pts = np.concatenate(([a], grid, [b]))
        vals = np.interp(pts, ts, self.rates)
        return float(np.trapezoid(vals, pts))

    @property
    def breakpoints(self) -> np.ndarray:
        """Interior breakpoint instants (recorded as exogenous rate events)."""
        return self.times[1:-1]


def realize_arrivals(config: "MissionConfig", seed=None) -> list:
    """Draw one arrival realization per target (seeded)."""
    rng = np.random.default_rng(seed)
    return [spec.realize(config.horizon, rng) for spec in config.arrivals]


# ---------------------------------------------------------------------------
# scenario specification
# ---------------------------------------------------------------------------

def _as_per_agent(value, n_agents: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(n_agents, float(arr))
    if arr.shape != (n_agents,):
        raise ConfigError(f"{what} must be a scalar or length-{n_agents} list")
    return arr


@dataclass(frozen=True)
class TargetSpec:
    """A stationary data source: position, per-agent range/rate, weight."""

    position: np.ndarray          # (2,)
    ranges: np.ndarray            # (N,) collection range per agent
    collect_caps: np.ndarray      # (N,) max collection rate per agent
    weight: float = 1.0

    @staticmethod
    def make(position, range_, collect_cap, weight=1.0, n_agents=1) -> "TargetSpec":
        return TargetSpec(
            position=np.asarray(position, dtype=float),
            ranges=_as_per_agent(range_, n_agents, "target range"),
            collect_caps=_as_per_agent(collect_cap, n_agents, "collect cap"),
            weight=float(weight),
        )


@dataclass(frozen=True)
class BaseSpec:
    """The delivery base: position, per-agent range, per-(target, agent) rate."""

    position: np.ndarray          # (2,)
    ranges: np.ndarray            # (N,)
    deliver_caps: np.ndarray      # (M, N) max delivery rate per target,agent

    @staticmethod
    def make(position, range_, deliver_cap, n_targets=1, n_agents=1) -> "BaseSpec":
        caps = np.asarray(deliver_cap, dtype=float)
        if caps.ndim == 0:
            caps = np.full((n_targets, n_agents), float(caps))
        elif caps.ndim == 1:
            if caps.shape != (n_agents,):
                raise ConfigError("1-d deliver cap must have one entry per agent")
            caps = np.tile(caps, (n_targets, 1))
        if caps.shape != (n_targets, n_agents):
            raise ConfigError("deliver cap must broadcast to (targets, agents)")
        return BaseSpec(
            position=np.asarray(position, dtype=float),
            ranges=_as_per_agent(range_, n_agents, "base range"),
            deliver_caps=caps,
        )


@dataclass(frozen=True)
class MissionConfig:
    """Immutable scenario: geometry, rates, horizon, weights, tolerances."""

    size: tuple                       # (L1, L2)
    targets: tuple                    # tuple[TargetSpec]
    base: BaseSpec
    n_agents: int
    horizon: float
    tradeoff: float                   # weight between backlog and delivery terms
    arrivals: tuple                   # tuple[ArrivalSpec], one per target
    penalty_scale: float = 1e4        # base-passage penalty multiplier
    grid_shape: tuple = (50, 50)      # field quadrature resolution
    steps: int = 20000                # integrator steps over the horizon
    event_tol: float = 1e-10          # event-time tolerance, relative to horizon

    def __post_init__(self):
        L1, L2 = self.size
        if L1 <= 0 or L2 <= 0:
            raise ConfigError("mission rectangle must have positive size")
        if self.n_agents < 1:
            raise ConfigError("need at least one agent")
        if len(self.targets) < 1:
            raise ConfigError("need at least one target")
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        if not 0.0 <= self.tradeoff <= 1.0:
            raise ConfigError("tradeoff weight must lie in [0, 1]")
        if len(self.arrivals) != len(self.targets):
            raise ConfigError("need one arrival spec per target")
        if self.steps < 10:
            raise ConfigError("integrator needs at least 10 steps")
        for i, tgt in enumerate(self.targets):
            if np.any(tgt.ranges <= 0) or np.any(tgt.collect_caps <= 0):
                raise ConfigError(f"target {i}: ranges and rates must be positive")
            if not (0 <= tgt.position[0] <= L1 and 0 <= tgt.position[1] <= L2):
                raise ConfigError(f"target {i} lies outside the mission rectangle")
            if tgt.weight <= 0:
                raise ConfigError(f"target {i}: weight must be positive")
        if np.any(self.base.ranges <= 0) or np.any(self.base.deliver_caps <= 0):
            raise ConfigError("base ranges and delivery rates must be positive")
        if self.base.deliver_caps.shape != (self.n_targets, self.n_agents):
            raise ConfigError("delivery rate table has the wrong shape")
        # collection and delivery zones must never overlap, for any agent
        for i, tgt in enumerate(self.targets):
            gap = np.linalg.norm(tgt.position - self.base.position)
            if np.any(gap <= tgt.ranges + self.base.ranges):
                raise ConfigError(
                    f"target {i} range overlaps the base range "
                    f"(separation {gap:.3f}); collection and delivery zones "
                    "must be disjoint"
                )

    # -- derived array views ------------------------------------------------

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def target_positions(self) -> np.ndarray:
        return np.array([t.position for t in self.targets])

    @property
    def target_weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.targets])

    @property
    def ranges(self) -> np.ndarray:
        """Collection ranges, shape (M, N)."""
        return np.array([t.ranges for t in self.targets])

    @property
    def collect_caps(self) -> np.ndarray:
        """Max collection rates, shape (M, N)."""
        return np.array([t.collect_caps for t in self.targets])

    @property
    def clamp_radii(self) -> np.ndarray:
        """Per-target density clamp radius: the smallest range over agents."""
        return self.ranges.min(axis=1)

    @property
    def base_clamp_radius(self) -> float:
        return float(self.base.ranges.min())

    @property
    def nominal_rates(self) -> np.ndarray:
        """Initial (nominal) arrival rate per target, used by normalizers."""
        return np.array([a.nominal_rate for a in self.arrivals])

    @property
    def step_length(self) -> float:
        return self.horizon / self.steps

    @property
    def time_tolerance(self) -> float:
        return self.event_tol * self.horizon

    def replace(self, **kw) -> "MissionConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# runtime state and events
# ---------------------------------------------------------------------------

@dataclass
class SystemState:
    """Mutable snapshot of the hybrid system at one instant."""

    time: float
    backlog: np.ndarray        # (M,) data waiting at each target
    delivered: np.ndarray      # (M,) data delivered to the base, per target
    onboard: np.ndarray        # (M, N) data held by each agent, per target
    phase: np.ndarray          # (N,) cumulative trajectory phase per agent
    positions: np.ndarray      # (N, 2)
    owner: np.ndarray          # (M,) connected agent index, -1 when none

    @staticmethod
    def initial(config: MissionConfig, positions, phase=None) -> "SystemState":
        M, N = config.n_targets, config.n_agents
        return SystemState(
            time=0.0,
            backlog=np.zeros(M),
            delivered=np.zeros(M),
            onboard=np.zeros((M, N)),
            phase=np.zeros(N) if phase is None else np.asarray(phase, float),
            positions=np.asarray(positions, dtype=float).reshape(N, 2),
            owner=np.full(M, -1, dtype=int),
        )


class EventKind(str, Enum):
    """Discrete transitions of the hybrid system."""

    TARGET_EMPTY = "target_empty"       # backlog hits zero while collecting
    TARGET_REFILL = "target_refill"     # backlog leaves zero
    ONBOARD_EMPTY = "onboard_empty"     # an onboard queue finishes delivery
    RANGE_EXIT = "range_exit"           # agent leaves a target's range
    RANGE_ENTER = "range_enter"         # agent enters a target's range
    BASE_EXIT = "base_exit"             # agent leaves the base range
    BASE_ENTER = "base_enter"           # agent enters the base range
    RATE_BREAK = "rate_break"           # exogenous arrival-rate breakpoint
    SEGMENT_SWITCH = "segment_switch"   # agent advances to its next curve segment

    @property
    def priority(self) -> int:
        """Tie-break order for events colliding within tolerance."""
        if self is EventKind.SEGMENT_SWITCH:
            return 0
        if self in (EventKind.RANGE_EXIT, EventKind.RANGE_ENTER,
                    EventKind.BASE_EXIT, EventKind.BASE_ENTER):
            return 1
        if self in (EventKind.TARGET_EMPTY, EventKind.TARGET_REFILL,
                    EventKind.ONBOARD_EMPTY):
            return 2
        return 3


@dataclass
class EventRecord:
    """One logged occurrence.

    Geometry fields (``phase``, ``gain``, handoff data) are consumed by the
    gradient assembly.  The ``arrival_*`` fields are annotations: they enter
    event-time derivative reports but never the objective gradient, which is
    independent of the arrival process between observed events.
    """

    time: float
    kind: EventKind
    target: Optional[int] = None
    agent: Optional[int] = None
    phase: Optional[np.ndarray] = None      # (N,) cumulative phases at the event
    gain: Optional[float] = None            # link gain of the pair concerned
    handoff_agent: Optional[int] = None     # takes over the connection, if any
    handoff_gain: Optional[float] = None    # link gain of the takeover agent
    arrival_rate: Optional[float] = None    # annotation only
    arrival_slope: Optional[float] = None   # annotation only
    flow_pre: Optional[float] = None        # affected queue rate just before
    flow_post: Optional[float] = None       # affected queue rate just after
    induced_by: Optional[EventKind] = None  # set when caused by another event
    node: int = -1                          # index of the trace grid node

    def sort_key(self):
        idx = (self.target if self.target is not None else -1,
               self.agent if self.agent is not None else -1)
        return (self.time, self.kind.priority, idx)
