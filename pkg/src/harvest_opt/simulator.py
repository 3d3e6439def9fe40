"""Hybrid-system simulator.

Agents advance along their prepared trajectories at unit speed (classic
fixed-step RK4 on the phase and, optionally, on its parameter sensitivity),
while the fluid queues integrate with trapezoidal flows in a conserving
form: whatever leaves one queue is credited to the next, so total data is
conserved to roundoff, including clamped intervals.

Every discrete transition (range entries/exits, queues hitting zero,
arrival-rate breakpoints, curve segment switches) is localized by bisection
to the configured time tolerance, logged as an
:class:`~harvest_opt.model.EventRecord`, and the span between consecutive
transitions is annotated with the discrete mode (connection owner per
target, zero-backlog and positive-onboard flags, base membership) that the
sensitivity engine replays.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .model import (
    EventKind,
    EventRecord,
    MissionConfig,
    SimulationError,
    realize_arrivals,
)

__all__ = ["IntervalMode", "SimTrace", "simulate", "detect_events",
           "connection_arbiter"]

log = logging.getLogger("harvest_opt")

NEG_TOL = 1e-9
TWO_PI = 2.0 * np.pi


@dataclass
class IntervalMode:
    """Discrete mode holding on one inter-event span of a run."""

    t_start: float
    t_end: float
    node_start: int
    node_end: int
    owner: np.ndarray          # (M,) agent index or -1
    backlog_zero: np.ndarray   # (M,) backlog pinned at zero
    onboard_pos: np.ndarray    # (M, N) onboard queue strictly positive
    at_base: np.ndarray        # (N,)
    in_range: np.ndarray       # (M, N)


@dataclass
class SimTrace:
    """Sampled run: states on the time grid, event log, mode spans."""

    config: MissionConfig
    family_name: str
    theta: np.ndarray
    times: np.ndarray          # (S,)
    phase: np.ndarray          # (S, N)
    positions: np.ndarray      # (S, N, 2)
    backlog: np.ndarray        # (S, M)
    delivered: np.ndarray      # (S, M)
    onboard: np.ndarray        # (S, M, N)
    cum_inflow: np.ndarray     # (S,) cumulative total arrivals, same quadrature
    events: List[EventRecord]
    intervals: List[IntervalMode]
    arrivals: list
    phase_sens: Optional[np.ndarray] = None   # (S, N, dim) when requested

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def connection_arbiter(in_range_row, current_owner: int,
                       departing: Optional[int] = None) -> int:
    """Single-owner connection rule for one target.

    The earliest entrant keeps the connection (the current owner is never
    displaced).  When the owner departs, the in-range agent with the lowest
    index takes over; -1 when nobody is in range.
    """
    row = np.asarray(in_range_row, dtype=bool).copy()
    if departing is not None:
        row[departing] = False
    if current_owner >= 0 and current_owner != departing and row[current_owner]:
        return current_owner
    idx = np.nonzero(row)[0]
    return int(idx[0]) if len(idx) else -1


def _bisect_to(g: Callable[[float], float], ta: float, tb: float,
               new_side_positive: bool, tol: float) -> float:
    """First time in ``(ta, tb]`` at which ``g`` sits on the new side."""
    while tb - ta > tol:
        tm = 0.5 * (ta + tb)
        if (g(tm) > 0) == new_side_positive:
            tb = tm
        else:
            ta = tm
    return tb


def detect_events(guards: Sequence[Callable[[float], float]], ta: float,
                  tb: float, tol: float,
                  start_signs: Optional[Sequence[bool]] = None,
                  _depth: int = 0) -> List[tuple]:
    """Localize sign changes of continuous scalar guards on ``(ta, tb]``.

    ``start_signs`` optionally fixes each guard's side at ``ta`` (True for
    positive), needed when the interval begins exactly on a switching
    surface.  A guard that crosses and returns within the interval (detected
    at the midpoint) causes the interval to be halved and both halves
    searched, so multiple crossings of the same guard are all found.
    Returns ``(tau, guard_index)`` pairs in time order.
    """
    if tb - ta <= tol or _depth > 60:
        return []
    signs = [(g(ta) > 0) if start_signs is None else bool(start_signs[k])
             for k, g in enumerate(guards)]
    tm = 0.5 * (ta + tb)
    if any((g(tm) > 0) != signs[k] and (g(tb) > 0) == signs[k]
           for k, g in enumerate(guards)):
        left = detect_events(guards, ta, tm, tol, signs, _depth + 1)
        mid_signs = [(g(tm) > 0) for g in guards]
        right = detect_events(guards, tm, tb, tol, mid_signs, _depth + 1)
        return sorted(left + right, key=lambda c: c[0])
    out = [(_bisect_to(g, ta, tb, not signs[k], tol), k)
           for k, g in enumerate(guards) if (g(tb) > 0) != signs[k]]
    return sorted(out, key=lambda c: c[0])


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------

class _Run:
    def __init__(self, config: MissionConfig, prep, arrivals,
                 with_phase_sens: bool):
        self.cfg = config
        self.prep = prep
        self.arrivals = arrivals
        M, N = config.n_targets, config.n_agents
        self.M, self.N = M, N
        self.mu = config.collect_caps
        self.beta = config.base.deliver_caps
        self.r = config.ranges
        self.rB = config.base.ranges
        self.tol = config.time_tolerance
        self._tp = config.target_positions
        self._bp = config.base.position

        self.t = 0.0
        self.rho = np.zeros(N)
        self.sens = np.zeros((N, prep.dim)) if with_phase_sens else None
        self.X = np.zeros(M)
        self.Y = np.zeros(M)
        self.Z = np.zeros((M, N))
        self.cum_in = 0.0

        self.pos = prep.start_positions()
        self.p, self.pB = self._gains(self.pos)

        rate0 = np.array([a.rate(0.0) for a in arrivals])
        self.in_range = self.p > 0.0
        self.at_base = self.pB > 0.0
        self.owner = np.full(M, -1, dtype=int)
        self.x_zero = np.zeros(M, dtype=bool)
        self.z_pos = np.zeros((M, N), dtype=bool)
        for i in range(M):
            self.owner[i] = connection_arbiter(self.in_range[i], -1)
            j = self.owner[i]
            if j >= 0:
                if rate0[i] <= self.mu[i, j] * self.p[i, j]:
                    self.x_zero[i] = True
                if rate0[i] > 0.0:
                    self.z_pos[i, j] = True
                if np.count_nonzero(self.in_range[i]) > 1:
                    log.info("target %d: several agents start in range; "
                             "index order decides the connection", i)

        # per-agent queue of upcoming segment boundaries (cumulative phase)
        self.switches = [list(prep.segment_switches(j)) for j in range(N)]

        self.nodes_t = [0.0]
        self.nodes_rho = [self.rho.copy()]
        self.nodes_pos = [self.pos.copy()]
        self.nodes_X = [self.X.copy()]
        self.nodes_Y = [self.Y.copy()]
        self.nodes_Z = [self.Z.copy()]
        self.nodes_cum = [0.0]
        self.nodes_sens = [self.sens.copy()] if with_phase_sens else None
        self.events: List[EventRecord] = []
        self.intervals: List[IntervalMode] = []
        self._interval_start = (0.0, 0)

    # -- kinematics ---------------------------------------------------------

    def _gains(self, pos):
        diff = self._tp[:, None, :] - pos[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=2))
        p = np.maximum(0.0, 1.0 - d / self.r)
        diff_b = pos - self._bp
        dB = np.sqrt(np.sum(diff_b * diff_b, axis=1))
        pB = np.maximum(0.0, 1.0 - dB / self.rB)
        return p, pB

    def _dists(self, pos):
        diff = self._tp[:, None, :] - pos[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=2))
        diff_b = pos - self._bp
        return d, np.sqrt(np.sum(diff_b * diff_b, axis=1))

    def _rk4_one(self, j, rho_j, h, sens_j=None):
        k1, s1 = self.prep.kin_rhs(j, rho_j, sens_j)
        if sens_j is None:
            k2, _ = self.prep.kin_rhs(j, rho_j + 0.5 * h * k1)
            k3, _ = self.prep.kin_rhs(j, rho_j + 0.5 * h * k2)
            k4, _ = self.prep.kin_rhs(j, rho_j + h * k3)
            return rho_j + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), None
        k2, s2 = self.prep.kin_rhs(j, rho_j + 0.5 * h * k1, sens_j + 0.5 * h * s1)
        k3, s3 = self.prep.kin_rhs(j, rho_j + 0.5 * h * k2, sens_j + 0.5 * h * s2)
        k4, s4 = self.prep.kin_rhs(j, rho_j + h * k3, sens_j + h * s3)
        return (rho_j + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4),
                sens_j + h / 6.0 * (s1 + 2 * s2 + 2 * s3 + s4))

    def _advance_all(self, tb):
        rho_b = np.empty(self.N)
        sens_b = None if self.sens is None else np.empty_like(self.sens)
        for j in range(self.N):
            rho_b[j], sj = self._rk4_one(
                j, self.rho[j], tb - self.t,
                None if self.sens is None else self.sens[j])
            if sens_b is not None:
                sens_b[j] = sj
        return rho_b, sens_b

    def _rho_at(self, j, tau):
        if tau <= self.t:
            return self.rho[j]
        r, _ = self._rk4_one(j, self.rho[j], tau - self.t)
        return r

    def _pos_at(self, j, tau):
        return self.prep.position(j, self._rho_at(j, tau))

    def _gain_at(self, i, j, tau):
        d = np.linalg.norm(self._pos_at(j, tau) - self.cfg.target_positions[i])
        return max(0.0, 1.0 - d / self.r[i, j])

    def _base_gain_at(self, j, tau):
        d = np.linalg.norm(self._pos_at(j, tau) - self.cfg.base.position)
        return max(0.0, 1.0 - d / self.rB[j])

    # -- queue bookkeeping ----------------------------------------------------

    def _commit(self, tb, rho_b, sens_b):
        """Advance queues to ``tb`` under the current mode; store a node."""
        pos_b = np.array([self.prep.position(j, rho_b[j])
                          for j in range(self.N)])
        p_b, pB_b = self._gains(pos_b)
        if np.any((p_b > 0.0) & (pB_b[None, :] > 0.0)):
            raise SimulationError(
                "an agent is simultaneously within a target and the base range")
        dt = tb - self.t
        for i in range(self.M):
            inflow = self.arrivals[i].integral(self.t, tb)
            self.cum_in += inflow
            j = self.owner[i]
            if j >= 0 and self.in_range[i, j]:
                if self.x_zero[i]:
                    collected = inflow           # backlog pinned at zero
                else:
                    cap = 0.5 * self.mu[i, j] * (self.p[i, j] + p_b[i, j]) * dt
                    collected = min(cap, self.X[i] + inflow)
                    self.X[i] += inflow - collected
                self.Z[i, j] += collected
            else:
                self.X[i] += inflow
        for j in range(self.N):
            if not self.at_base[j]:
                continue
            halfdt = 0.5 * (self.pB[j] + pB_b[j]) * dt
            for i in range(self.M):
                if self.z_pos[i, j]:
                    amt = min(self.beta[i, j] * halfdt, self.Z[i, j])
                    self.Z[i, j] -= amt
                    self.Y[i] += amt
        if (self.X.min() < -NEG_TOL or self.Z.min() < -NEG_TOL
                or self.Y.min() < -NEG_TOL):
            raise SimulationError(f"negative queue content at t={tb:.6f}")

        self.t = tb
        self.rho = rho_b
        self.sens = sens_b
        self.pos = pos_b
        self.p, self.pB = p_b, pB_b
        self.nodes_t.append(tb)
        self.nodes_rho.append(rho_b.copy())
        self.nodes_pos.append(pos_b.copy())
        self.nodes_X.append(self.X.copy())
        self.nodes_Y.append(self.Y.copy())
        self.nodes_Z.append(self.Z.copy())
        self.nodes_cum.append(self.cum_in)
        if self.nodes_sens is not None:
            self.nodes_sens.append(sens_b.copy())
        return len(self.nodes_t) - 1

    def _close_interval(self, t_end, node_end):
        t0, n0 = self._interval_start
        self.intervals.append(IntervalMode(
            t_start=t0, t_end=t_end, node_start=n0, node_end=node_end,
            owner=self.owner.copy(), backlog_zero=self.x_zero.copy(),
            onboard_pos=self.z_pos.copy(), at_base=self.at_base.copy(),
            in_range=self.in_range.copy()))

    # -- guard scan -------------------------------------------------------------

    def _range_guard(self, i, j):
        def guard(tau):
            diff = self._pos_at(j, tau) - self._tp[i]
            return math.hypot(diff[0], diff[1]) - self.r[i, j]
        return guard

    def _base_guard(self, j):
        def guard(tau):
            diff = self._pos_at(j, tau) - self._bp
            return math.hypot(diff[0], diff[1]) - self.rB[j]
        return guard

    def _scan_step(self, tb, rho_b):
        """Candidate guards crossing in ``(t, tb]``; 'halve' on a double cross."""
        pos_b = np.array([self.prep.position(j, rho_b[j])
                          for j in range(self.N)])
        dt = tb - self.t
        cand = []   # (guard, new_side_positive, (kind, i, j))

        d_b, dB_b = self._dists(pos_b)
        d_a, dB_a = self._dists(self.pos)

        crossed = (d_b < self.r) != self.in_range
        near = (~crossed & (np.abs(d_a - self.r) < dt)
                & (np.abs(d_b - self.r) < dt))
        for i, j in np.argwhere(crossed):
            inside = self.in_range[i, j]
            kind = EventKind.RANGE_EXIT if inside else EventKind.RANGE_ENTER
            cand.append((self._range_guard(i, j), not inside,
                         (kind, int(i), int(j))))
        for i, j in np.argwhere(near):
            if self._double_cross(self._range_guard(i, j), tb,
                                  not self.in_range[i, j]):
                return "halve"

        crossed_b = (dB_b < self.rB) != self.at_base
        near_b = (~crossed_b & (np.abs(dB_a - self.rB) < dt)
                  & (np.abs(dB_b - self.rB) < dt))
        for j in np.nonzero(crossed_b)[0]:
            inside = self.at_base[j]
            kind = EventKind.BASE_EXIT if inside else EventKind.BASE_ENTER
            cand.append((self._base_guard(j), not inside, (kind, None, int(j))))
        for j in np.nonzero(near_b)[0]:
            if self._double_cross(self._base_guard(j), tb, not self.at_base[j]):
                return "halve"

        for j in range(self.N):
            if self.switches[j] and rho_b[j] >= self.switches[j][0]:
                bnd = self.switches[j][0]

                def guard(tau, j=j, bnd=bnd):
                    return self._rho_at(j, tau) - bnd

                cand.append((guard, True, (EventKind.SEGMENT_SWITCH, None, j)))

        p_b, pB_b = self._gains(pos_b)
        for i in range(self.M):
            j = self.owner[i]
            if j < 0 or not self.in_range[i, j]:
                continue
            if self.x_zero[i]:
                if self.arrivals[i].rate(tb) - self.mu[i, j] * p_b[i, j] > 0:
                    def guard(tau, i=i, j=j):
                        return (self.arrivals[i].rate(tau)
                                - self.mu[i, j] * self._gain_at(i, j, tau))

                    cand.append((guard, True, (EventKind.TARGET_REFILL, i, j)))
            else:
                cap = 0.5 * self.mu[i, j] * (self.p[i, j] + p_b[i, j]) * dt
                predicted = (self.X[i] + self.arrivals[i].integral(self.t, tb)
                             - cap)
                if predicted <= 0:
                    def guard(tau, i=i, j=j):
                        cap_tau = (0.5 * self.mu[i, j]
                                   * (self.p[i, j] + self._gain_at(i, j, tau))
                                   * (tau - self.t))
                        return (self.X[i]
                                + self.arrivals[i].integral(self.t, tau)
                                - cap_tau)

                    cand.append((guard, False, (EventKind.TARGET_EMPTY, i, j)))

        for j in range(self.N):
            if not self.at_base[j]:
                continue
            for i in range(self.M):
                if not self.z_pos[i, j]:
                    continue
                deliv = 0.5 * self.beta[i, j] * (self.pB[j] + pB_b[j]) * dt
                if self.Z[i, j] - deliv <= 0:
                    def guard(tau, i=i, j=j):
                        return (self.Z[i, j] - 0.5 * self.beta[i, j]
                                * (self.pB[j] + self._base_gain_at(j, tau))
                                * (tau - self.t))

                    cand.append((guard, False, (EventKind.ONBOARD_EMPTY, i, j)))
        return cand

    def _double_cross(self, guard, tb, new_side_positive) -> bool:
        tm = 0.5 * (self.t + tb)
        return ((guard(tm) > 0) == new_side_positive
                and (guard(tb) > 0) != new_side_positive)

    def _find_crossings(self, tb):
        """Localized crossings in ``(t, tb]``, possibly shrinking the step.

        Returns ``(crossings, tb, rho_b, sens_b)`` where the kinematics
        endpoint is reusable by the caller when no crossing occurred.
        """
        while True:
            rho_b, sens_b = self._advance_all(tb)
            cand = self._scan_step(tb, rho_b)
            if cand == "halve":
                tb = 0.5 * (self.t + tb)
                continue
            crossings = [(_bisect_to(g, self.t, tb, new_pos, self.tol), desc)
                         for g, new_pos, desc in cand]
            crossings.sort(key=lambda c: c[0])
            return crossings, tb, rho_b, sens_b

    # -- event application --------------------------------------------------------

    def _emit(self, record: EventRecord):
        record.phase = self.rho.copy()
        record.node = len(self.nodes_t) - 1
        self.events.append(record)
        return record

    def _refill_check(self, i, induced_by: EventKind):
        """Leave the pinned-backlog mode when inflow exceeds capacity."""
        if not self.x_zero[i]:
            return
        j = self.owner[i]
        rate = self.arrivals[i].rate(self.t)
        gain = float(self.p[i, j]) if j >= 0 else 0.0
        cap = self.mu[i, j] * gain if j >= 0 else 0.0
        if rate > cap:
            self.x_zero[i] = False
            self._emit(EventRecord(
                time=self.t, kind=EventKind.TARGET_REFILL, target=i,
                agent=(j if j >= 0 else None), gain=gain,
                arrival_rate=rate, arrival_slope=self.arrivals[i].slope(self.t),
                flow_pre=0.0, flow_post=rate - cap, induced_by=induced_by))

    def _apply(self, kind: EventKind, i, j):
        if kind is EventKind.RANGE_ENTER:
            self.in_range[i, j] = True
            rec = EventRecord(time=self.t, kind=kind, target=i, agent=j,
                              gain=float(self.p[i, j]))
            if self.owner[i] < 0:
                self.owner[i] = j
                if self.X[i] > 0 or self.arrivals[i].rate(self.t) > 0:
                    self.z_pos[i, j] = True
            self._emit(rec)
        elif kind is EventKind.RANGE_EXIT:
            self.in_range[i, j] = False
            rec = EventRecord(time=self.t, kind=kind, target=i, agent=j,
                              gain=float(self.p[i, j]))
            was_owner = self.owner[i] == j
            if was_owner:
                new = connection_arbiter(self.in_range[i], self.owner[i],
                                         departing=j)
                self.owner[i] = new
                if new >= 0:
                    rec.handoff_agent = new
                    rec.handoff_gain = float(self.p[i, new])
                    if self.X[i] > 0 or self.arrivals[i].rate(self.t) > 0:
                        self.z_pos[i, new] = True
            self._emit(rec)
            if was_owner:
                self._refill_check(i, induced_by=kind)
        elif kind is EventKind.BASE_ENTER:
            self.at_base[j] = True
            self._emit(EventRecord(time=self.t, kind=kind, agent=j,
                                   gain=float(self.pB[j])))
        elif kind is EventKind.BASE_EXIT:
            self.at_base[j] = False
            self._emit(EventRecord(time=self.t, kind=kind, agent=j,
                                   gain=float(self.pB[j])))
        elif kind is EventKind.TARGET_EMPTY:
            self.X[i] = 0.0
            self.x_zero[i] = True
            rate = self.arrivals[i].rate(self.t)
            self._emit(EventRecord(
                time=self.t, kind=kind, target=i, agent=j,
                gain=float(self.p[i, j]), arrival_rate=rate,
                arrival_slope=self.arrivals[i].slope(self.t),
                flow_pre=rate - self.mu[i, j] * self.p[i, j], flow_post=0.0))
        elif kind is EventKind.TARGET_REFILL:
            self.x_zero[i] = False
            rate = self.arrivals[i].rate(self.t)
            self._emit(EventRecord(
                time=self.t, kind=kind, target=i, agent=j,
                gain=float(self.p[i, j]), arrival_rate=rate,
                arrival_slope=self.arrivals[i].slope(self.t),
                flow_pre=0.0, flow_post=rate - self.mu[i, j] * self.p[i, j]))
        elif kind is EventKind.ONBOARD_EMPTY:
            self.Z[i, j] = 0.0
            self.z_pos[i, j] = False
            self._emit(EventRecord(
                time=self.t, kind=kind, target=i, agent=j,
                gain=float(self.pB[j]),
                flow_pre=-self.beta[i, j] * self.pB[j], flow_post=0.0))
        elif kind is EventKind.SEGMENT_SWITCH:
            bnd = self.switches[j].pop(0)
            k_new = int(round(bnd / TWO_PI))
            h_old, h_new = self.prep.segment_boundary_rates(j, k_new)
            if self.sens is not None:
                self.sens[j] = self.sens[j] * (h_new / h_old)
            self.rho[j] = bnd
            old_pos = self.pos[j].copy()
            self.pos[j] = self.prep.position(j, bnd)
            self.p, self.pB = self._gains(self.pos)
            self._emit(EventRecord(time=self.t, kind=kind, agent=j))
            # a misaligned next segment relocates the agent; reconcile modes
            if np.linalg.norm(self.pos[j] - old_pos) > 1e-12:
                for i2 in range(self.M):
                    inside = self.p[i2, j] > 0
                    if inside != self.in_range[i2, j]:
                        sub = (EventKind.RANGE_ENTER if inside
                               else EventKind.RANGE_EXIT)
                        self._apply(sub, i2, j)
                        self.events[-1].induced_by = kind
                inside_b = self.pB[j] > 0
                if inside_b != self.at_base[j]:
                    sub = (EventKind.BASE_ENTER if inside_b
                           else EventKind.BASE_EXIT)
                    self._apply(sub, None, j)
                    self.events[-1].induced_by = kind
        else:  # pragma: no cover
            raise SimulationError(f"unhandled event kind {kind}")

    # -- main loop -------------------------------------------------------------------

    def run(self, horizon: float) -> None:
        base_nodes = np.linspace(0.0, horizon, self.cfg.steps + 1)
        pending_breaks = sorted(
            (float(tb), i) for i, a in enumerate(self.arrivals)
            for tb in a.breakpoints)
        if pending_breaks:
            grid = np.unique(np.concatenate(
                [base_nodes, [tb for tb, _ in pending_breaks]]))
        else:
            grid = base_nodes

        for tn in grid[1:]:
            while self.t < tn - self.tol:
                crossings, tb_used, rho_b, sens_b = self._find_crossings(tn)
                if not crossings:
                    self._commit(tb_used, rho_b, sens_b)
                    continue
                tau_star = crossings[0][0]
                batch = [c for c in crossings if c[0] <= tau_star + self.tol]
                if len(batch) > 1:
                    log.warning(
                        "simultaneous events within tolerance at t=%.9f: %s",
                        tau_star, [d[0].value for _, d in batch])
                rho_b, sens_b = self._advance_all(tau_star)
                node = self._commit(tau_star, rho_b, sens_b)
                self._close_interval(tau_star, node)
                batch.sort(key=lambda c: (
                    c[1][0].priority,
                    c[1][1] if c[1][1] is not None else -1,
                    c[1][2] if c[1][2] is not None else -1))
                for _, (kind, i, j) in batch:
                    self._apply(kind, i, j)
                self._interval_start = (self.t, node)
            while pending_breaks and pending_breaks[0][0] <= self.t + self.tol:
                _, i = pending_breaks.pop(0)
                self._emit(EventRecord(
                    time=self.t, kind=EventKind.RATE_BREAK, target=i,
                    arrival_rate=self.arrivals[i].rate(self.t),
                    arrival_slope=self.arrivals[i].slope(self.t)))

        self._close_interval(self.t, len(self.nodes_t) - 1)


def simulate(config: MissionConfig, family, theta, arrivals=None, seed=None,
             with_phase_sens: bool = False) -> SimTrace:
    """Run the hybrid system over the horizon along fixed trajectories.

    ``arrivals`` may carry pre-realized arrival sample paths; otherwise one
    realization per target is drawn from ``seed`` (deterministic arrival
    specs ignore it).  ``with_phase_sens`` additionally integrates the phase
    sensitivity d(phase)/d(theta), required by the gradient engine but not
    by plain cost evaluations.
    """
    prep = family.prepare(theta)
    if arrivals is None:
        arrivals = realize_arrivals(config, seed)
    run = _Run(config, prep, arrivals, with_phase_sens)
    run.run(config.horizon)
    return SimTrace(
        config=config,
        family_name=family.name,
        theta=np.asarray(theta, dtype=float).copy(),
        times=np.array(run.nodes_t),
        phase=np.array(run.nodes_rho),
        positions=np.array(run.nodes_pos),
        backlog=np.array(run.nodes_X),
        delivered=np.array(run.nodes_Y),
        onboard=np.array(run.nodes_Z),
        cum_inflow=np.array(run.nodes_cum),
        events=run.events,
        intervals=run.intervals,
        arrivals=list(arrivals),
        phase_sens=None if run.nodes_sens is None else np.array(run.nodes_sens),
    )
