"""Event-driven sensitivity engine.

Propagates the derivatives of the queue contents with respect to the
trajectory parameters along one simulated run, event to event:

* between events each derivative integrates the parameter sensitivity of
  the active collection/delivery gains (trapezoid on the trace grid, the
  same quadrature the simulator used);
* at an event the derivatives jump by fixed rules: emptying a target queue
  zeroes its derivative and transfers it to the collecting agent's onboard
  derivative; finishing a delivery transfers the onboard derivative to the
  base-queue derivative; a departure that hands the connection to a waiting
  agent shifts the backlog derivative by the takeover rate times the
  event-time sensitivity.

The event-time sensitivities of geometric events are ratios of directional
derivatives of the crossing distance; queue-event times additionally need
the local flow rates.  Only the geometric ones enter the objective gradient
(the telescoped running-cost sum has no direct event-time terms), which is
why the assembled gradient depends on the arrival processes solely through
the observed event times and queue values, never through the recorded rate
annotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .field import FieldMoments
from .model import EventKind, EventRecord, GrazingEventError, MissionConfig
from .objective import Normalizers, normalizers
from .simulator import SimTrace

__all__ = ["DerivativeState", "EventSensitivity", "event_time_derivative",
           "apply_event_jump", "sample_path_gradient", "GradientInfo"]

GRAZE_TOL = 1e-9


@dataclass
class DerivativeState:
    """Queue-content derivatives w.r.t. the full parameter vector."""

    backlog: np.ndarray     # (M, dim)
    delivered: np.ndarray   # (M, dim)
    onboard: np.ndarray     # (M, N, dim)

    @staticmethod
    def zeros(n_targets: int, n_agents: int, dim: int) -> "DerivativeState":
        return DerivativeState(np.zeros((n_targets, dim)),
                               np.zeros((n_targets, dim)),
                               np.zeros((n_targets, n_agents, dim)))

    def copy(self) -> "DerivativeState":
        return DerivativeState(self.backlog.copy(), self.delivered.copy(),
                               self.onboard.copy())


@dataclass
class EventSensitivity:
    """Per-event diagnostics collected during a gradient pass."""

    record: EventRecord
    tau_sens: Optional[np.ndarray]          # (dim,) or None when singular
    pre: Optional[DerivativeState] = None
    post: Optional[DerivativeState] = None


@dataclass
class GradientInfo:
    """Side products of one gradient assembly."""

    events: List[EventSensitivity]
    terminal_onboard_sens: np.ndarray
    penalty_grad: np.ndarray


# ---------------------------------------------------------------------------
# event-time sensitivities
# ---------------------------------------------------------------------------

def _full_jac_at(prep, trace, node: int, agent: int) -> np.ndarray:
    """Total position sensitivity (2, dim) at a stored trace node."""
    rho = trace.phase[node, agent]
    sens = trace.phase_sens[node, agent]
    return prep.full_jacobian(agent, rho, sens)


def _geometric_tau_sens(prep, trace, node: int, agent: int,
                        center: np.ndarray) -> np.ndarray:
    """Event-time sensitivity of a distance-threshold crossing.

    ``-(e . s_sens) / (e . velocity)`` with ``e`` the unit vector from the
    circle center to the agent.  Raises when the crossing is tangential.
    """
    pos = trace.positions[node, agent]
    diff = pos - center
    dist = math.hypot(diff[0], diff[1])
    if dist < 1e-12:
        raise GrazingEventError("agent sits exactly on a range center")
    e = diff / dist
    vel = prep.velocity(agent, trace.phase[node, agent])
    denom = float(e @ vel)
    if abs(denom) < GRAZE_TOL:
        raise GrazingEventError(
            f"tangential range crossing for agent {agent} (grazing)")
    sj = _full_jac_at(prep, trace, node, agent)
    return -(e @ sj) / denom


def event_time_derivative(event: EventRecord, config: MissionConfig, prep,
                          trace: SimTrace, derivs: DerivativeState) -> np.ndarray:
    """d(event time)/d(theta) for one logged event.

    Needs the derivative state just before the event for queue events; uses
    the recorded arrival-rate annotations for the target-queue events, and
    pure geometry for range/base crossings.  Exogenous rate breakpoints have
    zero sensitivity by definition; induced events inherit the trigger's
    time, so callers should treat them via the inducing record.
    """
    kind = event.kind
    dim = prep.dim
    if kind is EventKind.RATE_BREAK:
        return np.zeros(dim)
    node = event.node
    if kind in (EventKind.RANGE_ENTER, EventKind.RANGE_EXIT):
        return _geometric_tau_sens(prep, trace, node, event.agent,
                                   config.target_positions[event.target])
    if kind in (EventKind.BASE_ENTER, EventKind.BASE_EXIT):
        return _geometric_tau_sens(prep, trace, node, event.agent,
                                   config.base.position)
    if kind is EventKind.SEGMENT_SWITCH:
        rate, _ = prep.kin_rhs(event.agent, trace.phase[node, event.agent])
        return -trace.phase_sens[node, event.agent] / rate
    if kind is EventKind.TARGET_EMPTY:
        flow = event.flow_pre
        if flow is None or abs(flow) < GRAZE_TOL:
            raise GrazingEventError(
                f"target {event.target} emptied with vanishing net flow")
        return -derivs.backlog[event.target] / flow
    if kind is EventKind.ONBOARD_EMPTY:
        denom = config.base.deliver_caps[event.target, event.agent] * event.gain
        if abs(denom) < GRAZE_TOL:
            raise GrazingEventError(
                f"onboard queue ({event.target},{event.agent}) emptied "
                "with vanishing delivery rate")
        return derivs.onboard[event.target, event.agent] / denom
    if kind is EventKind.TARGET_REFILL:
        if event.induced_by is not None:
            return np.zeros(dim)   # shares the inducing event's time shift
        i, j = event.target, event.agent
        pos = trace.positions[node, j]
        center = config.target_positions[i]
        diff = pos - center
        dist = math.hypot(diff[0], diff[1])
        e = diff / max(dist, 1e-12)
        scale = config.collect_caps[i, j] / config.ranges[i, j]
        vel = prep.velocity(j, trace.phase[node, j])
        denom = (event.arrival_slope or 0.0) + scale * float(e @ vel)
        if abs(denom) < GRAZE_TOL:
            raise GrazingEventError(
                f"backlog refill at target {i} is tangential (grazing)")
        sj = _full_jac_at(prep, trace, node, j)
        return -scale * (e @ sj) / denom
    return np.zeros(dim)


def apply_event_jump(event: EventRecord, config: MissionConfig,
                     derivs: DerivativeState,
                     tau_sens: Optional[np.ndarray] = None) -> None:
    """Discontinuous derivative update at one event (in place).

    Only three event kinds move the state derivatives: emptying a target
    queue, emptying an onboard queue, and a range exit that hands the
    connection to another agent already in range (``tau_sens`` required
    then).  Everything else leaves them continuous.
    """
    kind = event.kind
    if kind is EventKind.TARGET_EMPTY:
        i, j = event.target, event.agent
        derivs.onboard[i, j] += derivs.backlog[i]
        derivs.backlog[i] = 0.0
    elif kind is EventKind.ONBOARD_EMPTY:
        i, j = event.target, event.agent
        derivs.delivered[i] += derivs.onboard[i, j]
        derivs.onboard[i, j] = 0.0
    elif kind is EventKind.RANGE_EXIT and event.handoff_agent is not None:
        if tau_sens is None:
            raise ValueError("handoff jump needs the event-time sensitivity")
        i, l = event.target, event.handoff_agent
        rate = config.collect_caps[i, l] * (event.handoff_gain or 0.0)
        derivs.backlog[i] -= rate * tau_sens


# ---------------------------------------------------------------------------
# gradient assembly
# ---------------------------------------------------------------------------

def _cumtrap(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid along axis 0; result[0] = 0."""
    if len(times) == 1:
        return np.zeros_like(values)
    dt = np.diff(times)
    incr = 0.5 * (values[1:] + values[:-1]) * dt.reshape(
        (-1,) + (1,) * (values.ndim - 1))
    out = np.zeros_like(values)
    np.cumsum(incr, axis=0, out=out[1:])
    return out


def sample_path_gradient(trace: SimTrace, family, moments: FieldMoments,
                         norms: Optional[Normalizers] = None,
                         collect_event_info: bool = False):
    """Exact gradient of the run objective w.r.t. the curve parameters.

    Requires a trace produced with ``with_phase_sens=True``.  Returns
    ``(gradient, info)``; the info object carries per-event time
    sensitivities (for diagnostics) when ``collect_event_info`` is set,
    in which case the per-event sensitivities also consume the arrival
    annotations.  The gradient itself never reads them.
    """
    cfg = trace.config
    if trace.phase_sens is None:
        raise ValueError("gradient assembly needs a trace with phase_sens")
    if norms is None:
        norms = normalizers(cfg)
    prep = family.prepare(trace.theta)
    M, N, dim = cfg.n_targets, cfg.n_agents, prep.dim
    S = len(trace.times)
    times = trace.times
    w = cfg.target_weights
    T = cfg.horizon
    q = cfg.tradeoff

    # ---- node-wise kinematic sensitivities (vectorized over the grid) ----
    pos = trace.positions                                     # (S, N, 2)
    s_sens = np.empty((S, N, 2, dim))
    vel = np.empty((S, N, 2))
    for j in range(N):
        s_sens[:, j] = prep.full_jacobian(j, trace.phase[:, j],
                                          trace.phase_sens[:, j])
        vel[:, j] = prep.velocity(j, trace.phase[:, j])

    diff_t = pos[:, None, :, :] - cfg.target_positions[None, :, None, :]
    d_t = np.linalg.norm(diff_t, axis=3)                      # (S, M, N)
    diff_b = pos - cfg.base.position
    d_b = np.linalg.norm(diff_b, axis=2)                      # (S, N)

    with np.errstate(invalid="ignore", divide="ignore"):
        e_t = diff_t / d_t[..., None]
        e_b = diff_b / d_b[..., None]
    e_t = np.nan_to_num(e_t)
    e_b = np.nan_to_num(e_b)

    # directional sensitivity of the distances:  d' = e . s'
    dist_sens_t = np.einsum("smnc,sncd->smnd", e_t, s_sens)   # (S, M, N, dim)
    dist_sens_b = np.einsum("snc,sncd->snd", e_b, s_sens)     # (S, N, dim)

    inside_t = d_t < cfg.ranges[None, :, :]
    inside_b = d_b < cfg.base.ranges[None, :]
    gain_sens_t = np.where(inside_t[..., None],
                           -dist_sens_t / cfg.ranges[None, :, :, None], 0.0)
    gain_sens_b = np.where(inside_b[..., None],
                           -dist_sens_b / cfg.base.ranges[None, :, None], 0.0)

    # ---- idleness gradient (pure kinematics, continuous a.e.) ----
    excess_t = np.maximum(0.0, d_t - cfg.ranges[None, :, :])          # (S, M, N)
    excess_b = np.maximum(0.0, d_b - cfg.base.ranges[None, :])        # (S, N)
    exc_sens_t = np.where(~inside_t[..., None], dist_sens_t, 0.0)
    exc_sens_b = np.where(~inside_b[..., None], dist_sens_b, 0.0)
    idle_grad = np.zeros((S, dim))
    for j in range(N):
        prod_all = np.prod(excess_t[:, :, j], axis=1)                 # (S,)
        u = excess_b[:, j] * prod_all
        u_sens = exc_sens_b[:, j] * prod_all[:, None]
        for l in range(M):
            others = np.prod(np.delete(excess_t[:, :, j], l, axis=1), axis=1)
            u_sens = u_sens + (excess_b[:, j] * others)[:, None] \
                * exc_sens_t[:, l, j]
        idle_grad += u_sens / (1.0 + u)[:, None]
    idle_int = np.trapezoid(idle_grad, times, axis=0)

    # ---- field gradient, travel part (positions move, queues fixed) ----
    pull_t = (pos[:, :, None, :] * moments.m0[None, None, :, None]
              - moments.m1[None, None, :, :])                 # (S, N, M, 2)
    pull_b = pos * moments.b0 - moments.b1[None, None, :]     # (S, N, 2)
    wx = trace.backlog * w[None, :]                           # (S, M)
    wz = np.einsum("m,smn->sn", w, trace.onboard)             # (S, N)
    attract = (np.einsum("sm,snmc->snc", wx, pull_t)
               + wz[:, :, None] * pull_b)                     # (S, N, 2)
    fld_travel = 2.0 * np.einsum("snc,sncd->sd", attract, s_sens)
    fld1_int = np.trapezoid(fld_travel, times, axis=0)

    # travel-cost moments of every agent position (for the density part)
    s2 = np.sum(pos * pos, axis=2)                            # (S, N)
    trav_t = (s2[:, :, None] * moments.m0[None, None, :]
              - 2.0 * pos @ moments.m1.T + moments.m2[None, None, :])
    trav_b = s2 * moments.b0 - 2.0 * pos @ moments.b1 + moments.b2

    # ---- interval-wise propagation of the queue derivatives ----
    derivs = DerivativeState.zeros(M, N, dim)
    bl_int = np.zeros(dim)
    del_int = np.zeros(dim)
    fld2_int = np.zeros(dim)
    events_by_node = {}
    for ev in trace.events:
        events_by_node.setdefault(ev.node, []).append(ev)
    info_events: List[EventSensitivity] = []

    for interval in trace.intervals:
        a, b = interval.node_start, interval.node_end
        if b > a:
            tt = times[a:b + 1]
            L = b + 1 - a
            X_sl = np.broadcast_to(derivs.backlog, (L, M, dim)).copy()
            Z_sl = np.broadcast_to(derivs.onboard, (L, M, N, dim)).copy()
            Y_sl = np.broadcast_to(derivs.delivered, (L, M, dim)).copy()
            for i in range(M):
                j = interval.owner[i]
                if j < 0 or interval.backlog_zero[i]:
                    continue
                flow = (cfg.collect_caps[i, j]
                        * gain_sens_t[a:b + 1, i, j, :])      # (L, dim)
                c = _cumtrap(flow, tt)
                X_sl[:, i, :] -= c
                Z_sl[:, i, j, :] += c
            for j in range(N):
                if not interval.at_base[j]:
                    continue
                for i in range(M):
                    if not interval.onboard_pos[i, j]:
                        continue
                    flow = (cfg.base.deliver_caps[i, j]
                            * gain_sens_b[a:b + 1, j, :])
                    c = _cumtrap(flow, tt)
                    Z_sl[:, i, j, :] -= c
                    Y_sl[:, i, :] += c
            derivs.backlog = X_sl[-1].copy()
            derivs.onboard = Z_sl[-1].copy()
            derivs.delivered = Y_sl[-1].copy()

            wXs = np.einsum("m,smd->sd", w, X_sl)
            wYs = np.einsum("m,smd->sd", w, Y_sl)
            bl_int += np.trapezoid(wXs, tt, axis=0)
            del_int += np.trapezoid(wYs, tt, axis=0)
            # density part of the field gradient: queue derivatives under
            # the fixed travel-cost moments
            dens = (np.einsum("m,snm,smd->sd", w, trav_t[a:b + 1], X_sl)
                    + np.einsum("smnd,m,sn->sd", Z_sl, w, trav_b[a:b + 1]))
            fld2_int += np.trapezoid(dens, tt, axis=0)

        # ---- jumps at the events closing this interval ----
        for ev in events_by_node.get(b, []):
            pre = derivs.copy() if collect_event_info else None
            tau_sens = None
            if ev.kind is EventKind.RANGE_EXIT and ev.handoff_agent is not None:
                tau_sens = _geometric_tau_sens(
                    prep, trace, ev.node, ev.agent,
                    cfg.target_positions[ev.target])
                apply_event_jump(ev, cfg, derivs, tau_sens)
            elif ev.kind is EventKind.SEGMENT_SWITCH:
                rate_pre, _ = prep.segment_boundary_rates(
                    ev.agent, int(round(trace.phase[ev.node, ev.agent]
                                        / (2 * math.pi))))
                tau_sens = -trace.phase_sens[ev.node, ev.agent] / rate_pre
                _segment_switch_jump(ev, cfg, prep, trace, interval,
                                     derivs, tau_sens)
            else:
                apply_event_jump(ev, cfg, derivs)
            if collect_event_info:
                try:
                    tau_full = event_time_derivative(ev, cfg, prep, trace,
                                                     pre if pre else derivs)
                except GrazingEventError:
                    tau_full = None
                info_events.append(EventSensitivity(
                    record=ev, tau_sens=tau_full, pre=pre,
                    post=derivs.copy()))

    # ---- final assembly ----
    pen_vals, pen_grad = prep.base_penalty()
    terminal_sens = np.einsum("m,mnd->d", w, derivs.onboard)
    grad = (1.0 / T) * (q / norms.backlog * bl_int
                        - (1.0 - q) / norms.delivered * del_int
                        + idle_int / norms.idle
                        + (fld1_int + fld2_int) / norms.field)
    grad = grad + terminal_sens / (norms.onboard * T)
    grad = grad + cfg.penalty_scale * pen_grad
    info = GradientInfo(events=info_events,
                        terminal_onboard_sens=terminal_sens,
                        penalty_grad=pen_grad)
    return grad, info


def _segment_switch_jump(event, cfg, prep, trace, interval, derivs, tau_sens):
    """Flow-difference jumps when a misaligned segment relocates an agent.

    The arrival rate cancels in every flow difference, so the jump uses only
    collection/delivery gains on both sides of the switch.  With the base
    passage enforced the relocation (and this whole correction) vanishes.
    """
    j = event.agent
    k_new = int(round(trace.phase[event.node, j] / (2 * math.pi)))
    pos_pre, pos_post = prep.segment_boundary_positions(j, k_new)
    if np.linalg.norm(pos_post - pos_pre) < 1e-12:
        return
    for i in range(cfg.n_targets):
        if interval.owner[i] != j or interval.backlog_zero[i]:
            continue
        d_pre = np.linalg.norm(pos_pre - cfg.target_positions[i])
        d_post = np.linalg.norm(pos_post - cfg.target_positions[i])
        g_pre = max(0.0, 1.0 - d_pre / cfg.ranges[i, j])
        g_post = max(0.0, 1.0 - d_post / cfg.ranges[i, j])
        gap = cfg.collect_caps[i, j] * (g_post - g_pre)
        derivs.backlog[i] += gap * tau_sens
        derivs.onboard[i, j] -= gap * tau_sens
    if interval.at_base[j]:
        gb_pre = max(0.0, 1.0 - np.linalg.norm(pos_pre - cfg.base.position)
                     / cfg.base.ranges[j])
        gb_post = max(0.0, 1.0 - np.linalg.norm(pos_post - cfg.base.position)
                      / cfg.base.ranges[j])
        for i in range(cfg.n_targets):
            if interval.onboard_pos[i, j]:
                gap = cfg.base.deliver_caps[i, j] * (gb_post - gb_pre)
                derivs.onboard[i, j] += gap * tau_sens
                derivs.delivered[i] -= gap * tau_sens
