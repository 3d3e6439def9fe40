"""Cost assembly: normalization constants, instantaneous cost components,
and the total objective accumulated along one simulated run.

The total cost mixes four running terms (weighted backlog, weighted
delivered data with a negative sign, idleness, excitation field) divided by
scale normalizers so no term dominates, plus a terminal charge for data left
on board and, for ellipse trajectories, the base-passage penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import FieldMoments
from .model import ConfigError, MissionConfig, SimulationError, idling

__all__ = ["Normalizers", "normalizers", "running_cost", "total_cost",
           "CostBreakdown"]


@dataclass(frozen=True)
class Normalizers:
    """Upper-bound scales for the objective components (all positive)."""

    backlog: float
    delivered: float
    onboard: float
    idle: float
    field: float


def normalizers(config: MissionConfig) -> Normalizers:
    """Component scales derived from the scenario.

    The queue scales equal the total data generated over the horizon at the
    initial rates; the idle scale is the log bound of the idling function on
    the mission diagonal; the field scale bounds the excitation integral.
    Stochastic arrival specs contribute their nominal (mean) initial rate so
    the scales stay deterministic across replications.
    """
    rates0 = config.nominal_rates
    if np.any(rates0 <= 0):
        raise ConfigError("every target needs a positive initial arrival rate")
    total = config.horizon * float(rates0.sum())
    L1, L2 = config.size
    diag2 = L1 * L1 + L2 * L2
    idle = math.log1p(math.sqrt(diag2) ** (config.n_targets + 1))
    rbar = float(config.clamp_radii.mean())
    fld = config.horizon * L1 * L2 * diag2 / rbar * float(rates0.sum())
    return Normalizers(backlog=total, delivered=total, onboard=total,
                       idle=idle, field=fld)


def running_cost(config: MissionConfig, positions, backlog, delivered,
                 onboard, moments: FieldMoments):
    """Raw (unnormalized) instantaneous components at one state.

    Returns ``(backlog_sum, delivered_sum, idle_sum, field_value)``.
    """
    w = config.target_weights
    l1 = float(w @ np.asarray(backlog))
    l2 = float(w @ np.asarray(delivered))
    l3 = 0.0
    for j in range(config.n_agents):
        l3 += idling(np.asarray(positions)[j], config.target_positions,
                     config.ranges[:, j], config.base.position,
                     config.base.ranges[j])
    l4 = moments.field_cost(positions, backlog, onboard)
    return l1, l2, l3, l4


@dataclass(frozen=True)
class CostBreakdown:
    """Normalized objective pieces of one evaluated run."""

    total: float
    backlog_term: float      # (1/(T*M_backlog)) integral of sum w_i X_i
    delivery_term: float     # (1/(T*M_delivered)) integral of sum w_i Y_i
    idle_term: float
    field_term: float
    terminal: float          # onboard data left at the horizon, normalized
    penalty: float           # base-passage penalty (ellipse runs)

    def row(self) -> dict:
        return {
            "J": self.total, "J1": self.backlog_term, "J2": self.delivery_term,
            "J3": self.idle_term, "J4": self.field_term,
            "Jf": self.terminal, "penalty": self.penalty,
        }


def _idle_series(config: MissionConfig, positions):
    """Idleness summed over agents at every node; vectorized over nodes."""
    tp = config.target_positions                       # (M, 2)
    d = np.linalg.norm(positions[:, :, None, :] - tp[None, None, :, :], axis=3)
    excess = np.maximum(0.0, d - config.ranges.T[None, :, :])       # (S, N, M)
    dB = np.linalg.norm(positions - config.base.position, axis=2)   # (S, N)
    excess_b = np.maximum(0.0, dB - config.base.ranges[None, :])
    return np.log1p(excess_b * np.prod(excess, axis=2)).sum(axis=1)


def _field_series(config: MissionConfig, moments: FieldMoments, positions,
                  backlog, onboard):
    """Field term at every node via the precomputed grid moments."""
    w = config.target_weights
    s2 = np.sum(positions * positions, axis=2)                      # (S, N)
    trav_t = (s2[:, :, None] * moments.m0[None, None, :]
              - 2.0 * positions @ moments.m1.T
              + moments.m2[None, None, :])                          # (S, N, M)
    trav_b = s2 * moments.b0 - 2.0 * positions @ moments.b1 + moments.b2
    wx = backlog * w[None, :]                                       # (S, M)
    wz = np.einsum("m,smn->sn", w, onboard)                         # (S, N)
    return (np.einsum("snm,sm->s", trav_t, wx)
            + np.einsum("sn,sn->s", trav_b, wz))


def total_cost(trace, prep, moments: FieldMoments,
               norms: Normalizers = None) -> CostBreakdown:
    """Accumulate the objective along one run.

    Time integration is composite trapezoid on the trace grid, which already
    contains the exact event times, so flow kinks sit on nodes.  ``prep`` is
    the prepared trajectory the trace was produced with (it contributes the
    base-passage penalty).
    """
    cfg = trace.config
    if norms is None:
        norms = normalizers(cfg)
    T = cfg.horizon
    w = cfg.target_weights
    times = trace.times

    l1 = trace.backlog @ w
    l2 = trace.delivered @ w
    l3 = _idle_series(cfg, trace.positions)
    l4 = _field_series(cfg, moments, trace.positions, trace.backlog,
                       trace.onboard)

    backlog_term = float(np.trapezoid(l1, times)) / (T * norms.backlog)
    delivery_term = float(np.trapezoid(l2, times)) / (T * norms.delivered)
    idle_term = float(np.trapezoid(l3, times)) / (T * norms.idle)
    field_term = float(np.trapezoid(l4, times)) / (T * norms.field)
    terminal = float(w @ trace.onboard[-1].sum(axis=1)) / (T * norms.onboard)

    pen_vals, _ = prep.base_penalty()
    penalty = cfg.penalty_scale * float(np.sum(pen_vals))

    q = cfg.tradeoff
    total = (q * backlog_term - (1.0 - q) * delivery_term
             + idle_term + field_term + terminal + penalty)
    if total < -(1.0 - q) - 1e-9:
        raise SimulationError(
            f"objective {total} fell below its lower bound {-(1.0 - q)}")
    return CostBreakdown(total=total, backlog_term=backlog_term,
                         delivery_term=delivery_term, idle_term=idle_term,
                         field_term=field_term, terminal=terminal,
                         penalty=penalty)
