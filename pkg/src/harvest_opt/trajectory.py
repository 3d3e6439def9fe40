"""Parametric trajectory families.

Two families of closed curves are provided:

* ``EllipseFamily`` -- each agent follows a sequence of ellipses, one full
  revolution per segment, with a quadratic penalty forcing every segment
  through the base;
* ``FourierFamily`` -- each agent follows a truncated Fourier-series curve
  whose constant terms are always recomputed so the curve starts exactly at
  the base.

Agents traverse their curves at unit speed, so the phase rate is the
reciprocal of the curve speed ``|ds/dphase|``.  Besides positions and
velocities, the families expose the exact parameter Jacobian of the position
at fixed phase and the sensitivity dynamics of the phase itself; together
they give the total derivative of an agent position with respect to the
parameter vector along a run.

Phase convention: the cumulative phase ``rho`` starts at 0 and advances
monotonically; segment ``k`` (0-based) of an ellipse sequence is active while
``rho`` lies in ``[2*pi*k, 2*pi*(k+1))`` and the raw ellipse angle is offset
so that local phase 0 of every segment sits at its base-passage point (the
point of the ellipse nearest the base while the passage constraint is not
yet satisfied).  Fourier curves need no offset: they are base-anchored by
construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ConfigError, CurveSingularityError, MissionConfig

__all__ = [
    "ParamLayout",
    "EllipseFamily",
    "FourierFamily",
    "ellipse_base_constraint",
    "segment_schedule",
]

TWO_PI = 2.0 * math.pi
EPS_CURVE = 1e-8


@dataclass(frozen=True)
class ParamLayout:
    """Bijection between flat parameter indices and named roles.

    ``names[k]`` is a dotted identifier ``agent<j>...``; ``groups[k]`` is one
    of ``"length"``, ``"angle"``, ``"frequency"`` (used for step-size
    scaling); ``agent_of[k]`` is the owning agent.
    """

    names: tuple
    groups: tuple
    agent_of: tuple

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def describe(self) -> list:
        return [
            {"index": k, "name": self.names[k], "group": self.groups[k]}
            for k in range(self.dim)
        ]


def _wrap(x, period):
    return np.mod(x, period)


# ---------------------------------------------------------------------------
# single-ellipse primitives (raw phase)
# ---------------------------------------------------------------------------
# parameter order within a segment block: [cx, cy, a, b, tilt]

def _ell_pos(p, psi):
    cx, cy, a, b, ph = p
    c, s = np.cos(psi), np.sin(psi)
    return np.stack(
        [cx + a * c * math.cos(ph) - b * s * math.sin(ph),
         cy + a * c * math.sin(ph) + b * s * math.cos(ph)], axis=-1)


def _ell_G(p, psi):
    """First phase derivative ds/dpsi."""
    _, _, a, b, ph = p
    c, s = np.cos(psi), np.sin(psi)
    return np.stack(
        [-a * s * math.cos(ph) - b * c * math.sin(ph),
         -a * s * math.sin(ph) + b * c * math.cos(ph)], axis=-1)


def _ell_Gpsi(p, psi):
    """Second phase derivative d2s/dpsi2."""
    _, _, a, b, ph = p
    c, s = np.cos(psi), np.sin(psi)
    return np.stack(
        [-a * c * math.cos(ph) + b * s * math.sin(ph),
         -a * c * math.sin(ph) - b * s * math.cos(ph)], axis=-1)


def _ell_jac(p, psi):
    """Partials of position w.r.t. the 5 segment parameters at fixed phase."""
    _, _, a, b, ph = p
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    one, zero = np.ones_like(psi), np.zeros_like(psi)
    cph, sph = math.cos(ph), math.sin(ph)
    jx = np.stack([one, zero, c * cph, -s * sph, -a * c * sph - b * s * cph], axis=-1)
    jy = np.stack([zero, one, c * sph, s * cph, a * c * cph - b * s * sph], axis=-1)
    return np.stack([jx, jy], axis=-2)          # (..., 2, 5)


def _ell_Gjac(p, psi):
    """Partials of ds/dpsi w.r.t. the 5 segment parameters."""
    _, _, a, b, ph = p
    psi = np.asarray(psi, dtype=float)
    c, s = np.cos(psi), np.sin(psi)
    zero = np.zeros_like(psi)
    cph, sph = math.cos(ph), math.sin(ph)
    gx = np.stack([zero, zero, -s * cph, -c * sph, a * s * sph - b * c * cph], axis=-1)
    gy = np.stack([zero, zero, -s * sph, c * cph, -a * s * cph - b * c * sph], axis=-1)
    return np.stack([gx, gy], axis=-2)


def ellipse_base_constraint(params, base_position):
    """Base-passage penalty of one ellipse segment and its exact gradient.

    Returns ``(C, dC)`` with ``C = g**2`` and ``g`` the quadratic-form defect
    that vanishes exactly when the base lies on the ellipse.  ``dC`` has one
    entry per segment parameter ``[cx, cy, a, b, tilt]``.
    """
    cx, cy, a, b, ph = params
    dx = float(base_position[0]) - cx
    dy = float(base_position[1]) - cy
    c2, s2 = math.cos(ph) ** 2, math.sin(ph) ** 2
    s2p, c2p = math.sin(2 * ph), math.cos(2 * ph)
    f1 = (dx / a) ** 2 + (dy / b) ** 2
    f2 = (dx / b) ** 2 + (dy / a) ** 2
    f3 = (b * b - a * a) * dx * dy / (a * a * b * b)
    g = 1.0 - f1 * c2 - f2 * s2 - f3 * s2p

    df1 = np.array([-2 * dx / a ** 2, -2 * dy / b ** 2,
                    -2 * dx ** 2 / a ** 3, -2 * dy ** 2 / b ** 3, 0.0])
    df2 = np.array([-2 * dx / b ** 2, -2 * dy / a ** 2,
                    -2 * dy ** 2 / a ** 3, -2 * dx ** 2 / b ** 3, 0.0])
    df3 = np.array([-(b * b - a * a) * dy / (a * a * b * b),
                    -(b * b - a * a) * dx / (a * a * b * b),
                    -2 * dx * dy / a ** 3, 2 * dx * dy / b ** 3, 0.0])
    dg = -(c2 * df1 + s2 * df2 + s2p * df3)
    dg[4] = (f1 - f2) * s2p - 2 * f3 * c2p
    return g * g, 2.0 * g * dg


def _ell_base_phase(p, base_position):
    """Raw phase of the ellipse point nearest the base (the phase origin)."""
    w = np.asarray(base_position, dtype=float)

    def dist2(psi):
        diff = _ell_pos(p, psi) - w
        return np.sum(diff * diff, axis=-1)

    scan = np.linspace(0.0, TWO_PI, 129)[:-1]
    psi = float(scan[np.argmin(dist2(scan))])
    for _ in range(60):
        diff = _ell_pos(p, psi) - w
        f = float(np.dot(_ell_G(p, psi), diff))
        df = float(np.dot(_ell_Gpsi(p, psi), diff)
                   + np.dot(_ell_G(p, psi), _ell_G(p, psi)))
        if df <= 0:
            break
        step = f / df
        psi -= step
        if abs(step) < 1e-14:
            break
    return float(_wrap(psi, TWO_PI))


def _ell_base_phase_sens(p, psi0, base_position):
    """Sensitivity of the phase origin to the 5 segment parameters.

    Implicit differentiation of the stationarity condition
    ``G(psi0) . (pos(psi0) - base) = 0`` of the nearest-point problem; on the
    constraint manifold (base on the ellipse) it reduces to the tangential
    projection ``-(G . dpos/dtheta) / (G . G)``.
    """
    w = np.asarray(base_position, dtype=float)
    diff = _ell_pos(p, psi0) - w
    G = _ell_G(p, psi0)
    denom = float(np.dot(_ell_Gpsi(p, psi0), diff) + np.dot(G, G))
    dS = _ell_Gjac(p, psi0).T @ diff + _ell_jac(p, psi0).T @ G   # (5,)
    return -dS / denom


# ---------------------------------------------------------------------------
# Fourier primitives (raw phase == cumulative phase)
# ---------------------------------------------------------------------------

class _FourierAgent:
    """Cached per-agent Fourier coefficients with base-anchored offsets."""

    def __init__(self, freq_x, amp_x, amp_y, phase_x, phase_y, base_position,
                 freq_y=1.0):
        self.fx = float(freq_x)
        self.fy = float(freq_y)
        self.ax = np.asarray(amp_x, dtype=float)
        self.ay = np.asarray(amp_y, dtype=float)
        self.px = np.asarray(phase_x, dtype=float)
        self.py = np.asarray(phase_y, dtype=float)
        self.nx = np.arange(1, len(self.ax) + 1, dtype=float)
        self.ny = np.arange(1, len(self.ay) + 1, dtype=float)
        # constant terms eliminated so position(phase=0) == base, exactly
        self.a0 = float(base_position[0]) - float(np.sum(self.ax * np.sin(self.px)))
        self.b0 = float(base_position[1]) - float(np.sum(self.ay * np.sin(self.py)))
        # hot-path precomputes
        self.wnx = TWO_PI * self.nx * self.fx
        self.wny = TWO_PI * self.ny * self.fy
        self.awnx = self.ax * self.wnx
        self.awny = self.ay * self.wny
        self.aw2x = self.ax * self.wnx ** 2
        self.aw2y = self.ay * self.wny ** 2
        self.a2pn = self.ax * TWO_PI * self.nx
        self.c2x = self.ax * (TWO_PI * self.nx) ** 2 * self.fx

    def _ux(self, psi):
        return TWO_PI * self.fx * np.multiply.outer(np.asarray(psi, float), self.nx) + self.px

    def _uy(self, psi):
        return TWO_PI * self.fy * np.multiply.outer(np.asarray(psi, float), self.ny) + self.py

    def pos(self, psi):
        x = self.a0 + np.sum(self.ax * np.sin(self._ux(psi)), axis=-1)
        y = self.b0 + np.sum(self.ay * np.sin(self._uy(psi)), axis=-1)
        return np.stack([x, y], axis=-1)

    def G(self, psi):
        gx = np.sum(self.ax * TWO_PI * self.nx * self.fx * np.cos(self._ux(psi)), axis=-1)
        gy = np.sum(self.ay * TWO_PI * self.ny * self.fy * np.cos(self._uy(psi)), axis=-1)
        return np.stack([gx, gy], axis=-1)

    def Gpsi(self, psi):
        gx = -np.sum(self.ax * (TWO_PI * self.nx * self.fx) ** 2 * np.sin(self._ux(psi)), axis=-1)
        gy = -np.sum(self.ay * (TWO_PI * self.ny * self.fy) ** 2 * np.sin(self._uy(psi)), axis=-1)
        return np.stack([gx, gy], axis=-1)

    def jac(self, psi):
        """Position partials w.r.t. ``[fx, ax.., ay.., px.., py..]`` at fixed phase.

        Includes the chain through the eliminated constant terms
        (``d a0/d ax_n = -sin(px_n)``, ``d a0/d px_n = -ax_n cos(px_n)``,
        likewise for the y block).
        """
        psi_arr = np.asarray(psi, dtype=float)
        shape = psi_arr.shape
        ux, uy = self._ux(psi_arr), self._uy(psi_arr)
        zx = np.zeros(shape + (len(self.ax),))
        zy = np.zeros(shape + (len(self.ay),))
        dfx_x = np.sum(self.ax * TWO_PI * self.nx * psi_arr[..., None] * np.cos(ux), axis=-1)
        jx = np.concatenate([
            dfx_x[..., None],
            np.sin(ux) - np.sin(self.px),
            zy,
            self.ax * (np.cos(ux) - np.cos(self.px)),
            zy,
        ], axis=-1)
        jy = np.concatenate([
            np.zeros(shape + (1,)),
            zx,
            np.sin(uy) - np.sin(self.py),
            zx,
            self.ay * (np.cos(uy) - np.cos(self.py)),
        ], axis=-1)
        return np.stack([jx, jy], axis=-2)

    def Gjac(self, psi):
        """Partials of ds/dpsi w.r.t. the same parameter block."""
        psi_arr = np.asarray(psi, dtype=float)
        shape = psi_arr.shape
        ux, uy = self._ux(psi_arr), self._uy(psi_arr)
        zx = np.zeros(shape + (len(self.ax),))
        zy = np.zeros(shape + (len(self.ay),))
        wnx = TWO_PI * self.nx * self.fx
        wny = TWO_PI * self.ny * self.fy
        dfx = np.sum(self.ax * TWO_PI * self.nx
                     * (np.cos(ux) - wnx * psi_arr[..., None] * np.sin(ux)), axis=-1)
        gx = np.concatenate([
            dfx[..., None],
            wnx * np.cos(ux),
            zy,
            -self.ax * wnx * np.sin(ux),
            zy,
        ], axis=-1)
        gy = np.concatenate([
            np.zeros(shape + (1,)),
            zx,
            wny * np.cos(uy),
            zx,
            -self.ay * wny * np.sin(uy),
        ], axis=-1)
        return np.stack([gx, gy], axis=-2)


# ---------------------------------------------------------------------------
# prepared trajectories (family bound to one parameter vector)
# ---------------------------------------------------------------------------

class PreparedTrajectory:
    """A family evaluated at a fixed parameter vector, ready for one run.

    Phase arguments are cumulative phases; evaluation methods accept scalars
    or 1-d arrays of phases and broadcast accordingly.
    """

    def __init__(self, family, theta):
        self.family = family
        self.theta = np.asarray(theta, dtype=float).copy()
        self.dim = family.layout.dim

    # implemented by subclasses ------------------------------------------
    def position(self, agent, rho):
        raise NotImplementedError

    def curve_deriv(self, agent, rho):
        """ds/dphase at the given cumulative phase(s)."""
        raise NotImplementedError

    def fixed_jacobian(self, agent, rho):
        """Position partials w.r.t. the full parameter vector at fixed phase."""
        raise NotImplementedError

    def phase_offset_sens(self, agent, rho):
        """Parameter sensitivity of the active segment's phase origin."""
        raise NotImplementedError

    def kin_rhs(self, agent, rho, rho_sens=None):
        """Phase ODE right-hand side at one scalar phase.

        Returns ``(rate, rate_sens)``: the unit-speed phase rate, and the
        time derivative of the phase sensitivity when ``rho_sens`` is given.
        """
        raise NotImplementedError

    def segment_switches(self, agent):
        """Cumulative phases at which the active segment changes."""
        return []

    def base_penalty(self):
        """Base-passage penalty per agent and its gradient (full dim)."""
        return np.zeros(self.family.n_agents), np.zeros(self.dim)

    # shared ---------------------------------------------------------------
    def rho_dot(self, agent, rho):
        g = self.curve_deriv(agent, rho)
        n = np.linalg.norm(g, axis=-1)
        if np.any(n < EPS_CURVE):
            bad = np.atleast_1d(np.asarray(rho, float))[np.argmin(np.atleast_1d(n))]
            raise CurveSingularityError(
                f"agent {agent}: curve speed below {EPS_CURVE} near phase {bad:.6f}")
        return 1.0 / n

    def velocity(self, agent, rho):
        g = self.curve_deriv(agent, rho)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.any(n < EPS_CURVE):
            raise CurveSingularityError(f"agent {agent}: degenerate curve point")
        return g / n

    def full_jacobian(self, agent, rho, rho_sens):
        """Total position sensitivity: fixed-phase part plus the phase chain.

        ``rho_sens`` is d(rho)/d(theta) at the same instant, shape
        ``(..., dim)``; the phase-origin sensitivity of the active segment is
        added automatically.
        """
        jfix = self.fixed_jacobian(agent, rho)
        g = self.curve_deriv(agent, rho)
        psi_sens = np.asarray(rho_sens) + self.phase_offset_sens(agent, rho)
        return jfix + g[..., :, None] * psi_sens[..., None, :]

    def start_positions(self):
        return np.array([self.position(j, 0.0) for j in range(self.family.n_agents)])


class _SegCache:
    """Flat per-segment scalars for the hot kinematics path."""

    __slots__ = ("a", "b", "cph", "sph", "psi0", "osens", "off")

    def __init__(self, p, psi0, osens, off):
        self.a = float(p[2])
        self.b = float(p[3])
        self.cph = math.cos(float(p[4]))
        self.sph = math.sin(float(p[4]))
        self.psi0 = float(psi0)
        self.osens = np.asarray(osens, dtype=float)
        self.off = off


class _PreparedEllipse(PreparedTrajectory):
    def __init__(self, family, theta):
        super().__init__(family, theta)
        self.segments = []       # [agent][segment] -> (params, psi0, psi0_sens5)
        self._cache = []
        self._origins = []
        for j in range(family.n_agents):
            per = []
            cache = []
            for k in range(family.n_segments):
                p = self.theta[family.block(j, k)]
                if p[2] < EPS_CURVE or p[3] < EPS_CURVE:
                    raise ConfigError(
                        f"agent {j} segment {k}: semi-axes must stay positive")
                psi0 = _ell_base_phase(p, family.base_position)
                sens = _ell_base_phase_sens(p, psi0, family.base_position)
                per.append((p, psi0, sens))
                cache.append(_SegCache(p, psi0, sens, family.block(j, k).start))
            self.segments.append(per)
            self._cache.append(cache)
            self._origins.append(np.array([s[1] for s in per]))

    def _seg_index(self, rho):
        E = self.family.n_segments
        return np.minimum((np.asarray(rho, float) // TWO_PI).astype(int), E - 1)

    def _raw_phase(self, agent, rho):
        """Map cumulative phases to (segment indices, raw ellipse angles)."""
        rho_arr = np.asarray(rho, dtype=float)
        ks = self._seg_index(rho_arr)
        return ks, self._origins[agent][ks] + _wrap(rho_arr - TWO_PI * ks, TWO_PI)

    def _dispatch(self, agent, rho, fn, width):
        """Evaluate a per-segment primitive over possibly mixed segments."""
        rho_arr = np.asarray(rho, dtype=float)
        ks, psi = self._raw_phase(agent, rho_arr)
        if rho_arr.ndim == 0:
            return fn(self.segments[agent][int(ks)][0], float(psi))
        out = np.zeros(rho_arr.shape + width)
        for k in np.unique(ks):
            mask = ks == k
            out[mask] = fn(self.segments[agent][int(k)][0], psi[mask])
        return out

    def position(self, agent, rho):
        if np.ndim(rho) == 0:
            seg, psi = self._scalar_seg(agent, float(rho))
            c, s = math.cos(psi), math.sin(psi)
            return np.array([
                self.theta[seg.off] + seg.a * c * seg.cph - seg.b * s * seg.sph,
                self.theta[seg.off + 1] + seg.a * c * seg.sph + seg.b * s * seg.cph])
        return self._dispatch(agent, rho, _ell_pos, (2,))

    def _scalar_seg(self, agent, rho: float):
        E = self.family.n_segments
        k = min(int(rho // TWO_PI), E - 1)
        seg = self._cache[agent][k]
        return seg, seg.psi0 + (rho - TWO_PI * k) % TWO_PI

    def curve_deriv(self, agent, rho):
        return self._dispatch(agent, rho, _ell_G, (2,))

    def fixed_jacobian(self, agent, rho):
        rho_arr = np.asarray(rho, dtype=float)
        ks, psi = self._raw_phase(agent, rho_arr)
        out = np.zeros(rho_arr.shape + (2, self.dim))
        if rho_arr.ndim == 0:
            blk = self.family.block(agent, int(ks))
            out[:, blk] = _ell_jac(self.segments[agent][int(ks)][0], float(psi))
            return out
        for k in np.unique(ks):
            mask = ks == k
            blk = self.family.block(agent, int(k))
            out[mask, :, blk] = _ell_jac(self.segments[agent][int(k)][0], psi[mask])
        return out

    def phase_offset_sens(self, agent, rho):
        rho_arr = np.asarray(rho, dtype=float)
        ks = self._seg_index(rho_arr)
        out = np.zeros(rho_arr.shape + (self.dim,))
        if rho_arr.ndim == 0:
            out[self.family.block(agent, int(ks))] = self.segments[agent][int(ks)][2]
            return out
        for k in np.unique(ks):
            out[ks == k, self.family.block(agent, int(k))] = self.segments[agent][int(k)][2]
        return out

    def kin_rhs(self, agent, rho, rho_sens=None):
        seg, psi = self._scalar_seg(agent, float(rho))
        c, s = math.cos(psi), math.sin(psi)
        a, b, cph, sph = seg.a, seg.b, seg.cph, seg.sph
        gx = -a * s * cph - b * c * sph
        gy = -a * s * sph + b * c * cph
        n2 = gx * gx + gy * gy
        if n2 < EPS_CURVE ** 2:
            raise CurveSingularityError(
                f"agent {agent}: degenerate curve point near phase {rho:.6f}")
        h = n2 ** -0.5
        if rho_sens is None:
            return h, None
        h3 = h / n2
        # d(speed)/d(phase) through the second phase derivative
        gpx = -a * c * cph + b * s * sph
        gpy = -a * c * sph - b * s * cph
        a_psi = -h3 * (gx * gpx + gy * gpy)
        rhs = a_psi * rho_sens
        o = seg.off
        osens = seg.osens
        rhs[o] += a_psi * osens[0]
        rhs[o + 1] += a_psi * osens[1]
        rhs[o + 2] += a_psi * osens[2] - h3 * (gx * (-s * cph) + gy * (-s * sph))
        rhs[o + 3] += a_psi * osens[3] - h3 * (gx * (-c * sph) + gy * (c * cph))
        rhs[o + 4] += a_psi * osens[4] - h3 * (gx * (a * s * sph - b * c * cph)
                                               + gy * (-a * s * cph - b * c * sph))
        return h, rhs

    def segment_switches(self, agent):
        return [TWO_PI * k for k in range(1, self.family.n_segments)]

    def segment_boundary_rates(self, agent, k_new):
        """Phase rates just before/after the switch onto segment ``k_new``.

        The outgoing segment ends one revolution past its origin, i.e. at the
        same curve point (and speed) as its origin.
        """
        p_old, psi0_old, _ = self.segments[agent][k_new - 1]
        p_new, psi0_new, _ = self.segments[agent][k_new]
        h_old = 1.0 / float(np.linalg.norm(_ell_G(p_old, psi0_old)))
        h_new = 1.0 / float(np.linalg.norm(_ell_G(p_new, psi0_new)))
        return h_old, h_new

    def base_penalty(self):
        vals = np.zeros(self.family.n_agents)
        grad = np.zeros(self.dim)
        for j in range(self.family.n_agents):
            for k in range(self.family.n_segments):
                blk = self.family.block(j, k)
                c, dc = ellipse_base_constraint(self.theta[blk],
                                                self.family.base_position)
                vals[j] += c
                grad[blk] += dc
        return vals, grad


class _PreparedFourier(PreparedTrajectory):
    def __init__(self, family, theta):
        super().__init__(family, theta)
        gx, gy = family.harmonics
        self.agents = []
        for j in range(family.n_agents):
            v = self.theta[family.block(j)]
            self.agents.append(_FourierAgent(
                freq_x=v[0],
                amp_x=v[1:1 + gx],
                amp_y=v[1 + gx:1 + gx + gy],
                phase_x=v[1 + gx + gy:1 + 2 * gx + gy],
                phase_y=v[1 + 2 * gx + gy:],
                base_position=family.base_position,
                freq_y=family.freq_y,
            ))

    def curve_deriv(self, agent, rho):
        return self.agents[agent].G(np.asarray(rho, dtype=float))

    def fixed_jacobian(self, agent, rho):
        rho_arr = np.asarray(rho, dtype=float)
        local = self.agents[agent].jac(rho_arr)
        out = np.zeros(rho_arr.shape + (2, self.dim))
        blk = self.family.block(agent)
        if rho_arr.ndim == 0:
            out[:, blk] = local
        else:
            out[..., blk] = local
        return out

    def phase_offset_sens(self, agent, rho):
        return np.zeros(np.asarray(rho, dtype=float).shape + (self.dim,))

    def position(self, agent, rho):
        if np.ndim(rho) == 0:
            ag = self.agents[agent]
            psi = float(rho)
            return np.array([
                ag.a0 + float(ag.ax @ np.sin(ag.wnx * psi + ag.px)),
                ag.b0 + float(ag.ay @ np.sin(ag.wny * psi + ag.py))])
        return self.agents[agent].pos(np.asarray(rho, dtype=float))

    def kin_rhs(self, agent, rho, rho_sens=None):
        ag = self.agents[agent]
        psi = float(rho)
        ux = ag.wnx * psi + ag.px
        uy = ag.wny * psi + ag.py
        cux, sux = np.cos(ux), np.sin(ux)
        cuy, suy = np.cos(uy), np.sin(uy)
        gx = float(ag.awnx @ cux)
        gy = float(ag.awny @ cuy)
        n2 = gx * gx + gy * gy
        if n2 < EPS_CURVE ** 2:
            raise CurveSingularityError(
                f"agent {agent}: degenerate curve point near phase {psi:.6f}")
        h = n2 ** -0.5
        if rho_sens is None:
            return h, None
        h3 = h / n2
        gpx = -float(ag.aw2x @ sux)
        gpy = -float(ag.aw2y @ suy)
        a_psi = -h3 * (gx * gpx + gy * gpy)
        rhs = a_psi * rho_sens
        gx3, gy3 = h3 * gx, h3 * gy
        gxn, gyn = len(ag.ax), len(ag.ay)
        o = self.family.block(agent).start
        # d(speed rate)/d(freq_x): product and phase-advance terms
        dGx_dfx = float(ag.a2pn @ cux) - psi * float(ag.c2x @ sux)
        rhs[o] += -gx3 * dGx_dfx
        rhs[o + 1:o + 1 + gxn] += -gx3 * (ag.wnx * cux)
        rhs[o + 1 + gxn:o + 1 + gxn + gyn] += -gy3 * (ag.wny * cuy)
        rhs[o + 1 + gxn + gyn:o + 1 + 2 * gxn + gyn] += gx3 * (ag.awnx * sux)
        rhs[o + 1 + 2 * gxn + gyn:o + 1 + 2 * gxn + 2 * gyn] += gy3 * (ag.awny * suy)
        return h, rhs


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------

class EllipseFamily:
    """Sequences of ellipses, 5 parameters per segment per agent."""

    name = "ellipse"

    def __init__(self, config: MissionConfig, segments: int = 1):
        if segments < 1:
            raise ConfigError("need at least one ellipse segment")
        self.config = config
        self.n_agents = config.n_agents
        self.n_segments = int(segments)
        self.base_position = config.base.position
        names, groups, agents = [], [], []
        for j in range(self.n_agents):
            for k in range(self.n_segments):
                pre = f"agent{j}.seg{k}."
                for nm, grp in (("center_x", "length"), ("center_y", "length"),
                                ("semi_major", "length"), ("semi_minor", "length"),
                                ("tilt", "angle")):
                    names.append(pre + nm)
                    groups.append(grp)
                    agents.append(j)
        self.layout = ParamLayout(tuple(names), tuple(groups), tuple(agents))

    def block(self, agent: int, segment: int = 0) -> slice:
        off = 5 * (agent * self.n_segments + segment)
        return slice(off, off + 5)

    def prepare(self, theta) -> _PreparedEllipse:
        return _PreparedEllipse(self, theta)

    def default_init(self, seed=0) -> np.ndarray:
        """Seeded start: circles through the base, headed toward the targets."""
        rng = np.random.default_rng(seed)
        cfg = self.config
        radius = min(cfg.size) / 4.0
        centroid = cfg.target_positions.mean(axis=0)
        bearing = centroid - cfg.base.position
        base_ang = math.atan2(bearing[1], bearing[0])
        theta = np.zeros(self.layout.dim)
        for j in range(self.n_agents):
            for k in range(self.n_segments):
                ang = (base_ang + rng.normal(0.0, 0.35)
                       + (j - (self.n_agents - 1) / 2) * 0.6)
                center = cfg.base.position + radius * np.array(
                    [math.cos(ang), math.sin(ang)])
                theta[self.block(j, k)] = [
                    center[0], center[1],
                    radius * (1 + rng.normal(0, 0.05)),
                    radius * (1 + rng.normal(0, 0.05)),
                    _wrap(ang, math.pi)]
        return self.project(theta)

    def project(self, theta) -> np.ndarray:
        """Clip iterates into the feasible box (axis floors, in-mission centers)."""
        out = np.asarray(theta, dtype=float).copy()
        L1, L2 = self.config.size
        hi = max(L1, L2)
        for j in range(self.n_agents):
            for k in range(self.n_segments):
                o = self.block(j, k).start
                out[o + 0] = np.clip(out[o + 0], 0.0, L1)
                out[o + 1] = np.clip(out[o + 1], 0.0, L2)
                out[o + 2] = np.clip(out[o + 2], 0.1, hi)
                out[o + 3] = np.clip(out[o + 3], 0.1, hi)
                out[o + 4] = _wrap(out[o + 4], math.pi)
        return out


class FourierFamily:
    """Truncated Fourier closed curves anchored at the base.

    Per agent the controllable parameters are the x base frequency, the
    harmonic amplitudes of both coordinates, and their phases; the y base
    frequency stays fixed (only the frequency ratio shapes the curve) and
    the constant terms are eliminated by the base anchoring.
    """

    name = "fourier"

    def __init__(self, config: MissionConfig, harmonics=(3, 3), freq_y: float = 1.0):
        gx, gy = int(harmonics[0]), int(harmonics[1])
        if gx < 1 or gy < 1:
            raise ConfigError("need at least one harmonic per coordinate")
        self.config = config
        self.n_agents = config.n_agents
        self.n_segments = 1
        self.harmonics = (gx, gy)
        self.freq_y = float(freq_y)
        self.base_position = config.base.position
        self._per_agent = 1 + 2 * gx + 2 * gy
        names, groups, agents = [], [], []
        for j in range(self.n_agents):
            pre = f"agent{j}."
            names.append(pre + "freq_x")
            groups.append("frequency")
            agents.append(j)
            for n in range(1, gx + 1):
                names.append(pre + f"amp_x{n}"); groups.append("length"); agents.append(j)
            for n in range(1, gy + 1):
                names.append(pre + f"amp_y{n}"); groups.append("length"); agents.append(j)
            for n in range(1, gx + 1):
                names.append(pre + f"phase_x{n}"); groups.append("angle"); agents.append(j)
            for n in range(1, gy + 1):
                names.append(pre + f"phase_y{n}"); groups.append("angle"); agents.append(j)
        self.layout = ParamLayout(tuple(names), tuple(groups), tuple(agents))

    def block(self, agent: int, segment: int = 0) -> slice:
        off = agent * self._per_agent
        return slice(off, off + self._per_agent)

    def prepare(self, theta) -> _PreparedFourier:
        return _PreparedFourier(self, theta)

    def default_init(self, seed=0) -> np.ndarray:
        """Seeded near-circular start through the base with small harmonics."""
        rng = np.random.default_rng(seed)
        cfg = self.config
        gx, gy = self.harmonics
        radius = min(cfg.size) / 4.0
        centroid = cfg.target_positions.mean(axis=0)
        u = centroid - cfg.base.position
        u = u / max(float(np.linalg.norm(u)), 1e-9)
        theta = np.zeros(self.layout.dim)
        for j in range(self.n_agents):
            jitter = rng.normal(0.0, 0.25) + (j - (self.n_agents - 1) / 2) * 0.5
            rad_j = radius * (1 + rng.normal(0.0, 0.05))
            # circle through the base whose center leans toward the targets:
            # center = base - radius*(sin(alpha), cos(alpha))
            alpha = math.atan2(-u[0], -u[1]) + jitter
            v = np.zeros(self._per_agent)
            v[0] = 1.0                                    # freq_x
            v[1] = rad_j                                  # amp_x1
            v[1 + gx] = rad_j                             # amp_y1
            v[1 + gx + gy] = _wrap(alpha, TWO_PI)         # phase_x1
            v[1 + 2 * gx + gy] = _wrap(alpha + math.pi / 2, TWO_PI)
            for n in range(2, gx + 1):
                v[n] = rng.uniform(-0.1, 0.1)
                v[gx + gy + n] = rng.uniform(0.0, TWO_PI)
            for n in range(2, gy + 1):
                v[gx + n] = rng.uniform(-0.1, 0.1)
                v[2 * gx + gy + n] = rng.uniform(0.0, TWO_PI)
            theta[self.block(j)] = v
        return self.project(theta)

    def project(self, theta) -> np.ndarray:
        out = np.asarray(theta, dtype=float).copy()
        gx, gy = self.harmonics
        amp_hi = max(self.config.size)
        for j in range(self.n_agents):
            blk = self.block(j)
            v = out[blk]
            v[0] = np.clip(v[0], 0.2, 5.0)
            v[1:1 + gx + gy] = np.clip(v[1:1 + gx + gy], -amp_hi, amp_hi)
            v[1 + gx + gy:] = _wrap(v[1 + gx + gy:], TWO_PI)
            out[blk] = v
        return out


def segment_schedule(prep: PreparedTrajectory, samples: int = 8192) -> np.ndarray:
    """Completion time of each curve segment at unit traversal speed.

    Entry ``[j, k]`` is the cumulative time at which agent ``j`` finishes its
    ``k``-th revolution (arc length of the first ``k+1`` segments).  Times may
    exceed the mission horizon, in which case the run ends mid-segment.
    """
    fam = prep.family
    E = getattr(fam, "n_segments", 1)
    if samples % 2:
        samples += 1
    u = np.linspace(0.0, TWO_PI, samples + 1)
    w = np.ones(samples + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (TWO_PI / samples) / 3.0
    out = np.zeros((fam.n_agents, E))
    for j in range(fam.n_agents):
        t = 0.0
        for k in range(E):
            speeds = np.linalg.norm(prep.curve_deriv(j, TWO_PI * k + u), axis=-1)
            if np.any(speeds < EPS_CURVE):
                raise CurveSingularityError(
                    f"agent {j} segment {k}: degenerate curve point")
            t += float(w @ speeds)
            out[j, k] = t
    return out
