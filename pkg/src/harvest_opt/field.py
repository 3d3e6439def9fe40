"""Excitation field over the mission space.

Target backlogs are spread over the whole mission rectangle as a density so
that the objective responds to agent motion even while no queue or range
event is excited.  This module provides:

* the convex hull of the target set (monotone chain),
* the backlog density ``sum_i weight_i * backlog_i / clamp_dist_i(w)`` and
  the analogous onboard density anchored at the base,
* a uniform midpoint quadrature grid with precomputed moments that reduce
  every field integral appearing in the objective and its gradient to a few
  scalars per (target, agent) pair,
* the per-target constants equal to the hull integral of the unit density,
  which tie the hull integral of the density to the weighted backlog sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import ConfigError, MissionConfig

__all__ = [
    "HullPolygon",
    "convex_hull",
    "QuadratureGrid",
    "backlog_density",
    "onboard_density",
    "travel_cost",
    "FieldMoments",
    "quadrature_field_cost",
    "hull_density_constant",
]

log = logging.getLogger("harvest_opt")


# ---------------------------------------------------------------------------
# convex hull
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HullPolygon:
    """Convex hull with counter-clockwise vertices; may be degenerate."""

    vertices: np.ndarray          # (K, 2)
    degenerate: bool              # fewer than 3 distinct extreme points

    @property
    def area(self) -> float:
        v = self.vertices
        if len(v) < 3:
            return 0.0
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def contains(self, points) -> np.ndarray:
        """Boundary-inclusive membership test for an array of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.degenerate:
            return np.zeros(len(pts), dtype=bool)
        v = self.vertices
        inside = np.ones(len(pts), dtype=bool)
        for k in range(len(v)):
            a, b = v[k], v[(k + 1) % len(v)]
            cross = ((b[0] - a[0]) * (pts[:, 1] - a[1])
                     - (b[1] - a[1]) * (pts[:, 0] - a[0]))
            inside &= cross >= -1e-12
        return inside

    def bounding_box(self):
        v = self.vertices
        return v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max()


def convex_hull(points) -> HullPolygon:
    """Monotone-chain convex hull of a point set.

    One or two distinct points (or any collinear set) yield a degenerate
    hull, flagged rather than rejected.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) == 1:
        return HullPolygon(np.array(uniq), degenerate=True)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in uniq:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(uniq):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    verts = np.array(lower[:-1] + upper[:-1])
    degenerate = len(verts) < 3
    if degenerate:
        verts = np.array(uniq)
        log.info("convex hull is degenerate (%d extreme points)", len(verts))
    return HullPolygon(verts, degenerate=degenerate)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def clamped_distance(points, center, clamp: float) -> np.ndarray:
    """Distance to ``center`` floored at ``clamp`` (keeps densities bounded)."""
    pts = np.asarray(points, dtype=float)
    d = np.linalg.norm(pts - np.asarray(center, dtype=float), axis=-1)
    return np.maximum(d, clamp)


def backlog_density(points, target_positions, clamp_radii, weights, backlog):
    """Backlog spread over space: ``sum_i w_i X_i / max(|p - t_i|, clamp_i)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(len(pts))
    for ti, ci, wi, xi in zip(np.atleast_2d(target_positions),
                              np.atleast_1d(clamp_radii),
                              np.atleast_1d(weights),
                              np.atleast_1d(backlog)):
        out += wi * xi / clamped_distance(pts, ti, ci)
    return out


def onboard_density(points, base_position, base_clamp, weights, onboard_j):
    """Onboard load of one agent spread around the base, same construction."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    total = float(np.dot(np.atleast_1d(weights), np.atleast_1d(onboard_j)))
    return total / clamped_distance(pts, base_position, base_clamp)


def travel_cost(points, agent_position) -> np.ndarray:
    """Quadratic travel cost ``|p - s|**2`` of reaching each point."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    diff = pts - np.asarray(agent_position, dtype=float)
    return np.sum(diff * diff, axis=-1)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

class QuadratureGrid:
    """Uniform midpoint grid over a rectangle; weights sum to the area."""

    def __init__(self, size, shape):
        L1, L2 = size
        nx, ny = shape
        if nx < 2 or ny < 2:
            raise ConfigError("quadrature grid needs at least 2x2 cells")
        self.size = (float(L1), float(L2))
        self.shape = (int(nx), int(ny))
        xs = (np.arange(nx) + 0.5) * (L1 / nx)
        ys = (np.arange(ny) + 0.5) * (L2 / ny)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        self.points = np.column_stack([gx.ravel(), gy.ravel()])
        self.cell_weight = (L1 / nx) * (L2 / ny)

    @property
    def total_weight(self) -> float:
        return self.cell_weight * len(self.points)

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_weight)


class FieldMoments:
    """Grid moments that factor every field integral used by the objective.

    For each target ``i`` (and the base) precompute over the mission space
    ``S`` the moments of the reciprocal clamped distance ``1/d_i(w)``:

      m0 = integral  1 / d_i(w) dw
      m1 = integral  w / d_i(w) dw           (2-vector)
      m2 = integral |w|^2 / d_i(w) dw

    Since the travel cost expands as ``|s|^2 - 2 s.w + |w|^2``, the integral
    of ``travel_cost(w, s) / d_i(w)`` equals ``|s|^2 m0 - 2 s.m1 + m2`` --
    identical to the explicit grid sum, but O(1) per evaluation.
    """

    def __init__(self, config: MissionConfig, grid: QuadratureGrid = None):
        self.config = config
        self.grid = grid or QuadratureGrid(config.size, config.grid_shape)
        pts = self.grid.points
        w = self.grid.cell_weight
        M = config.n_targets
        self.m0 = np.zeros(M)
        self.m1 = np.zeros((M, 2))
        self.m2 = np.zeros(M)
        norms2 = np.sum(pts * pts, axis=1)
        for i in range(M):
            inv = 1.0 / clamped_distance(pts, config.target_positions[i],
                                         config.clamp_radii[i])
            self.m0[i] = np.sum(inv) * w
            self.m1[i] = pts.T @ inv * w
            self.m2[i] = np.sum(norms2 * inv) * w
        inv_b = 1.0 / clamped_distance(pts, config.base.position,
                                       config.base_clamp_radius)
        self.b0 = float(np.sum(inv_b) * w)
        self.b1 = pts.T @ inv_b * w
        self.b2 = float(np.sum(norms2 * inv_b) * w)

    # -- evaluation -------------------------------------------------------

    def travel_moments(self, positions):
        """``integral travel_cost(w, s_j)/d_i(w) dw`` for all agents/targets.

        Returns ``(target_part, base_part)`` with shapes (N, M) and (N,).
        """
        s = np.atleast_2d(np.asarray(positions, dtype=float))
        s2 = np.sum(s * s, axis=1)
        tgt = s2[:, None] * self.m0[None, :] - 2.0 * s @ self.m1.T + self.m2[None, :]
        base = s2 * self.b0 - 2.0 * s @ self.b1 + self.b2
        return tgt, base

    def pull_moments(self, positions):
        """``integral (s_j - w)/d_i(w) dw`` for all agents/targets.

        Returns ``(target_part, base_part)`` with shapes (N, M, 2), (N, 2).
        """
        s = np.atleast_2d(np.asarray(positions, dtype=float))
        tgt = s[:, None, :] * self.m0[None, :, None] - self.m1[None, :, :]
        base = s * self.b0 - self.b1[None, :]
        return tgt, base

    def field_cost(self, positions, backlog, onboard) -> float:
        """Total field term: agents attracted to backlogs and to the base."""
        cfg = self.config
        wx = cfg.target_weights * np.asarray(backlog)          # (M,)
        wz = cfg.target_weights @ np.asarray(onboard)          # (N,)
        tgt, base = self.travel_moments(positions)
        return float(np.sum(tgt @ wx) + np.sum(base * wz))


def quadrature_field_cost(config, grid, positions, backlog, onboard) -> float:
    """Explicit grid evaluation of the field term (reference path).

    Identical (up to roundoff) to ``FieldMoments.field_cost`` on the same
    grid; kept as the slow transparent formulation for tests and dumps.
    """
    pts = grid.points
    dens_t = backlog_density(pts, config.target_positions, config.clamp_radii,
                             config.target_weights, backlog)
    total = 0.0
    for j in range(config.n_agents):
        dens_b = onboard_density(pts, config.base.position,
                                 config.base_clamp_radius,
                                 config.target_weights, np.asarray(onboard)[:, j])
        total += grid.integrate((dens_t + dens_b) * travel_cost(pts, positions[j]))
    return total


# ---------------------------------------------------------------------------
# hull density constants
# ---------------------------------------------------------------------------

def hull_density_constant(hull: HullPolygon, target_position, clamp_radius: float,
                          weight: float = 1.0, resolution: int = 400) -> float:
    """Hull integral of one target's unit density.

    ``c_i = weight * integral_hull dw / max(|w - t_i|, clamp)``; multiplying
    by the backlog gives that target's share of the hull-integrated density.
    Uses midpoint quadrature over the hull bounding box with point-in-polygon
    masking.  Degenerate hulls have no interior and are rejected.
    """
    if hull.degenerate:
        raise ConfigError("hull is degenerate; density constant undefined")
    x0, x1, y0, y1 = hull.bounding_box()
    nx = ny = int(resolution)
    xs = x0 + (np.arange(nx) + 0.5) * ((x1 - x0) / nx)
    ys = y0 + (np.arange(ny) + 0.5) * ((y1 - y0) / ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    cell = ((x1 - x0) / nx) * ((y1 - y0) / ny)
    mask = hull.contains(pts)
    inv = 1.0 / clamped_distance(pts[mask], target_position, clamp_radius)
    return float(weight * np.sum(inv) * cell)


def hull_disk(center, radius: float, sides: int = 256) -> HullPolygon:
    """Regular polygon approximating a disk (test geometry helper)."""
    ang = np.linspace(0.0, 2.0 * math.pi, sides, endpoint=False)
    verts = np.column_stack([center[0] + radius * np.cos(ang),
                             center[1] + radius * np.sin(ang)])
    return convex_hull(verts)
