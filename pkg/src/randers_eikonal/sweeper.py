"""Fast-sweeping solver for the Randers eikonal equation on a Cartesian grid.

Each node takes the smallest valid candidate over eight triangular stencils
built from consecutive Moore neighbours.  A stencil first tries the two-donor
(planar) update; when that is invalid, or one donor is missing, the one-donor
edge updates of its neighbours are tried instead.

The discrete updates are exact for plane waves of
``(grad T + b)^T G^-1 (grad T + b) = 1``, i.e. travel along displacement
``d`` costs ``sqrt(d^T G d) - b.d``: the front moves faster along ``+b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .fields import (UNREACHED, UNREACHED_THRESHOLD, DimensionMismatch, DriftField,
                     GridSpec, MetricField, check_sources)

# (drow, dcol) of the eight neighbours, counter-clockwise from the upper-left
# one with rows growing downward.  Stencil k pairs neighbours k and (k+1) % 8.
NEIGHBOR_OFFSETS = np.array([
    (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0),
], dtype=np.int64)
STENCIL_PAIRS = np.array([(k, (k + 1) % 8) for k in range(8)], dtype=np.int64)

NONE, ONE_POINT, TWO_POINT = 0, 1, 2

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 50

# sweep id -> (outer axis, outer direction, inner direction); axis 0 = columns
SWEEPS = ((0, 1, 1), (1, 1, -1), (0, -1, -1), (1, -1, 1))
SWEEP_TABLE = np.array(SWEEPS, dtype=np.int64)


class NotConverged(RuntimeError):
    pass


class SingularStencil(ArithmeticError):
    pass


@dataclass
class SolveReport:
    iterations: int = 0
    max_delta_history: list = field(default_factory=list)
    converged: bool = False

    @property
    def max_delta(self) -> float:
        return self.max_delta_history[-1] if self.max_delta_history else math.inf


def offset_vector(k: int, h: float) -> np.ndarray:
    """Physical ``(x, y)`` displacement from a node to its neighbour ``k``."""
    dr, dc = NEIGHBOR_OFFSETS[k]
    return np.array([dc * h, dr * h], dtype=np.float64)


# --------------------------------------------------------------------------
# local updates
# --------------------------------------------------------------------------

@njit(cache=True)
def _two_point(T1, T2, m1x, m1y, m2x, m2y, g11, g12, g22, b1, b2):
    """Returns (T0, lambda1, lambda2, status); status 1 valid, 0 invalid, -1 singular."""
    gm1x = g11 * m1x + g12 * m1y
    gm1y = g12 * m1x + g22 * m1y
    gm2x = g11 * m2x + g12 * m2y
    gm2y = g12 * m2x + g22 * m2y
    e11 = m1x * gm1x + m1y * gm1y
    e12 = m1x * gm2x + m1y * gm2y
    e22 = m2x * gm2x + m2y * gm2y
    det = e11 * e22 - e12 * e12
    if not det > 1e-14 * e11 * e22:
        return np.nan, 0.0, 0.0, -1
    q11 = e22 / det
    q12 = -e12 / det
    q22 = e11 / det
    s1 = T1 + m1x * b1 + m1y * b2
    s2 = T2 + m2x * b1 + m2y * b2
    qs1 = q11 * s1 + q12 * s2
    qs2 = q12 * s1 + q22 * s2
    a = q11 + 2.0 * q12 + q22
    bq = qs1 + qs2
    c = s1 * qs1 + s2 * qs2 - 1.0
    disc = bq * bq - a * c
    if disc < 0.0:
        return np.nan, 0.0, 0.0, 0
    T0 = (bq + math.sqrt(disc)) / a
    lam1 = (q11 + q12) * T0 - qs1
    lam2 = (q12 + q22) * T0 - qs2
    if T0 > T1 and T0 > T2 and lam1 >= 0.0 and lam2 >= 0.0:
        return T0, lam1, lam2, 1
    return T0, lam1, lam2, 0


@njit(cache=True)
def _one_point(Ti, mx, my, g11, g12, g22, b1, b2):
    return Ti + mx * b1 + my * b2 + math.sqrt(g11 * mx * mx + 2.0 * g12 * mx * my + g22 * my * my)


@njit(cache=True)
def _best_candidate(T, g11, g12, g22, b1, b2, r, c, h, skip_above):
    """Smallest valid update at node (r, c) from its current neighbours.

    Stencils whose donors are all ``>= skip_above`` cannot improve the node and
    are skipped; pass ``inf`` to evaluate every stencil.  Returns
    ``(value, stencil, kind, donor1, donor2)`` with flat donor indices.
    """
    rows, cols = T.shape
    G11 = g11[r, c]
    G12 = g12[r, c]
    G22 = g22[r, c]
    B1 = b1[r, c]
    B2 = b2[r, c]
    best = np.inf
    best_k = -1
    best_kind = 0
    best_d1 = -1
    best_d2 = -1
    for k in range(8):
        n1 = k
        n2 = (k + 1) % 8
        r1 = r + NEIGHBOR_OFFSETS[n1, 0]
        c1 = c + NEIGHBOR_OFFSETS[n1, 1]
        r2 = r + NEIGHBOR_OFFSETS[n2, 0]
        c2 = c + NEIGHBOR_OFFSETS[n2, 1]
        in1 = 0 <= r1 < rows and 0 <= c1 < cols
        in2 = 0 <= r2 < rows and 0 <= c2 < cols
        T1 = T[r1, c1] if in1 else np.inf
        T2 = T[r2, c2] if in2 else np.inf
        ok1 = in1 and T1 < UNREACHED_THRESHOLD
        ok2 = in2 and T2 < UNREACHED_THRESHOLD
        if not (ok1 or ok2):
            continue
        if T1 >= skip_above and T2 >= skip_above:
            continue
        m1x = NEIGHBOR_OFFSETS[n1, 1] * h
        m1y = NEIGHBOR_OFFSETS[n1, 0] * h
        m2x = NEIGHBOR_OFFSETS[n2, 1] * h
        m2y = NEIGHBOR_OFFSETS[n2, 0] * h
        planar = False
        if ok1 and ok2:
            t0, l1, l2, status = _two_point(T1, T2, m1x, m1y, m2x, m2y, G11, G12, G22, B1, B2)
            if status == 1:
                planar = True
                if t0 < best or (t0 == best and best_kind == 1):
                    best = t0
                    best_k = k
                    best_kind = 2
                    best_d1 = r1 * cols + c1
                    best_d2 = r2 * cols + c2
        if not planar:
            if ok1:
                t0 = _one_point(T1, m1x, m1y, G11, G12, G22, B1, B2)
                if t0 > T1 and t0 < best:
                    best = t0
                    best_k = k
                    best_kind = 1
                    best_d1 = r1 * cols + c1
                    best_d2 = -1
            if ok2:
                t0 = _one_point(T2, m2x, m2y, G11, G12, G22, B1, B2)
                if t0 > T2 and t0 < best:
                    best = t0
                    best_k = k
                    best_kind = 1
                    best_d1 = r2 * cols + c2
                    best_d2 = -1
    return best, best_k, best_kind, best_d1, best_d2


@njit(cache=True)
def _relax(T, g11, g12, g22, b1, b2, r, c, h):
    """New value of node (r, c): its best current candidate.

    The candidate normally only decreases as the front sweeps past, so the
    search skips stencils that cannot beat the current value.  Under strong
    drift a donor dropping below the node can invalidate the stencil that set
    it; the value is then replaced by the best remaining candidate, even if
    larger, so converged fields satisfy the update rule exactly.
    """
    cur = T[r, c]
    v = _best_candidate(T, g11, g12, g22, b1, b2, r, c, h, cur)[0]
    if v <= cur:
        return v
    if cur >= UNREACHED_THRESHOLD:
        return cur
    v = _best_candidate(T, g11, g12, g22, b1, b2, r, c, h, np.inf)[0]
    return v if v < np.inf else cur


@njit(cache=True)
def _sweep(T, g11, g12, g22, b1, b2, src, h, sweep_id):
    rows, cols = T.shape
    axis = SWEEP_TABLE[sweep_id, 0]
    outer_dir = SWEEP_TABLE[sweep_id, 1]
    inner_dir = SWEEP_TABLE[sweep_id, 2]
    n_outer = cols if axis == 0 else rows
    n_inner = rows if axis == 0 else cols
    for io in range(n_outer):
        o = io if outer_dir > 0 else n_outer - 1 - io
        for ii in range(n_inner):
            i = ii if inner_dir > 0 else n_inner - 1 - ii
            if axis == 0:
                r = i
                c = o
            else:
                r = o
                c = i
            if src[r, c]:
                continue
            T[r, c] = _relax(T, g11, g12, g22, b1, b2, r, c, h)


@njit(cache=True)
def _jacobi_pass(T_old, T_new, g11, g12, g22, b1, b2, src, h):
    rows, cols = T_old.shape
    for r in range(rows):
        for c in range(cols):
            cur = T_old[r, c]
            if src[r, c]:
                T_new[r, c] = cur
                continue
            T_new[r, c] = _relax(T_old, g11, g12, g22, b1, b2, r, c, h)


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def two_point_update(T1, T2, m1, m2, G, b):
    """Planar update from two donors.

    ``m1``/``m2`` are physical displacements from the updated node to its
    donors.  Returns ``(T0, lambda1, lambda2, valid)``; ``T0`` is NaN when the
    quadratic has no real root.  Raises :class:`SingularStencil` when
    ``M^T G M`` is numerically singular.
    """
    G = np.asarray(G, dtype=float)
    t0, l1, l2, status = _two_point(float(T1), float(T2), float(m1[0]), float(m1[1]),
                                    float(m2[0]), float(m2[1]), G[0, 0], G[0, 1], G[1, 1],
                                    float(b[0]), float(b[1]))
    if status < 0:
        raise SingularStencil("stencil metric M^T G M is singular")
    return t0, l1, l2, bool(status == 1)


def one_point_update(Ti, mi, G, b) -> float:
    G = np.asarray(G, dtype=float)
    return _one_point(float(Ti), float(mi[0]), float(mi[1]), G[0, 0], G[0, 1], G[1, 1],
                      float(b[0]), float(b[1]))


@dataclass
class NodeUpdate:
    value: float
    stencil: int
    kind: int
    donors: tuple


def node_update(node, T, G: MetricField, b: DriftField, h: float = 1.0) -> NodeUpdate:
    """Best candidate at ``node`` given the current field ``T``.

    Ties go to the lowest stencil index, with planar updates preferred over
    edge updates.  If nothing improves on ``T[node]`` the current value is
    returned with no donors.
    """
    r, c = node
    T = np.ascontiguousarray(T, dtype=np.float64)
    v, k, kind, d1, d2 = _best_candidate(T, G.g11, G.g12, G.g22, b.b1, b.b2, r, c, float(h), np.inf)
    if not v < T[r, c]:
        return NodeUpdate(float(T[r, c]), -1, NONE, ())
    donors = tuple(int(d) for d in (d1, d2) if d >= 0)
    return NodeUpdate(float(v), int(k), int(kind), donors)


def _prepare(G, b, src, spec):
    if b is None:
        b = DriftField.zeros(G.shape)
    shape = G.shape
    if spec is not None and tuple(spec.shape) != tuple(shape):
        raise DimensionMismatch(f"grid spec {spec.shape} does not match metric {shape}")
    if b.shape != shape:
        raise DimensionMismatch(f"drift shape {b.shape} does not match metric {shape}")
    src = check_sources(src, shape)
    h = spec.h if spec is not None else 1.0
    return b, src, float(h)


def _initial(src, source_values):
    T = np.full(src.shape, UNREACHED)
    if source_values is None:
        T[src] = 0.0
    else:
        T[src] = np.asarray(source_values, dtype=np.float64)[src]
    return T


def solve(G: MetricField, b: DriftField | None, src, spec: GridSpec | None = None,
          tol: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
          sweep_order=(0, 1, 2, 3), source_values=None):
    """Arrival times from the source mask by alternating Gauss-Seidel sweeps.

    One iteration runs four sweeps: columns left to right, rows top to bottom,
    columns right to left, rows bottom to top.  Iterations stop once the
    largest per-node change drops below ``tol``.  ``source_values`` optionally
    prescribes non-zero times at the source nodes.

    Returns ``(T, report)``; unreached nodes hold ``UNREACHED``.
    """
    b, src, h = _prepare(G, b, src, spec)
    T = _initial(src, source_values)
    report = SolveReport()
    g11, g12, g22, b1, b2 = G.g11, G.g12, G.g22, b.b1, b.b2
    for _ in range(max_iters):
        prev = T.copy()
        for s in sweep_order:
            _sweep(T, g11, g12, g22, b1, b2, src, h, int(s))
        delta = float(np.max(np.abs(T - prev)))
        report.iterations += 1
        report.max_delta_history.append(delta)
        if delta < tol:
            report.converged = True
            break
    return T, report


def solve_jacobi(G: MetricField, b: DriftField | None, src, spec: GridSpec | None = None,
                 tol: float = DEFAULT_TOL, max_iters: int | None = None, source_values=None):
    """Same fixed point as :func:`solve`, computed by simultaneous node updates.

    Information moves about one cell per iteration, so the iteration count
    scales with the grid diameter; ``max_iters`` defaults to ``4 * (rows + cols)``.
    """
    b, src, h = _prepare(G, b, src, spec)
    if max_iters is None:
        max_iters = 4 * (G.shape[0] + G.shape[1])
    T = _initial(src, source_values)
    T_new = np.empty_like(T)
    report = SolveReport()
    for _ in range(max_iters):
        _jacobi_pass(T, T_new, G.g11, G.g12, G.g22, b.b1, b.b2, src, h)
        delta = float(np.max(np.abs(T_new - T)))
        T, T_new = T_new, T
        report.iterations += 1
        report.max_delta_history.append(delta)
        if delta < tol:
            report.converged = True
            break
    return T, report
