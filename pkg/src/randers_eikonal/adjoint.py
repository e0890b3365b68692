"""Implicit differentiation of the converged sweeping fixed point.

Every reached non-source node owns one residual ``R_i(T, G_i, b_i) = 0``
taken from the update that wins at the converged field.  Ordering nodes by
arrival time makes ``J = dR/dT`` lower triangular, so the adjoint system
``J^T lam = dL/dT`` is solved by one back-substitution in decreasing ``T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

from .fields import UNREACHED_THRESHOLD, DriftField, MetricField
from .sweeper import ONE_POINT, TWO_POINT, _best_candidate

DEGENERATE_REL = 1e-12


class InconsistentFixedPoint(ValueError):
    """The arrival field is not a converged fixed point of the update rule."""


class DegenerateDiagonal(ArithmeticError):
    pass


@dataclass
class StencilRecords:
    """Winning update of every reached non-source node, flattened row-major."""
    shape: tuple
    h: float
    kind: np.ndarray       # 0 none, 1 one-point, 2 two-point
    stencil: np.ndarray    # active stencil index, -1 if none
    donor1: np.ndarray     # flat donor indices, -1 if absent
    donor2: np.ndarray
    value: np.ndarray      # recomputed update value

    @property
    def active(self) -> np.ndarray:
        return self.kind > 0

    def __len__(self) -> int:
        return int(np.count_nonzero(self.kind))

    def donors(self, i: int) -> tuple:
        return tuple(int(d) for d in (self.donor1[i], self.donor2[i]) if d >= 0)


@dataclass
class JacobianEntries:
    """Per-node residual partials for the recorded updates."""
    diag: np.ndarray        # dR_i/dT_i
    off1: np.ndarray        # dR_i/dT_donor1
    off2: np.ndarray        # dR_i/dT_donor2 (0 for one-point records)
    dg11: np.ndarray
    dg12: np.ndarray        # both off-diagonal entries of dR/dG, summed
    dg22: np.ndarray
    db1: np.ndarray
    db2: np.ndarray
    n_degenerate: int = 0


@dataclass
class ParamGradients:
    g11: np.ndarray
    g12: np.ndarray
    g22: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def channels(self) -> list[np.ndarray]:
        return [self.g11, self.g12, self.g22, self.b1, self.b2]

    def stacked(self) -> np.ndarray:
        return np.stack(self.channels())

    def __add__(self, other: "ParamGradients") -> "ParamGradients":
        return ParamGradients(*(a + b for a, b in zip(self.channels(), other.channels())))

    @classmethod
    def zeros(cls, shape) -> "ParamGradients":
        return cls(*(np.zeros(shape) for _ in range(5)))


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _identify(T, g11, g12, g22, b1, b2, src, h, kind, stencil, d1, d2, value):
    rows, cols = T.shape
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if src[r, c] or not T[r, c] < UNREACHED_THRESHOLD:
                continue
            v, k, knd, a, bb = _best_candidate(T, g11, g12, g22, b1, b2, r, c, h, np.inf)
            if knd == 0:
                continue
            kind[i] = knd
            stencil[i] = k
            d1[i] = a
            d2[i] = bb
            value[i] = v


@njit(cache=True)
def _entries(T, g11, g12, g22, b1, b2, h, kind, d1, d2,
             diag, off1, off2, pg11, pg12, pg22, pb1, pb2):
    rows, cols = T.shape
    n_deg = 0
    for i in range(rows * cols):
        if kind[i] == 0:
            continue
        r = i // cols
        c = i - r * cols
        G11 = g11[r, c]
        G12 = g12[r, c]
        G22 = g22[r, c]
        B1 = b1[r, c]
        B2 = b2[r, c]
        T0 = T[r, c]
        r1 = d1[i] // cols
        c1 = d1[i] - r1 * cols
        m1x = (c1 - c) * h
        m1y = (r1 - r) * h
        if kind[i] == 2:
            r2 = d2[i] // cols
            c2 = d2[i] - r2 * cols
            m2x = (c2 - c) * h
            m2y = (r2 - r) * h
            gm1x = G11 * m1x + G12 * m1y
            gm1y = G12 * m1x + G22 * m1y
            gm2x = G11 * m2x + G12 * m2y
            gm2y = G12 * m2x + G22 * m2y
            e11 = m1x * gm1x + m1y * gm1y
            e12 = m1x * gm2x + m1y * gm2y
            e22 = m2x * gm2x + m2y * gm2y
            det = e11 * e22 - e12 * e12
            q11 = e22 / det
            q12 = -e12 / det
            q22 = e11 / det
            u1 = T[r1, c1] + m1x * B1 + m1y * B2 - T0
            u2 = T[r2, c2] + m2x * B1 + m2y * B2 - T0
            qu1 = q11 * u1 + q12 * u2
            qu2 = q12 * u1 + q22 * u2
            jd = -2.0 * (qu1 + qu2)
            o1 = 2.0 * qu1
            o2 = 2.0 * qu2
            # w = M Q u
            wx = m1x * qu1 + m2x * qu2
            wy = m1y * qu1 + m2y * qu2
            pb1[i] = 2.0 * wx
            pb2[i] = 2.0 * wy
            pg11[i] = -wx * wx
            pg12[i] = -2.0 * wx * wy
            pg22[i] = -wy * wy
            scale = max(abs(o1), abs(o2))
        else:
            rr = T[r1, c1] + m1x * B1 + m1y * B2 - T0
            jd = -2.0 * rr
            o1 = 2.0 * rr
            o2 = 0.0
            pb1[i] = 2.0 * rr * m1x
            pb2[i] = 2.0 * rr * m1y
            pg11[i] = -m1x * m1x
            pg12[i] = -2.0 * m1x * m1y
            pg22[i] = -m1y * m1y
            scale = abs(o1)
        if scale == 0.0:
            scale = 1.0
        if abs(jd) < DEGENERATE_REL * scale:
            n_deg += 1
            jd = DEGENERATE_REL * scale if jd >= 0.0 else -DEGENERATE_REL * scale
        diag[i] = jd
        off1[i] = o1
        off2[i] = o2
    return n_deg


@njit(cache=True)
def _back_substitute(order, g, diag, off1, off2, d1, d2, kind, lam):
    acc = np.zeros(g.shape[0])
    for idx in range(order.shape[0]):
        i = order[idx]
        li = (g[i] - acc[i]) / diag[i]
        lam[i] = li
        acc[d1[i]] += off1[i] * li
        if kind[i] == 2:
            acc[d2[i]] += off2[i] * li


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def identify_stencils(T, G: MetricField, b: DriftField, src, h: float = 1.0,
                      tol: float = 1e-6) -> StencilRecords:
    """Record the winning update of every reached non-source node.

    Uses the same candidate order and tie-breaking as the forward sweeps.
    Raises :class:`InconsistentFixedPoint` if any recomputed value is more
    than ``100 * tol`` away from ``T``.
    """
    T = np.ascontiguousarray(T, dtype=np.float64)
    src = np.asarray(src, dtype=bool)
    n = T.size
    kind = np.zeros(n, dtype=np.int8)
    stencil = np.full(n, -1, dtype=np.int8)
    d1 = np.full(n, -1, dtype=np.int64)
    d2 = np.full(n, -1, dtype=np.int64)
    value = np.zeros(n)
    _identify(T, G.g11, G.g12, G.g22, b.b1, b.b2, src, float(h), kind, stencil, d1, d2, value)
    active = kind > 0
    err = np.abs(value[active] - T.ravel()[active])
    if err.size and err.max() > 100 * tol:
        bad = int(np.count_nonzero(err > 100 * tol))
        raise InconsistentFixedPoint(
            f"{bad} nodes differ from their recomputed update by up to {err.max():.3e}")
    return StencilRecords(T.shape, float(h), kind, stencil, d1, d2, value)


def jacobian_entries(records: StencilRecords, T, G: MetricField, b: DriftField) -> JacobianEntries:
    """Residual partials of every recorded update.

    Two-point records use ``R = u^T Q u - 1`` with ``u = s - T0``; one-point
    records use ``R = r^2 - m^T G m`` with ``r = T_i + m.b - T0``.  A
    vanishing ``dR/dT0`` is clamped to ``1e-12`` of the local scale with its
    sign kept, and counted in ``n_degenerate``.
    """
    T = np.ascontiguousarray(T, dtype=np.float64)
    n = T.size
    arrs = [np.zeros(n) for _ in range(8)]
    n_deg = _entries(T, G.g11, G.g12, G.g22, b.b1, b.b2, records.h, records.kind,
                     records.donor1, records.donor2, *arrs)
    return JacobianEntries(*arrs, n_degenerate=int(n_deg))


def adjoint_order(records: StencilRecords, T) -> np.ndarray:
    """Active nodes sorted by decreasing ``T``; ties by increasing node index."""
    idx = np.flatnonzero(records.active)
    t = np.asarray(T).ravel()[idx]
    return idx[np.argsort(-t, kind="stable")]


def solve_adjoint(records: StencilRecords, T, g, entries: JacobianEntries | None = None,
                  G: MetricField | None = None, b: DriftField | None = None) -> np.ndarray:
    """Solve ``J^T lam = g`` by back-substitution in decreasing arrival time.

    ``g`` is ``dL/dT`` on the grid.  Either precomputed ``entries`` or the
    fields ``G``/``b`` must be supplied.  Sources and unreached nodes get
    ``lam = 0``.
    """
    if entries is None:
        if G is None or b is None:
            raise TypeError("solve_adjoint needs either entries or the metric and drift fields")
        entries = jacobian_entries(records, T, G, b)
    order = adjoint_order(records, T)
    gflat = np.ascontiguousarray(np.asarray(g, dtype=np.float64).ravel())
    lam = np.zeros(gflat.size)
    _back_substitute(order, gflat, entries.diag, entries.off1, entries.off2,
                     records.donor1, records.donor2, records.kind, lam)
    return lam.reshape(records.shape)


def param_gradients(records: StencilRecords, lam, entries: JacobianEntries) -> ParamGradients:
    """``dL/dtheta_i = -lam_i * dR_i/dtheta_i`` for all five channels."""
    lam = np.asarray(lam).ravel()
    shape = records.shape
    return ParamGradients(*((-lam * p).reshape(shape) for p in
                            (entries.dg11, entries.dg12, entries.dg22, entries.db1, entries.db2)))


def assemble_jacobian(records: StencilRecords, entries: JacobianEntries, src=None) -> sp.csr_matrix:
    """Sparse ``dR/dT`` over all grid nodes; rows of inactive nodes are empty.

    Columns of source donors are dropped since sources are not unknowns.
    """
    n = records.kind.size
    src_flat = np.zeros(n, dtype=bool) if src is None else np.asarray(src, dtype=bool).ravel()
    idx = np.flatnonzero(records.active)
    rows = [idx]
    cols = [idx]
    vals = [entries.diag[idx]]
    for donors, off in ((records.donor1, entries.off1), (records.donor2, entries.off2)):
        sel = idx[donors[idx] >= 0]
        sel = sel[~src_flat[donors[sel]]]
        rows.append(sel)
        cols.append(donors[sel])
        vals.append(off[sel])
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def adjoint_residual(records: StencilRecords, entries: JacobianEntries, lam, g, src=None) -> float:
    """``max |J^T lam - g|`` over active nodes, from the assembled matrix."""
    J = assemble_jacobian(records, entries, src)
    res = J.T @ np.asarray(lam).ravel() - np.asarray(g).ravel()
    act = records.active
    return float(np.max(np.abs(res[act]))) if act.any() else 0.0


def loss_grad_mse(T, obs_mask, obs_values):
    """Data term ``0.5 * sum (T - That)^2`` over observed nodes and its ``dL/dT``.

    Observed nodes the front never reached contribute nothing here; their
    count is returned so callers can penalise them.
    Returns ``(loss, g, n_unreached)``.
    """
    T = np.asarray(T, dtype=np.float64)
    mask = np.asarray(obs_mask, dtype=bool)
    reached = T < UNREACHED_THRESHOLD
    use = mask & reached
    g = np.zeros_like(T)
    g[use] = T[use] - np.asarray(obs_values, dtype=np.float64)[use]
    loss = 0.5 * float(np.sum(g[use] ** 2))
    return loss, g, int(np.count_nonzero(mask & ~reached))


def gradient(T, G: MetricField, b: DriftField, src, h: float, g, tol: float = 1e-6):
    """Full backward pass: ``dL/dT`` on the grid to per-node parameter gradients.

    Returns ``(ParamGradients, lam, records, entries)``.
    """
    records = identify_stencils(T, G, b, src, h, tol)
    entries = jacobian_entries(records, T, G, b)
    lam = solve_adjoint(records, T, g, entries)
    return param_gradients(records, lam, entries), lam, records, entries


def upwind_cone(records: StencilRecords, node: int) -> np.ndarray:
    """Boolean mask of nodes reachable from ``node`` along donor edges."""
    seen = np.zeros(records.kind.size, dtype=bool)
    stack = [int(node)]
    while stack:
        i = stack.pop()
        if seen[i]:
            continue
        seen[i] = True
        for d in records.donors(i):
            if not seen[d]:
                stack.append(d)
    return seen.reshape(records.shape)

