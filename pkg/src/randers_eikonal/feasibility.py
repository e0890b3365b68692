"""Feasibility projections for (G, b) and spatial regularisers.

All functions work node-wise on arrays of any matching shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonSPDInput(ValueError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    eps_min: float = 1e-3
    lambda_max: float = 1e3
    tau: float = 0.95
    euclid_cap: float = 10.0

    def __post_init__(self):
        if not 0 < self.eps_min < self.lambda_max:
            raise ValueError("need 0 < eps_min < lambda_max")
        if not 0 < self.tau < 1:
            raise ValueError("need 0 < tau < 1")
        if not self.euclid_cap > 0:
            raise ValueError("euclid_cap must be positive")


DEFAULT_PROJECTION = ProjectionConfig()


def sym_eig(g11, g12, g22):
    """Closed-form eigen-decomposition of symmetric 2x2 tensors.

    Returns ``(lam_plus, lam_minus, cos, sin)`` where ``(cos, sin)`` is the
    eigenvector of ``lam_plus`` at angle ``0.5 * atan2(2 g12, g11 - g22)``.
    """
    g11 = np.asarray(g11, dtype=np.float64)
    g12 = np.asarray(g12, dtype=np.float64)
    g22 = np.asarray(g22, dtype=np.float64)
    mean = 0.5 * (g11 + g22)
    rad = 0.5 * np.sqrt((g11 - g22) ** 2 + 4.0 * g12 ** 2)
    theta = 0.5 * np.arctan2(2.0 * g12, g11 - g22)
    return mean + rad, mean - rad, np.cos(theta), np.sin(theta)


def _compose(lp, lm, c, s):
    """``U diag(lp, lm) U^T`` with ``U = [[c, -s], [s, c]]``."""
    return (lp * c * c + lm * s * s, (lp - lm) * c * s, lp * s * s + lm * c * c)


def project_spd(g11, g12, g22, cfg: ProjectionConfig = DEFAULT_PROJECTION):
    """Clamp eigenvalues into ``[eps_min, lambda_max]``.

    Nodes already in range are returned bit-for-bit unchanged.
    """
    g11 = np.array(g11, dtype=np.float64)
    g12 = np.array(g12, dtype=np.float64)
    g22 = np.array(g22, dtype=np.float64)
    lp, lm, c, s = sym_eig(g11, g12, g22)
    bad = (lm < cfg.eps_min) | (lp > cfg.lambda_max) | (lp < cfg.eps_min) | (lm > cfg.lambda_max)
    if np.any(bad):
        lpc = np.clip(lp[bad], cfg.eps_min, cfg.lambda_max)
        lmc = np.clip(lm[bad], cfg.eps_min, cfg.lambda_max)
        n11, n12, n22 = _compose(lpc, lmc, c[bad], s[bad])
        g11[bad] = n11
        g12[bad] = n12
        g22[bad] = n22
    return g11, g12, g22


def drift_dual_norm(b1, b2, g11, g12, g22):
    """``||b||_{G^-1}`` per node.

    Evaluated in the eigenbasis of ``G``; the cofactor form loses digits to
    cancellation in ``det G`` when ``G`` is nearly singular.
    """
    lp, lm, c, s = sym_eig(g11, g12, g22)
    up = b1 * c + b2 * s
    um = b2 * c - b1 * s
    return np.sqrt(up * up / lp + um * um / lm)


def project_drift(b1, b2, g11, g12, g22, cfg: ProjectionConfig = DEFAULT_PROJECTION):
    """Clip ``|b|`` to ``euclid_cap``, then rescale so ``||b||_{G^-1} <= tau``.

    ``G`` must already be SPD.  Direction is preserved and feasible nodes are
    left untouched.
    """
    b1 = np.array(b1, dtype=np.float64)
    b2 = np.array(b2, dtype=np.float64)
    g11 = np.asarray(g11, dtype=np.float64)
    g12 = np.asarray(g12, dtype=np.float64)
    g22 = np.asarray(g22, dtype=np.float64)
    e = np.hypot(b1, b2)
    over = e > cfg.euclid_cap
    if np.any(over):
        f = cfg.euclid_cap / e[over]
        b1[over] *= f
        b2[over] *= f
    nrm = drift_dual_norm(b1, b2, g11, g12, g22)
    over = nrm > cfg.tau
    if np.any(over):
        f = cfg.tau / nrm[over]
        b1[over] *= f
        b2[over] *= f
        # guard against the rescaled norm landing a few ulps above tau
        nrm2 = drift_dual_norm(b1, b2, g11, g12, g22)
        again = over & (nrm2 > cfg.tau)
        if np.any(again):
            f = np.nextafter(cfg.tau / nrm2[again], 0.0)
            b1[again] *= f
            b2[again] *= f
    return b1, b2


# --------------------------------------------------------------------------
# regularisers
# --------------------------------------------------------------------------

def _forward_diff(a):
    dx = np.zeros_like(a)
    dy = np.zeros_like(a)
    dx[:, :-1] = a[:, 1:] - a[:, :-1]
    dy[:-1, :] = a[1:, :] - a[:-1, :]
    return dx, dy


def _forward_diff_adjoint(px, py):
    """Transpose of :func:`_forward_diff` applied to ``(px, py)``."""
    out = np.zeros_like(px)
    out[:, :-1] -= px[:, :-1]
    out[:, 1:] += px[:, :-1]
    out[:-1, :] -= py[:-1, :]
    out[1:, :] += py[:-1, :]
    return out


def _tv_channels(channels, weights, eps_tv):
    diffs = [_forward_diff(ch) for ch in channels]
    sq = np.zeros_like(channels[0])
    for w, (dx, dy) in zip(weights, diffs):
        sq += w * (dx * dx + dy * dy)
    mag = np.sqrt(sq + eps_tv ** 2)
    value = float(np.sum(mag - eps_tv))
    grads = [w * _forward_diff_adjoint(dx / mag, dy / mag) for w, (dx, dy) in zip(weights, diffs)]
    return value, grads


def log_spd(g11, g12, g22):
    """Matrix logarithm of SPD 2x2 tensors, as ``(l11, l12, l22)``."""
    lp, lm, c, s = sym_eig(g11, g12, g22)
    if np.any(lm <= 0):
        raise NonSPDInput("matrix logarithm needs positive-definite tensors")
    return _compose(np.log(lp), np.log(lm), c, s)


def _log_spd_vjp(g11, g12, g22, a11, a12, a22):
    """Pull ``(dV/dl11, dV/dl12, dV/dl22)`` back to ``(dV/dg11, dV/dg12, dV/dg22)``."""
    lp, lm, c, s = sym_eig(g11, g12, g22)
    diff = lp - lm
    close = diff <= 1e-8 * lp
    with np.errstate(divide="ignore", invalid="ignore"):
        f12 = np.where(close, 2.0 / (lp + lm), (np.log(lp) - np.log(lm)) / np.where(close, 1.0, diff))
    f11 = 1.0 / lp
    f22 = 1.0 / lm
    # A is symmetric with the off-diagonal gradient split across both entries
    A11, A12, A22 = a11, 0.5 * a12, a22
    # Abar = U^T A U, U columns (c, s) and (-s, c)
    b11 = c * c * A11 + 2 * c * s * A12 + s * s * A22
    b22 = s * s * A11 - 2 * c * s * A12 + c * c * A22
    b12 = -c * s * A11 + (c * c - s * s) * A12 + c * s * A22
    h11, h12, h22 = f11 * b11, f12 * b12, f22 * b22
    # B = U H U^T
    B11 = c * c * h11 - 2 * c * s * h12 + s * s * h22
    B22 = s * s * h11 + 2 * c * s * h12 + c * c * h22
    B12 = c * s * h11 + (c * c - s * s) * h12 - c * s * h22
    return B11, 2.0 * B12, B22


def tv_value_grad(field, variant: str = "frobenius", eps_tv: float = 1e-8):
    """Smoothed total variation of a 1-3 channel field and its gradient.

    ``field`` is a ``(channels, rows, cols)`` array or sequence of 2-D arrays.
    Per node the value is ``sqrt(sum_c w_c (dx_c^2 + dy_c^2) + eps^2) - eps``
    with forward differences that vanish at the far edges.

    * ``"frobenius"``: channels ``(g11, g12, g22)`` with the off-diagonal
      weighted by 2, i.e. the Frobenius norm of the tensor difference.
    * ``"log_euclidean"``: the same on the matrix logarithm of ``G``.
    * ``"drift"`` (or any 1-2 channel field): unit weights.
    """
    channels = [np.asarray(ch, dtype=np.float64) for ch in field]
    if variant == "log_euclidean":
        if len(channels) != 3:
            raise ValueError("log_euclidean TV needs the three metric channels")
        logs = log_spd(*channels)
        value, lg = _tv_channels(list(logs), (1.0, 2.0, 1.0), eps_tv)
        return value, np.stack(_log_spd_vjp(*channels, *lg))
    if variant == "frobenius" and len(channels) == 3:
        weights = (1.0, 2.0, 1.0)
    elif variant in ("frobenius", "drift"):
        weights = (1.0,) * len(channels)
    else:
        raise ValueError(f"unknown TV variant {variant!r}")
    value, grads = _tv_channels(channels, weights, eps_tv)
    return value, np.stack(grads)


def tikhonov_value_grad(field, weight: float = 1.0):
    field = np.asarray(field, dtype=np.float64)
    return 0.5 * weight * float(np.sum(field ** 2)), weight * field
