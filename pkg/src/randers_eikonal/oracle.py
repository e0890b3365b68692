"""Reference solutions, validation studies and synthetic scenarios.

Everything here is a driver over :mod:`sweeper` and :mod:`adjoint`: closed-form
distances for constant coefficients, grid-refinement studies, finite-difference
gradient baselines, stencil diagnostics and the synthetic propagation setups.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import gaussian_filter

from .adjoint import (TWO_POINT, ONE_POINT, StencilRecords, gradient,
                      identify_stencils, loss_grad_mse)
from .feasibility import drift_dual_norm, project_drift, project_spd
from .fields import (DriftField, GridSpec, MetricField, UNREACHED, is_reached,
                     point_sources)
from .sweeper import solve

EXCLUDE_RADIUS = 2


class InfeasibleDrift(ValueError):
    pass


class UnknownScenario(ValueError):
    pass


def rotated_metric(lam1: float, lam2: float, theta_deg: float) -> np.ndarray:
    """SPD matrix with eigenvalue ``lam1`` along angle ``theta`` and ``lam2`` across it."""
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([lam1, lam2]) @ R.T


def analytic_distance(spec: GridSpec, sources, G=None, b=None) -> np.ndarray:
    """Exact arrival times for constant ``G`` and ``b``.

    For constant coefficients straight rays are optimal and the travel time
    from ``x0`` is ``sqrt(d^T G d) - b.d`` with ``d = x - x0``.  ``sources`` is
    one ``(row, col)`` pair or a sequence of them; the minimum is taken.
    """
    G = np.eye(2) if G is None else np.asarray(G, dtype=np.float64)
    b = np.zeros(2) if b is None else np.asarray(b, dtype=np.float64)
    if drift_dual_norm(b[0], b[1], G[0, 0], G[0, 1], G[1, 1]) >= 1.0:
        raise InfeasibleDrift("drift must satisfy ||b||_{G^-1} < 1")
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    x, y = spec.coords()
    T = np.full(spec.shape, np.inf)
    for r0, c0 in sources:
        dx = x - c0 * spec.h
        dy = y - r0 * spec.h
        q = G[0, 0] * dx * dx + 2.0 * G[0, 1] * dx * dy + G[1, 1] * dy * dy
        T = np.minimum(T, np.sqrt(q) - (b[0] * dx + b[1] * dy))
    return T


def source_exclusion(src, radius: float = EXCLUDE_RADIUS) -> np.ndarray:
    """Mask of nodes within ``radius`` cells of any source."""
    src = np.asarray(src, dtype=bool)
    rr, cc = np.nonzero(src)
    rows, cols = np.indices(src.shape)
    near = np.zeros(src.shape, dtype=bool)
    for r0, c0 in zip(rr, cc):
        near |= (rows - r0) ** 2 + (cols - c0) ** 2 <= radius ** 2
    return near


def error_norms(T, T_ref, mask=None) -> dict:
    """RMS, max and relative L2 errors over ``mask``.

    ``rel_l2`` is ``||e||_2 / ||T_ref||_2``; ``rel_max`` normalises the RMS
    error by ``max |T_ref|`` instead.
    """
    T = np.asarray(T)
    T_ref = np.asarray(T_ref)
    if mask is None:
        mask = np.ones(T.shape, dtype=bool)
    e = (T - T_ref)[mask]
    ref = T_ref[mask]
    rms = float(np.sqrt(np.mean(e ** 2)))
    return {
        "l2": rms,
        "linf": float(np.max(np.abs(e))),
        "rel_l2": float(np.linalg.norm(e) / np.linalg.norm(ref)),
        "rel_max": rms / float(np.max(np.abs(ref))),
    }


# --------------------------------------------------------------------------
# convergence studies
# --------------------------------------------------------------------------

CASES = {
    "iso": (np.eye(2), (0.0, 0.0)),
    "aniso": (np.diag([4.0, 0.25]), (0.0, 0.0)),
    "rotated": (rotated_metric(4.0, 0.25, 45.0), (0.0, 0.0)),
    "drift": (np.eye(2), (0.3, 0.0)),
    "combined": (rotated_metric(2.0, 0.5, 30.0), (0.2, 0.1)),
}


@dataclass
class StudyReport:
    case: str
    sizes: list = field(default_factory=list)
    h: list = field(default_factory=list)
    l2: list = field(default_factory=list)
    linf: list = field(default_factory=list)
    rel_l2: list = field(default_factory=list)
    rel_max: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    alpha: float = float("nan")

    COLUMNS = ("N", "h", "l2", "linf", "rel_l2", "rel_max", "iterations", "wall_time")

    def rows(self):
        return list(zip(self.sizes, self.h, self.l2, self.linf, self.rel_l2,
                        self.rel_max, self.iterations, self.wall_time))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS + ("alpha",))
            for row in self.rows():
                w.writerow([repr(v) if isinstance(v, float) else v for v in row] + [repr(self.alpha)])


def fit_rate(h, err) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    h = np.asarray(h, dtype=np.float64)
    err = np.asarray(err, dtype=np.float64)
    if h.size < 3:
        raise ValueError("rate fit needs at least three sizes")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def centred_problem(N: int, case: str = "iso"):
    """Unit-domain ``N x N`` problem with a point source at the centre."""
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}")
    Gc, bc = CASES[case]
    spec = GridSpec(N, N, 1.0 / N)
    src = point_sources(spec.shape, [(N // 2, N // 2)])
    return spec, MetricField.constant(spec.shape, Gc), DriftField.constant(spec.shape, bc), src


def _timed_solve(G, b, src, spec, tol):
    t0 = time.perf_counter()
    T, rep = solve(G, b, src, spec, tol=tol)
    return T, rep, time.perf_counter() - t0


def sample_bilinear(T_fine, h_fine, points_x, points_y) -> np.ndarray:
    """Bilinear interpolation of a grid field at physical points."""
    rows, cols = T_fine.shape
    interp = RegularGridInterpolator((np.arange(rows) * h_fine, np.arange(cols) * h_fine), T_fine)
    pts = np.stack([points_y.ravel(), points_x.ravel()], axis=-1)
    return interp(pts).reshape(points_x.shape)


def richardson_difference(N_coarse: int, N_fine: int, case: str = "combined",
                          tol: float = 1e-6, exclude: float = EXCLUDE_RADIUS) -> dict:
    """Error norms of a coarse solve against a fine solve sampled at coarse nodes."""
    spec_c, Gc, bc, src_c = centred_problem(N_coarse, case)
    spec_f, Gf, bf, src_f = centred_problem(N_fine, case)
    T_c, _ = solve(Gc, bc, src_c, spec_c, tol=tol)
    T_f, _ = solve(Gf, bf, src_f, spec_f, tol=tol)
    x, y = spec_c.coords()
    ref = sample_bilinear(T_f, spec_f.h, x, y)
    return error_norms(T_c, ref, ~source_exclusion(src_c, exclude))


def convergence_study(sizes, case: str = "iso", tol: float = 1e-6,
                      exclude: float = 0.0, fit: bool = True) -> StudyReport:
    """Refinement study on the unit domain with a centred point source.

    Cases with constant coefficients are compared against
    :func:`analytic_distance`.  ``"combined"`` instead uses the largest size as
    the reference and samples it bilinearly at each coarser grid's nodes.
    """
    sizes = sorted(int(n) for n in sizes)
    if not sizes:
        raise ValueError("no sizes given")
    report = StudyReport(case)
    ref = None
    if case == "combined":
        spec_f, Gf, bf, src_f = centred_problem(sizes[-1], case)
        ref = (solve(Gf, bf, src_f, spec_f, tol=tol)[0], spec_f.h)
        sizes = sizes[:-1]
    for N in sizes:
        spec, G, b, src = centred_problem(N, case)
        T, rep, dt = _timed_solve(G, b, src, spec, tol)
        if ref is None:
            Gc, bc = CASES[case]
            T_ref = analytic_distance(spec, [(N // 2, N // 2)], Gc, bc)
        else:
            x, y = spec.coords()
            T_ref = sample_bilinear(ref[0], ref[1], x, y)
        mask = ~source_exclusion(src, exclude) if exclude > 0 else ~src
        err = error_norms(T, T_ref, mask)
        report.sizes.append(N)
        report.h.append(spec.h)
        for key in ("l2", "linf", "rel_l2", "rel_max"):
            getattr(report, key).append(err[key])
        report.iterations.append(rep.iterations)
        report.wall_time.append(dt)
    if fit:
        report.alpha = fit_rate(report.h, report.l2)
    return report


# --------------------------------------------------------------------------
# residual checks
# --------------------------------------------------------------------------

def eikonal_residual(T, G: MetricField, b: DriftField | None, h: float = 1.0, src=None,
                     exclude: float = EXCLUDE_RADIUS) -> np.ndarray:
    """Per-node ``| ||grad T + b||_{G^-1} - 1 |`` from central differences.

    Only interior nodes whose four axis neighbours are reached, and which lie
    more than ``exclude`` cells from every source, get a value; all other
    entries are NaN.
    """
    T = np.asarray(T, dtype=np.float64)
    b = DriftField.zeros(T.shape) if b is None else b
    out = np.full(T.shape, np.nan)
    reach = is_reached(T)
    ok = np.zeros(T.shape, dtype=bool)
    ok[1:-1, 1:-1] = (reach[1:-1, 1:-1] & reach[1:-1, 2:] & reach[1:-1, :-2]
                      & reach[2:, 1:-1] & reach[:-2, 1:-1])
    if src is not None:
        ok &= ~source_exclusion(src, exclude)
    gx = np.zeros_like(T)
    gy = np.zeros_like(T)
    gx[1:-1, 1:-1] = (T[1:-1, 2:] - T[1:-1, :-2]) / (2 * h)
    gy[1:-1, 1:-1] = (T[2:, 1:-1] - T[:-2, 1:-1]) / (2 * h)
    px = gx + b.b1
    py = gy + b.b2
    nrm = drift_dual_norm(px, py, G.g11, G.g12, G.g22)
    out[ok] = np.abs(nrm[ok] - 1.0)
    return out


def axis_slope(T, row: int, c0: int, c1: int, h: float = 1.0) -> float:
    """Least-squares ``dT/dx`` along ``row`` between columns ``c0`` and ``c1``."""
    cols = np.arange(c0, c1)
    return float(np.polyfit(cols * h, T[row, c0:c1], 1)[0])


# --------------------------------------------------------------------------
# gradient oracles
# --------------------------------------------------------------------------

CHANNELS = ("g11", "g12", "g22", "b1", "b2")


def stack_params(G: MetricField, b: DriftField) -> np.ndarray:
    return np.stack([G.g11, G.g12, G.g22, b.b1, b.b2])


def unstack_params(theta) -> tuple[MetricField, DriftField]:
    return MetricField(theta[0], theta[1], theta[2]), DriftField(theta[3], theta[4])


@dataclass
class MSEProblem:
    """``0.5 * sum_obs (T - T_hat)^2`` for a fixed source set, as a function of theta."""
    src: np.ndarray
    obs_mask: np.ndarray
    obs_values: np.ndarray
    h: float = 1.0
    tol: float = 1e-13
    max_iters: int = 200

    def forward(self, theta) -> np.ndarray:
        G, b = unstack_params(theta)
        return solve(G, b, self.src, GridSpec(*self.src.shape, self.h),
                     tol=self.tol, max_iters=self.max_iters)[0]

    def loss(self, theta) -> float:
        return loss_grad_mse(self.forward(theta), self.obs_mask, self.obs_values)[0]

    def loss_and_grad(self, theta):
        G, b = unstack_params(theta)
        T = self.forward(theta)
        loss, g, _ = loss_grad_mse(T, self.obs_mask, self.obs_values)
        pg, *_ = gradient(T, G, b, self.src, self.h, g, self.tol)
        return loss, pg.stacked()

    def records(self, theta) -> StencilRecords:
        G, b = unstack_params(theta)
        return identify_stencils(self.forward(theta), G, b, self.src, self.h, self.tol)


def gradcheck_problem(case: str = "iso", n: int = 31, seed: int = 0):
    """Pointwise gradient benchmark: returns ``(problem, theta)``.

    ``iso`` uses ``G = I, b = 0``; ``aniso`` a rotated metric with eigenvalues
    (2, 0.5) at 30 degrees; ``drift`` ``G = I`` with ``b = (0.15, 0.08)``.
    Observations are every reached node at 0.9 T with 1% noise, so residuals
    share a sign and gradients do not cancel down to the FD noise floor.
    """
    shape = (n, n)
    if case == "iso":
        G, b = MetricField.constant(shape, np.eye(2)), DriftField.zeros(shape)
    elif case == "aniso":
        G, b = MetricField.constant(shape, rotated_metric(2.0, 0.5, 30.0)), DriftField.zeros(shape)
    elif case == "drift":
        G, b = MetricField.constant(shape, np.eye(2)), DriftField.constant(shape, (0.15, 0.08))
    else:
        raise ValueError(f"unknown gradcheck case {case!r}")
    src = point_sources(shape, [(n // 2, n // 2)])
    theta = stack_params(G, b)
    T, _ = solve(G, b, src, tol=1e-13, max_iters=200)
    rng = np.random.default_rng(seed)
    obs = ~src & is_reached(T)
    T_hat = np.where(obs, T * (0.9 + 0.01 * rng.standard_normal(shape)), 0.0)
    return MSEProblem(src, obs, T_hat), theta


def fd_gradient(loss, theta, site, eps: float = 1e-5) -> float:
    """Central difference of ``loss`` along one parameter entry ``site``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    tp = np.array(theta, dtype=np.float64)
    tm = tp.copy()
    tp[site] += eps
    tm[site] -= eps
    return (loss(tp) - loss(tm)) / (2.0 * eps)


def _same_records(a: StencilRecords, b: StencilRecords) -> bool:
    return (np.array_equal(a.kind, b.kind) and np.array_equal(a.stencil, b.stencil)
            and np.array_equal(a.donor1, b.donor1) and np.array_equal(a.donor2, b.donor2))


@dataclass
class PointCheck:
    site: tuple
    adjoint: float
    fd: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.fd), abs(self.adjoint))
        return 0.0 if scale == 0 else abs(self.fd - self.adjoint) / scale


def pointwise_check(problem: MSEProblem, theta, channels=(0, 1, 2, 3, 4), n_points: int = 20,
                    eps: float = 1e-5, seed: int = 0, margin: int = 3,
                    max_tries: int = 400) -> list[PointCheck]:
    """Adjoint vs central FD at random interior nodes with a stable stencil record.

    A node is kept only if perturbing it by ``+-eps`` in every tested channel
    leaves the whole stencil record unchanged, so the FD quotient is taken on a
    single smooth branch.  Returns one :class:`PointCheck` per (node, channel).
    """
    rng = np.random.default_rng(seed)
    _, grad = problem.loss_and_grad(theta)
    base = problem.records(theta)
    rows, cols = theta.shape[1:]
    out = []
    found = 0
    for _ in range(max_tries):
        if found >= n_points:
            break
        r = int(rng.integers(margin, rows - margin))
        c = int(rng.integers(margin, cols - margin))
        if problem.src[r, c]:
            continue
        checks = []
        stable = True
        for ch in channels:
            site = (ch, r, c)
            vals = []
            for sgn in (1.0, -1.0):
                t = np.array(theta, dtype=np.float64)
                t[site] += sgn * eps
                if not _same_records(problem.records(t), base):
                    stable = False
                    break
                vals.append(problem.loss(t))
            if not stable:
                break
            checks.append(PointCheck(site, float(grad[site]), (vals[0] - vals[1]) / (2 * eps)))
        if stable:
            out.extend(checks)
            found += 1
    return out


def stencil_diagnostics(records: StencilRecords) -> dict:
    """Stencil index map, update-type fractions and the stencil-boundary mask.

    A boundary pixel is an active node with a 4-neighbour whose active stencil
    index differs.  Fractions are over active (finite non-source) nodes.
    """
    active = records.active.reshape(records.shape)
    smap = np.where(active, records.stencil.reshape(records.shape), -1)
    n = int(active.sum())
    boundary = np.zeros(records.shape, dtype=bool)
    for dr, dc in ((0, 1), (1, 0)):
        a = smap[: smap.shape[0] - dr, : smap.shape[1] - dc]
        o = smap[dr:, dc:]
        diff = (a >= 0) & (o >= 0) & (a != o)
        boundary[: smap.shape[0] - dr, : smap.shape[1] - dc] |= diff
        boundary[dr:, dc:] |= diff
    kind = records.kind.reshape(records.shape)
    return {
        "stencil_map": smap,
        "two_point_fraction": float(np.sum(kind == TWO_POINT) / n) if n else 0.0,
        "one_point_fraction": float(np.sum(kind == ONE_POINT) / n) if n else 0.0,
        "boundary": boundary,
        "boundary_fraction": float(boundary.sum() / boundary.size),
        "active": n,
    }


def random_direction_test(problem: MSEProblem, theta, n_dirs: int = 100, eps: float = 1e-5,
                          seed: int = 0, channels=(0, 1, 2), threshold: float = 0.10):
    """Fraction of random unit directions whose FD directional derivative agrees
    with ``grad . d`` to better than ``threshold`` relative error.

    Directions are Gaussian over the listed channels at every node, normalised
    to unit length.  Returns ``(fraction, relative_errors)``.
    """
    if n_dirs < 1:
        raise ValueError("n_dirs must be positive")
    rng = np.random.default_rng(seed)
    _, grad = problem.loss_and_grad(theta)
    errs = []
    for _ in range(n_dirs):
        d = np.zeros_like(theta)
        d[list(channels)] = rng.standard_normal((len(channels),) + theta.shape[1:])
        errs.append(directional_error(problem, theta, grad, d, eps))
    errs = np.asarray(errs)
    return float(np.mean(errs < threshold)), errs


def directional_error(problem: MSEProblem, theta, grad, d, eps: float = 1e-5) -> float:
    nrm = np.linalg.norm(d)
    if nrm == 0:
        raise ValueError("direction must be nonzero")
    d = d / nrm
    fd = (problem.loss(theta + eps * d) - problem.loss(theta - eps * d)) / (2 * eps)
    an = float(np.sum(grad * d))
    scale = max(abs(fd), abs(an))
    return 0.0 if scale == 0 else abs(fd - an) / scale


def perturbation_stability(problem: MSEProblem, theta, noise: float = 0.01, n_trials: int = 10,
                           seed: int = 0) -> tuple[float, np.ndarray]:
    """Mean ``||g(theta + delta) - g(theta)|| / ||g(theta)||`` under multiplicative
    Gaussian metric noise of relative size ``noise`` (projected back to SPD)."""
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    rng = np.random.default_rng(seed)
    _, g0 = problem.loss_and_grad(theta)
    ref = np.linalg.norm(g0)
    out = []
    for _ in range(n_trials):
        t = np.array(theta, dtype=np.float64)
        t[:3] *= 1.0 + noise * rng.standard_normal(t[:3].shape)
        t[0], t[1], t[2] = project_spd(t[0], t[1], t[2])
        _, g = problem.loss_and_grad(t)
        out.append(np.linalg.norm(g - g0) / ref)
    out = np.asarray(out)
    return float(out.mean()), out


# --------------------------------------------------------------------------
# synthetic scenarios
# --------------------------------------------------------------------------

@dataclass
class Scenario:
    kind: str
    G: MetricField
    b: DriftField
    src: np.ndarray
    T: np.ndarray | None = None
    report: dict | None = None


def gaussian_hill(N: int, height: float = 20.0, sigma: float | None = None, centre=None):
    """Elevation of a single Gaussian hill, in grid units."""
    sigma = N / 6.0 if sigma is None else sigma
    r0, c0 = (N // 2, N // 2) if centre is None else centre
    rows, cols = np.indices((N, N))
    return height * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * sigma ** 2))


def terrain_metric(z, alpha: float) -> np.ndarray:
    gy, gx = np.gradient(z)
    return 1.0 + alpha * np.hypot(gx, gy)


def resistance_patches(N: int, n_patches: int, resistance: float, rng) -> np.ndarray:
    rows, cols = np.indices((N, N))
    g = np.ones((N, N))
    for _ in range(n_patches):
        r0, c0 = rng.uniform(0, N, size=2)
        rad = rng.uniform(0.04 * N, 0.1 * N)
        g[(rows - r0) ** 2 + (cols - c0) ** 2 <= rad ** 2] = resistance
    return g


def correlated_noise(shape, corr: float, rng) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to zero mean and unit std."""
    n = gaussian_filter(rng.standard_normal(shape), corr, mode="wrap")
    return (n - n.mean()) / n.std()


def _isotropic(g) -> MetricField:
    return MetricField.isotropic(g.shape, g)


def scenario(kind: str, N: int = 100, seed: int = 42, **params) -> Scenario:
    """Build one of the synthetic setups and solve it.

    ``terrain``        g = 1 + alpha |grad z| on a Gaussian hill, source at the peak
    ``drift``          G = I with constant ``b`` (default (0.3, 0))
    ``heterogeneous``  seeded disks of high resistance on g = 1
    ``combined``       terrain times patches, plus constant drift
    ``reconstruction`` re-solve from sparse observed times, true metric known
    ``sensitivity``    arrival-time error against correlated metric noise level
    """
    rng = np.random.default_rng(seed)
    shape = (N, N)
    centre = [(N // 2, N // 2)]
    src = point_sources(shape, centre)
    if kind == "terrain":
        z = gaussian_hill(N, params.get("height", 20.0), params.get("sigma"))
        G, b = _isotropic(terrain_metric(z, params.get("alpha", 1.0))), DriftField.zeros(shape)
    elif kind == "drift":
        G, b = MetricField.isotropic(shape, 1.0), DriftField.constant(shape, params.get("b", (0.3, 0.0)))
    elif kind == "heterogeneous":
        g = resistance_patches(N, params.get("n_patches", 12), params.get("resistance", 4.0), rng)
        g[src] = 1.0
        G, b = _isotropic(g), DriftField.zeros(shape)
    elif kind == "combined":
        z = gaussian_hill(N, params.get("height", 20.0), params.get("sigma"))
        g = terrain_metric(z, params.get("alpha", 1.0))
        g = g * resistance_patches(N, params.get("n_patches", 12), params.get("resistance", 4.0), rng)
        G = _isotropic(g)
        b1, b2 = project_drift(*DriftField.constant(shape, params.get("b", (0.3, 0.0))).channels(),
                               *G.channels())
        b = DriftField(b1, b2)
    elif kind == "reconstruction":
        return _reconstruction(N, rng, params)
    elif kind == "sensitivity":
        return _sensitivity(N, rng, params)
    else:
        raise UnknownScenario(f"unknown scenario kind {kind!r}")
    T, _ = solve(G, b, src)
    report = None
    if kind == "drift":
        r0, c0 = centre[0]
        off = min(30, N // 2 - 1)
        report = {"offset": off, "T_upwind": float(T[r0, c0 - off]), "T_downwind": float(T[r0, c0 + off])}
    return Scenario(kind, G, b, src, T, report)


def _reconstruction(N, rng, params) -> Scenario:
    """Interpolate a full arrival field from scattered observed times.

    The observed nodes become sources carrying their observed times and the
    true metric is used; the true ignition point is not given.
    """
    shape = (N, N)
    src = point_sources(shape, [(N // 2, N // 2)])
    G, b = MetricField.isotropic(shape, 1.0), DriftField.zeros(shape)
    T, _ = solve(G, b, src)
    n_obs = int(params.get("n_obs", round(0.0878 * N * N)))
    cand = np.flatnonzero(~src.ravel())
    idx = rng.choice(cand, size=min(n_obs, cand.size), replace=False)
    obs = np.zeros(N * N, dtype=bool)
    obs[idx] = True
    obs = obs.reshape(shape)
    noise = params.get("noise", 0.0)
    vals = T + noise * T[obs].std() * rng.standard_normal(shape)
    vals = np.where(obs, np.maximum(vals, 0.0), 0.0)
    T_rec, _ = solve(G, b, obs, source_values=vals)
    err = error_norms(T_rec, T)
    far = ~source_exclusion(src, params.get("far_radius", N / 10))
    report = {
        "n_obs": int(obs.sum()),
        "rel_l2": err["rel_l2"],
        "rel_l2_far": error_norms(T_rec, T, far)["rel_l2"],
        "max_abs_far": float(np.max(np.abs(T_rec - T)[far])),
    }
    return Scenario("reconstruction", G, b, obs, T_rec, report)


def _sensitivity(N, rng, params) -> Scenario:
    """Change of T under correlated multiplicative metric noise.

    Each row is ``(level, rel_max, rel_l2)`` with the median over trials;
    ``rel_max`` is the RMS change over the largest arrival time.
    """
    shape = (N, N)
    src = point_sources(shape, [(N // 2, N // 2)])
    G, b = MetricField.isotropic(shape, 1.0), DriftField.zeros(shape)
    T, _ = solve(G, b, src)
    levels = params.get("levels", (0.0, 0.05, 0.1, 0.2, 0.3, 0.5))
    corr = params.get("corr", 1.0)
    trials = params.get("trials", 3)
    rows = []
    for lev in levels:
        errs = []
        for _ in range(trials):
            n = correlated_noise(shape, corr, rng)
            g11, g12, g22 = project_spd(G.g11 * (1 + lev * n), G.g12, G.g22 * (1 + lev * n))
            T2, _ = solve(MetricField(g11, g12, g22), b, src)
            e = error_norms(T2, T)
            errs.append((e["rel_max"], e["rel_l2"]))
        med = np.median(np.array(errs), axis=0)
        rows.append((float(lev), float(med[0]), float(med[1])))
    return Scenario("sensitivity", G, b, src, T, {"levels": rows})


__all__ = [
    "InfeasibleDrift", "UnknownScenario", "analytic_distance", "convergence_study",
    "richardson_difference", "eikonal_residual", "fd_gradient", "pointwise_check",
    "stencil_diagnostics", "random_direction_test", "perturbation_stability", "scenario",
    "StudyReport", "MSEProblem", "gradcheck_problem", "UNREACHED",
]
