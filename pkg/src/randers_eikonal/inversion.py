"""Recover metric and drift fields from sparse arrival-time observations.

Parameters are carried as a stacked ``(5, rows, cols)`` array
``(g11, g12, g22, b1, b2)``.  A parameterisation selects which of these the
optimiser moves and how the full gradient maps onto them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adjoint import gradient, loss_grad_mse
from .feasibility import (DEFAULT_PROJECTION, ProjectionConfig, project_drift, project_spd,
                          tikhonov_value_grad, tv_value_grad)
from .fields import DriftField, GridSpec, MetricField, is_reached, point_sources
from .sweeper import NotConverged, solve

log = logging.getLogger(__name__)

T_CAP = 1e4

PARAMS = {
    "iso": ("g",),
    "diag": ("g11", "g22"),
    "full": ("g11", "g12", "g22"),
    "drift": ("b1", "b2"),
    "joint": ("g11", "g12", "g22", "b1", "b2"),
}
_INDEX = {"g11": 0, "g12": 1, "g22": 2, "b1": 3, "b2": 4}


class DivergedLoss(RuntimeError):
    pass


@dataclass
class ObservationSet:
    src: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    noise_level: float = 0.0
    h: float = 1.0

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool) & ~self.src
        self.values = np.where(self.mask, np.asarray(self.values, dtype=np.float64), 0.0)
        if not self.src.any():
            raise ValueError("observation set has no source")
        if not (np.all(np.isfinite(self.values)) and np.all(self.values >= 0)):
            raise ValueError("observed times must be finite and non-negative")

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def bundle(self) -> list[np.ndarray]:
        """Four channels (source, mask, observed time, reserved) for a field file."""
        return [self.src.astype(float), self.mask.astype(float), self.values, np.zeros(self.src.shape)]

    @classmethod
    def from_bundle(cls, channels, h: float = 1.0) -> "ObservationSet":
        if len(channels) != 4:
            raise ValueError(f"observation bundle needs 4 channels, has {len(channels)}")
        return cls(channels[0] > 0.5, channels[1] > 0.5, channels[2], h=h)


@dataclass
class InverseConfig:
    param: str = "iso"
    step_G: float = 1e-2
    step_b: float = 5e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    lambda_G: float = 0.0
    lambda_b: float = 0.0
    regularizer: str = "tv"
    tv: str = "frobenius"
    eps_tv: float = 1e-8
    iters: int = 300
    seed: int = 42
    plateau_patience: int = 0
    tol: float = 1e-6
    max_sweeps: int = 50
    projection: ProjectionConfig = DEFAULT_PROJECTION

    def __post_init__(self):
        if self.param not in PARAMS:
            raise ValueError(f"unknown parameterisation {self.param!r}")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.regularizer not in ("tv", "tikhonov", "none"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if not (self.step_G > 0 and self.step_b > 0):
            raise ValueError("step sizes must be positive")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")


@dataclass
class RecoveryResult:
    theta: np.ndarray
    loss_history: list = field(default_factory=list)
    error_history: list = field(default_factory=list)
    iterations: int = 0
    n_unreached: int = 0

    @property
    def G(self) -> MetricField:
        return MetricField(self.theta[0], self.theta[1], self.theta[2])

    @property
    def b(self) -> DriftField:
        return DriftField(self.theta[3], self.theta[4])

    @property
    def final_error(self) -> float:
        return self.error_history[-1] if self.error_history else float("nan")


# --------------------------------------------------------------------------
# parameter plumbing
# --------------------------------------------------------------------------

def stack(G: MetricField, b: DriftField | None = None) -> np.ndarray:
    b = DriftField.zeros(G.shape) if b is None else b
    return np.stack([G.g11, G.g12, G.g22, b.b1, b.b2])


def default_theta(shape, g: float = 1.0) -> np.ndarray:
    theta = np.zeros((5,) + tuple(shape))
    theta[0] = g
    theta[2] = g
    return theta


def to_free(theta, param: str) -> dict:
    if param == "iso":
        return {"g": 0.5 * (theta[0] + theta[2])}
    return {k: theta[_INDEX[k]].copy() for k in PARAMS[param]}


def from_free(free: dict, theta, param: str) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)
    if param == "iso":
        theta[0] = free["g"]
        theta[1] = 0.0
        theta[2] = free["g"]
        return theta
    for k, v in free.items():
        theta[_INDEX[k]] = v
    if param == "diag":
        theta[1] = 0.0
    return theta


def grad_to_free(grad, param: str) -> dict:
    """Chain rule from the full five-channel gradient to the free variables."""
    if param == "iso":
        return {"g": grad[0] + grad[2]}
    return {k: grad[_INDEX[k]].copy() for k in PARAMS[param]}


def project(theta, cfg: ProjectionConfig = DEFAULT_PROJECTION) -> np.ndarray:
    out = np.empty_like(theta)
    out[0], out[1], out[2] = project_spd(theta[0], theta[1], theta[2], cfg)
    out[3], out[4] = project_drift(theta[3], theta[4], out[0], out[1], out[2], cfg)
    return out


def relative_error(estimate, truth) -> float:
    """``||estimate - truth||_2 / ||truth||_2`` over every entry."""
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.linalg.norm(np.asarray(estimate) - truth) / np.linalg.norm(truth))


def param_error(theta, truth, param: str) -> float:
    if param == "iso":
        return relative_error(0.5 * (theta[0] + theta[2]), 0.5 * (truth[0] + truth[2]))
    idx = [_INDEX[k] for k in PARAMS[param]]
    return relative_error(theta[idx], truth[idx])


def component_errors(theta, truth) -> dict:
    """Relative error per channel, skipping channels that are zero in ``truth``."""
    return {k: relative_error(theta[i], truth[i]) for k, i in _INDEX.items()
            if np.any(truth[i] != 0)}


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def data_term(theta, obs: ObservationSet, cfg: InverseConfig):
    """Data misfit of one source and its five-channel gradient."""
    G = MetricField(theta[0], theta[1], theta[2])
    b = DriftField(theta[3], theta[4])
    spec = GridSpec(*obs.src.shape, obs.h)
    T, rep = solve(G, b, obs.src, spec, tol=cfg.tol, max_iters=cfg.max_sweeps)
    if not rep.converged:
        raise NotConverged(f"forward solve stalled at max_delta={rep.max_delta:.3e} "
                           f"after {rep.iterations} iterations")
    loss, g, n_unreached = loss_grad_mse(T, obs.mask, obs.values)
    if n_unreached:
        lost = obs.mask & ~is_reached(T)
        loss += 0.5 * float(np.sum((T_CAP - obs.values[lost]) ** 2))
    pg, *_ = gradient(T, G, b, obs.src, obs.h, g, cfg.tol)
    return loss, pg.stacked(), n_unreached


def regularizer(theta, cfg: InverseConfig):
    value = 0.0
    grad = np.zeros_like(theta)
    if cfg.regularizer == "none":
        return value, grad
    for lam, sl, variant in ((cfg.lambda_G, slice(0, 3), cfg.tv), (cfg.lambda_b, slice(3, 5), "drift")):
        if lam == 0:
            continue
        if cfg.regularizer == "tv":
            v, g = tv_value_grad(theta[sl], variant, cfg.eps_tv)
        else:
            v, g = tikhonov_value_grad(theta[sl])
        value += lam * v
        grad[sl] += lam * g
    return value, grad


def objective_and_grad(theta, observations, cfg: InverseConfig):
    """Summed data misfit over sources plus weighted regularisers.

    Returns ``(loss, grad, n_unreached)`` with ``grad`` in five-channel form.
    """
    loss = 0.0
    grad = np.zeros_like(theta)
    n_unreached = 0
    for obs in observations:
        l, g, nu = data_term(theta, obs, cfg)
        loss += l
        grad += g
        n_unreached += nu
    rv, rg = regularizer(theta, cfg)
    return loss + rv, grad + rg, n_unreached


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def clip_global(grads: dict, max_norm: float) -> dict:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0:
        return grads
    f = max_norm / total
    return {k: g * f for k, g in grads.items()}


def adam_step(params: dict, grads: dict, state: AdamState, steps: dict, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, clip: float | None = 1.0):
    """One bias-corrected Adam update after global-norm clipping."""
    grads = clip_global(grads, clip)
    state.t += 1
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / (1 - beta1 ** state.t)
        vhat = v / (1 - beta2 ** state.t)
        out[k] = p - steps[k] * mhat / (np.sqrt(vhat) + eps)
    return out, state


def gd_step(params: dict, grads: dict, steps: dict, clip: float | None = 1.0) -> dict:
    grads = clip_global(grads, clip)
    return {k: p - steps[k] * grads[k] for k, p in params.items()}


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------

def recover(observations, cfg: InverseConfig, init=None, truth=None) -> RecoveryResult:
    """Projected first-order recovery of the free parameters.

    ``init`` defaults to ``G = I, b = 0``.  ``truth`` (five-channel) enables
    the relative-error history.
    """
    observations = list(observations)
    shape = observations[0].src.shape
    theta = project(default_theta(shape) if init is None else np.array(init, dtype=np.float64),
                    cfg.projection)
    free = to_free(theta, cfg.param)
    steps = {k: (cfg.step_b if k.startswith("b") else cfg.step_G) for k in free}
    state = AdamState()
    result = RecoveryResult(theta)
    best, since_best, initial = np.inf, 0, None
    for it in range(cfg.iters):
        loss, grad, nu = objective_and_grad(theta, observations, cfg)
        if initial is None:
            initial = max(loss, 1e-300)
        elif loss > 1e6 * initial:
            raise DivergedLoss(f"loss {loss:.3e} exceeds 1e6 x initial {initial:.3e} at iteration {it}")
        result.loss_history.append(loss)
        result.n_unreached = nu
        if truth is not None:
            result.error_history.append(param_error(theta, truth, cfg.param))
        gfree = grad_to_free(grad, cfg.param)
        if cfg.optimizer == "adam":
            free, state = adam_step(free, gfree, state, steps, cfg.beta1, cfg.beta2,
                                    cfg.adam_eps, cfg.grad_clip_norm)
        else:
            free = gd_step(free, gfree, steps, cfg.grad_clip_norm)
        theta = project(from_free(free, theta, cfg.param), cfg.projection)
        free = to_free(theta, cfg.param)
        if cfg.plateau_patience:
            if loss < best * (1 - 1e-4):
                best, since_best = loss, 0
            else:
                since_best += 1
                if since_best >= cfg.plateau_patience:
                    steps = {k: 0.5 * s for k, s in steps.items()}
                    since_best = 0
                    log.debug("plateau at iteration %d, halving steps", it)
        result.iterations = it + 1
    result.theta = theta
    return result


def generate_observations(theta_true, sources, density: float = 1.0, noise_level: float = 0.0,
                          seed: int = 42, h: float = 1.0, tol: float = 1e-6) -> list[ObservationSet]:
    """Forward-solve each source and sample observed times.

    ``sources`` is a list of boolean masks or ``(row, col)`` points.  Each set
    observes ``floor(density * n)`` of its ``n`` reached non-source nodes,
    drawn without replacement, with Gaussian noise of std
    ``noise_level * std(T)`` over the sampled nodes.  Times are clipped at 0.
    """
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    if noise_level < 0:
        raise ValueError("noise_level must be non-negative")
    theta_true = np.asarray(theta_true, dtype=np.float64)
    shape = theta_true.shape[1:]
    G = MetricField(theta_true[0], theta_true[1], theta_true[2])
    b = DriftField(theta_true[3], theta_true[4])
    rng = np.random.default_rng(seed)
    out = []
    for s in sources:
        src = np.asarray(s, dtype=bool) if np.ndim(s) == 2 else point_sources(shape, [tuple(s)])
        T, _ = solve(G, b, src, GridSpec(*shape, h), tol=tol)
        cand = np.flatnonzero((~src & is_reached(T)).ravel())
        n = int(np.floor(density * cand.size))
        idx = np.sort(rng.choice(cand, size=n, replace=False))
        mask = np.zeros(T.size, dtype=bool)
        mask[idx] = True
        mask = mask.reshape(shape)
        vals = T.copy()
        if noise_level > 0:
            vals[mask] += noise_level * T[mask].std() * rng.standard_normal(n)
        vals = np.where(mask, np.maximum(vals, 0.0), 0.0)
        out.append(ObservationSet(src, mask, vals, noise_level, h))
    return out


def piecewise_isotropic(N: int, left: float = 1.0, right: float = 2.0) -> np.ndarray:
    """Five-channel truth with ``g = left`` for columns < N/2 and ``right`` beyond."""
    g = np.full((N, N), left)
    g[:, N // 2:] = right
    theta = default_theta((N, N))
    theta[0] = g
    theta[2] = g
    return theta


def source_sites(N: int, k: int, seed: int = 0, margin: float = 0.15) -> list[tuple[int, int]]:
    """``k`` seeded source locations, the first ``j`` being shared by any ``j < k``."""
    rng = np.random.default_rng(seed)
    lo, hi = int(margin * N), int((1 - margin) * N)
    sites = []
    while len(sites) < k:
        p = (int(rng.integers(lo, hi)), int(rng.integers(lo, hi)))
        if p not in sites:
            sites.append(p)
    return sites


def multi_source_recover(ks=(1, 2, 3, 5), density: float = 0.07, cfg: InverseConfig | None = None,
                         N: int = 64, seed: int = 0, noise_level: float = 0.0) -> list[dict]:
    """Joint recovery of a shared isotropic metric from ``k`` sources for each ``k``.

    Sources for smaller ``k`` are a prefix of those for larger ``k``, and each
    source's observations are drawn from its own seeded stream.
    """
    cfg = cfg or InverseConfig()
    truth = piecewise_isotropic(N)
    h = 1.0 / N
    sites = source_sites(N, max(ks), seed)
    per_source = [generate_observations(truth, [p], density, noise_level, seed=seed * 1000 + j, h=h)[0]
                  for j, p in enumerate(sites)]
    rows = []
    for k in ks:
        obs = per_source[:k]
        res = recover(obs, cfg, truth=truth)
        rows.append({"k": k, "n_obs": sum(o.count for o in obs), "error": res.final_error,
                     "loss": res.loss_history[-1]})
    return rows


def isotropic_benchmark(N: int = 80, density: float = 1.0, noise_level: float = 0.0, seed: int = 42):
    """Piecewise g in {1, 2} split at the vertical midline, centred point source.

    Returns ``(observations, truth)`` on the unit domain.
    """
    truth = piecewise_isotropic(N)
    obs = generate_observations(truth, [(N // 2, N // 2)], density, noise_level, seed, h=1.0 / N)
    return obs, truth


def drift_benchmark(N: int = 80, b=(0.15, 0.08), density: float = 1.0, noise_level: float = 0.0,
                    seed: int = 42):
    """Known ``G = I`` with constant drift ``b``, centred point source."""
    truth = default_theta((N, N))
    truth[3] = b[0]
    truth[4] = b[1]
    obs = generate_observations(truth, [(N // 2, N // 2)], density, noise_level, seed, h=1.0 / N)
    return obs, truth
