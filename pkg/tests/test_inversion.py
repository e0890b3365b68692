import numpy as np
import pytest

from randers_eikonal import inversion as inv
from randers_eikonal.adjoint import gradient, loss_grad_mse
from randers_eikonal.fields import DriftField, GridSpec, MetricField, is_reached, point_sources
from randers_eikonal.inversion import (AdamState, DivergedLoss, InverseConfig, ObservationSet,
                                       adam_step, clip_global, component_errors, default_theta,
                                       from_free, gd_step, generate_observations, grad_to_free,
                                       objective_and_grad, param_error, piecewise_isotropic,
                                       recover, source_sites, to_free)
from randers_eikonal.sweeper import NotConverged, solve

N = 24


def _truth():
    theta = piecewise_isotropic(N)
    theta[3], theta[4] = 0.1, -0.05
    return theta


def test_truth_has_no_data_misfit():
    theta = _truth()
    obs = generate_observations(theta, [(12, 12)], density=1.0, h=1.0 / N)
    loss, _, nu = objective_and_grad(theta, obs, InverseConfig(param="joint"))
    assert nu == 0
    assert loss < 1e-6 * float(np.sum(obs[0].values ** 2))


def test_unregularised_gradient_is_adjoint_gradient():
    truth = _truth()
    obs = generate_observations(truth, [(8, 15)], density=0.5, noise_level=0.05, seed=3, h=1.0 / N)
    theta = default_theta((N, N))
    cfg = InverseConfig(param="joint", lambda_G=0.0, lambda_b=0.0)
    loss, grad, _ = objective_and_grad(theta, obs, cfg)
    G, b = MetricField.isotropic((N, N)), DriftField.zeros((N, N))
    spec = GridSpec(N, N, 1.0 / N)
    T, _ = solve(G, b, obs[0].src, spec)
    l2, g, _ = loss_grad_mse(T, obs[0].mask, obs[0].values)
    pg, *_ = gradient(T, G, b, obs[0].src, spec.h, g)
    assert loss == pytest.approx(l2)
    np.testing.assert_allclose(grad, pg.stacked(), rtol=0, atol=0)


def test_gradient_is_additive_over_sources():
    truth = _truth()
    obs = generate_observations(truth, [(5, 5), (18, 16)], density=0.3, seed=1, h=1.0 / N)
    theta = default_theta((N, N))
    cfg = InverseConfig(param="joint")
    l, g, _ = objective_and_grad(theta, obs, cfg)
    l0, g0, _ = objective_and_grad(theta, obs[:1], cfg)
    l1, g1, _ = objective_and_grad(theta, obs[1:], cfg)
    assert l == pytest.approx(l0 + l1, rel=1e-14)
    np.testing.assert_allclose(g, g0 + g1, rtol=1e-14, atol=1e-300)


def test_regulariser_adds_to_gradient():
    truth = _truth()
    obs = generate_observations(truth, [(12, 12)], density=0.5, seed=1, h=1.0 / N)
    theta = truth.copy()
    theta[0, 3:6, 3:6] += 0.3
    _, g0, _ = objective_and_grad(theta, obs, InverseConfig(param="joint"))
    cfg = InverseConfig(param="joint", lambda_G=0.1, lambda_b=0.2)
    _, g1, _ = objective_and_grad(theta, obs, cfg)
    rv, rg = inv.regularizer(theta, cfg)
    assert rv > 0
    np.testing.assert_allclose(g1, g0 + rg, rtol=1e-12, atol=1e-14)


def test_unreached_observations_penalised():
    obs = ObservationSet(point_sources((5, 5), [(2, 2)]), np.ones((5, 5), bool), np.ones((5, 5)))
    T = np.full((5, 5), 1e10)
    T[2, 2] = 0.0
    loss, _, nu = loss_grad_mse(T, obs.mask, obs.values)
    assert nu == 24 and loss == 0


def test_not_converged_raises():
    obs = generate_observations(_truth(), [(12, 12)], h=1.0 / N)
    cfg = InverseConfig(max_sweeps=1)
    with pytest.raises(NotConverged):
        objective_and_grad(default_theta((N, N)), obs, cfg)


# -- optimiser steps ----------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"g": np.ones((3, 3))}
    out, _ = adam_step(p, {"g": np.zeros((3, 3))}, AdamState(), {"g": 0.1})
    np.testing.assert_array_equal(out["g"], p["g"])


def test_adam_first_step_is_step_size():
    p = {"g": np.zeros(4), "b": np.zeros(2)}
    g = {"g": np.array([1e-2, -1e-2, 1e-3, -1e-3]), "b": np.array([1e-2, -1e-2])}
    out, st = adam_step(p, g, AdamState(), {"g": 0.01, "b": 0.005}, clip=None)
    np.testing.assert_allclose(out["g"], -0.01 * np.sign(g["g"]), rtol=1e-4)
    np.testing.assert_allclose(out["b"], -0.005 * np.sign(g["b"]), rtol=1e-4)
    assert st.t == 1


def test_global_clipping():
    g = {"a": np.array([6.0, 0.0]), "b": np.array([0.0, 8.0])}
    c = clip_global(g, 1.0)
    total = np.sqrt(sum(np.sum(v ** 2) for v in c.values()))
    assert total == pytest.approx(1.0)
    assert clip_global({"a": np.array([0.1])}, 1.0)["a"][0] == 0.1


def test_gd_step():
    out = gd_step({"a": np.array([1.0])}, {"a": np.array([0.5])}, {"a": 0.1})
    assert out["a"][0] == pytest.approx(0.95)


# -- parameterisations ----------------------------------------------------------------

def test_iso_free_variables():
    theta = default_theta((3, 3))
    theta[0] = 2.0
    theta[2] = 4.0
    free = to_free(theta, "iso")
    np.testing.assert_array_equal(free["g"], 3.0)
    back = from_free(free, theta, "iso")
    assert np.all(back[0] == back[2]) and not back[1].any()
    grad = np.arange(45.0).reshape(5, 3, 3)
    np.testing.assert_array_equal(grad_to_free(grad, "iso")["g"], grad[0] + grad[2])


def test_diag_zeroes_offdiagonal():
    theta = default_theta((2, 2))
    theta[1] = 0.3
    out = from_free(to_free(theta, "diag"), theta, "diag")
    assert not out[1].any()


def test_errors():
    truth = _truth()
    est = truth.copy()
    est[0] *= 1.1
    est[2] *= 1.1
    assert param_error(est, truth, "iso") == pytest.approx(0.1)
    ce = component_errors(est, truth)
    assert set(ce) == {"g11", "g22", "b1", "b2"}
    assert ce["b1"] == 0


@pytest.mark.parametrize("kw", [dict(param="x"), dict(optimizer="sgd"), dict(regularizer="l1"),
                                dict(step_G=0), dict(iters=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        InverseConfig(**kw)


# -- observations ----------------------------------------------------------------------

def test_full_noiseless_observations():
    theta = _truth()
    (obs,) = generate_observations(theta, [(12, 12)], h=1.0 / N)
    T, _ = solve(MetricField(*theta[:3]), DriftField(*theta[3:]), obs.src, GridSpec(N, N, 1.0 / N))
    assert np.array_equal(obs.mask, ~obs.src & is_reached(T))
    np.testing.assert_array_equal(obs.values[obs.mask], T[obs.mask])


def test_observations_deterministic():
    a = generate_observations(_truth(), [(4, 4)], density=0.2, noise_level=0.1, seed=9)
    b = generate_observations(_truth(), [(4, 4)], density=0.2, noise_level=0.1, seed=9)
    assert np.array_equal(a[0].mask, b[0].mask)
    assert np.array_equal(a[0].values, b[0].values)
    assert np.all(a[0].values >= 0)


def test_seven_percent_count():
    (obs,) = generate_observations(piecewise_isotropic(64), [(32, 32)], density=0.07, h=1 / 64)
    assert obs.count == 286


def test_observation_bundle_roundtrip():
    (obs,) = generate_observations(_truth(), [(3, 7)], density=0.4, seed=2)
    back = ObservationSet.from_bundle(obs.bundle())
    assert np.array_equal(back.src, obs.src)
    assert np.array_equal(back.mask, obs.mask)
    np.testing.assert_array_equal(back.values, obs.values)
    with pytest.raises(ValueError):
        ObservationSet.from_bundle(obs.bundle()[:3])


def test_observation_validation():
    src = point_sources((3, 3), [(1, 1)])
    with pytest.raises(ValueError):
        ObservationSet(np.zeros((3, 3), bool), src, np.zeros((3, 3)))
    vals = np.zeros((3, 3))
    vals[0, 0] = -1.0
    with pytest.raises(ValueError):
        ObservationSet(src, np.ones((3, 3), bool), vals)
    with pytest.raises(ValueError):
        generate_observations(_truth(), [(1, 1)], density=0.0)


def test_source_sites_nested():
    five = source_sites(64, 5, seed=3)
    assert source_sites(64, 2, seed=3) == five[:2]
    assert len(set(five)) == 5
    assert all(9 <= r < 54 and 9 <= c < 54 for r, c in five)


# -- recovery driver --------------------------------------------------------------------

def test_recover_reduces_loss_and_keeps_isotropy():
    truth = piecewise_isotropic(N)
    obs = generate_observations(truth, [(12, 12)], h=1.0 / N)
    res = recover(obs, InverseConfig(param="iso", iters=25), truth=truth)
    assert res.iterations == 25
    assert res.loss_history[-1] < 0.75 * res.loss_history[0]
    assert res.error_history[-1] < res.error_history[0]
    assert np.array_equal(res.theta[0], res.theta[2]) and not res.theta[1].any()
    assert res.G.is_spd()


def test_recover_drift_respects_feasibility():
    truth = default_theta((N, N))
    truth[3], truth[4] = 0.15, 0.08
    obs = generate_observations(truth, [(12, 12)], h=1.0 / N)
    res = recover(obs, InverseConfig(param="drift", iters=10, step_b=0.5))
    nrm = np.sqrt(res.b.dual_norm_sq(res.G))
    assert np.all(nrm <= 0.95 + 1e-12)
    assert np.all(res.theta[0] == 1.0)


def test_diverging_loss_detected(monkeypatch):
    calls = iter(range(100))

    def fake(theta, observations, cfg):
        k = next(calls)
        return 10.0 ** (7 * k), np.zeros_like(theta), 0

    monkeypatch.setattr(inv, "objective_and_grad", fake)
    obs = generate_observations(_truth(), [(12, 12)])
    with pytest.raises(DivergedLoss):
        recover(obs, InverseConfig(iters=5))
