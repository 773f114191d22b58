import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats

from manifold_diffusion import DomainError, Hyperboloid, IntegrationError, RngStream, Sphere, SpecialOrthogonal, StepSizeUnderflowError, Torus, network
from manifold_diffusion.manifolds import prior_sample
from manifold_diffusion.objective import Model, generative_sample
from manifold_diffusion.sde import (
    PathConfig,
    direct_torus_brownian,
    heun_step,
    integrate_adaptive,
    integrate_fixed,
    lambda_family_drift,
    simulate_generative_batch,
    simulate_inference,
)
from manifold_diffusion.targets import wrapped_normal_log_pdf

S1 = Sphere(1)


def zero_drift(x, t):
    return jnp.zeros_like(x)


def circle_angles(x):
    return np.mod(np.arctan2(x[..., 1], x[..., 0]), 2 * math.pi)


def wrapped_normal_chisquare(theta, t, mu=0.0, bins=40):
    # equiprobable bins on (mu - pi, mu + pi] so no bin has a vanishing expectation
    fine = np.linspace(-math.pi, math.pi, 200 * bins + 1)
    pdf = np.exp(wrapped_normal_log_pdf(fine, 0.0, math.sqrt(t)))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(fine))])
    edges = np.interp(np.linspace(0, 1, bins + 1), cdf / cdf[-1], fine)
    edges[0], edges[-1] = -math.pi, math.pi
    rel = np.mod(np.asarray(theta) - mu + math.pi, 2 * math.pi) - math.pi
    counts = np.histogram(rel, bins=edges)[0]
    return stats.chisquare(counts).pvalue


def test_path_config_validation():
    with pytest.raises(ValueError):
        PathConfig(horizon=0.0)
    with pytest.raises(ValueError):
        PathConfig(n_steps=0)


def test_heun_fixed_point_without_drift_or_noise():
    x = np.array([0.6, 0.0, 0.8])
    np.testing.assert_array_equal(heun_step(zero_drift, Sphere(2), x, 0.1, np.zeros(3)), x)


@pytest.mark.parametrize("m", [Sphere(2), Torus(2), Hyperboloid(2), SpecialOrthogonal(3)], ids=lambda m: m.kind)
def test_heun_step_stays_on_manifold(m):
    x = prior_sample(m, RngStream(0), 64)
    dB = np.random.default_rng(1).standard_normal(x.shape) * 0.3
    y = heun_step(lambda z, t: m.prior_drift(z), m, x, 0.09, dB)
    assert np.all(m.is_on(y, 1e-12 if m.compact else 1e-8))


def test_heun_step_reports_failure():
    bad = lambda z, t: jnp.full_like(z, jnp.nan)  # noqa: E731
    with pytest.raises(IntegrationError):
        heun_step(bad, Sphere(2), np.array([0.0, 0.0, 1.0]), 0.1, np.zeros(3))


def test_circle_brownian_increments_have_variance_dt():
    dt = 0.01
    x = jnp.array([[1.0, 0.0]])
    path = simulate_inference(S1, PathConfig(horizon=dt * 10_000, n_steps=10_000), x, key=jax.random.PRNGKey(3))
    ang = np.unwrap(circle_angles(path.points[:, 0]))
    inc = np.diff(ang)
    assert abs(inc.var() / dt - 1.0) < 0.05


def test_inference_path_bookkeeping():
    m = Sphere(2)
    x = prior_sample(m, RngStream(1), 3)
    path = simulate_inference(m, PathConfig(horizon=1.0, n_steps=20), x)
    assert path.points.shape == (21, 3, 3)
    assert path.increments.shape == (20, 3, 3)
    assert np.all(np.diff(path.times) > 0) and path.times[0] == 0.0 and path.times[-1] == 1.0
    assert np.all(m.is_on(path.points.reshape(-1, 3)))
    # compact manifold: the Langevin drift is identically zero
    np.testing.assert_array_equal(m.prior_drift(jnp.asarray(x)), 0.0)


def test_inference_zero_horizon_returns_start():
    x = np.array([[0.0, 1.0]])
    path = simulate_inference(S1, PathConfig(horizon=1.0), x, s_end=0.0)
    assert path.points.shape == (1, 1, 2)
    np.testing.assert_array_equal(path.points[0], x)


def test_circle_inference_reaches_uniform():
    x = jnp.tile(jnp.array([[1.0, 0.0]]), (10_000, 1))
    path = simulate_inference(S1, PathConfig(horizon=10.0, n_steps=100), x, key=jax.random.PRNGKey(4))
    theta = circle_angles(path.points[-1])
    assert stats.kstest(theta / (2 * math.pi), "uniform").pvalue > 0.01


def test_heun_weak_consistency_against_wrapped_normal():
    x = jnp.tile(jnp.array([[1.0, 0.0]]), (10_000, 1))
    y = integrate_fixed(S1, zero_drift, x, 0.0, 0.25, 1000, jax.random.PRNGKey(5))
    assert wrapped_normal_chisquare(circle_angles(np.asarray(y)), 0.25) > 0.01


def test_hyperboloid_inference_targets_prior():
    m = Hyperboloid(2)
    x = jnp.tile(m.lift(jnp.array([[1.5, -1.0]])), (4000, 1))
    y = np.asarray(integrate_fixed(m, lambda z, t: m.prior_drift(z), x, 0.0, 10.0, 400, jax.random.PRNGKey(6)))
    assert np.all(m.is_on(y))
    coords = y[:, 1:]
    # standard normal in graph coordinates
    assert np.all(np.abs(coords.mean(0)) < 0.08)
    assert np.all(np.abs(coords.var(0) - 1.0) < 0.1)


def _zero_model(m, horizon):
    net = network.NetworkConfig(m.ambient_dim, hidden_layers=1, hidden_width=8, horizon=horizon)
    return Model(m, net, n_steps=100), network.init(net, jax.random.PRNGKey(0))


def test_zero_network_generates_uniform_and_is_deterministic():
    model, params = _zero_model(S1, 10.0)
    a = np.asarray(generative_sample(model, params, jax.random.PRNGKey(7), 10_000))
    b = np.asarray(generative_sample(model, params, jax.random.PRNGKey(7), 10_000))
    assert a.tobytes() == b.tobytes()
    assert stats.kstest(circle_angles(a) / (2 * math.pi), "uniform").pvalue > 0.01


def test_generative_queries_network_at_reversed_time():
    seen = []

    def score(x, s):
        jax.debug.callback(lambda v: seen.append(np.asarray(v).copy()), s)
        return jnp.zeros_like(x)

    cfg = PathConfig(horizon=2.0, n_steps=4)
    simulate_generative_batch(S1, score, cfg, jax.random.PRNGKey(0), 3)
    s_values = np.unique(np.round(np.concatenate([np.ravel(v) for v in seen]), 12))
    # generative grid t = 0, 0.5, ..., 2 maps to s = T - t on the same grid
    np.testing.assert_allclose(s_values, [0.0, 0.5, 1.0, 1.5, 2.0], atol=1e-12)


def test_lambda_family_drifts():
    score = lambda x, s: x * s  # noqa: E731
    u0 = lambda x: 0.1 * x  # noqa: E731
    x = jnp.array([1.0, 2.0])
    inf0, sc0 = lambda_family_drift(0.0, score, u0, "inference")
    gen0, _ = lambda_family_drift(0.0, score, u0, "generative", horizon=3.0)
    assert sc0 == 1.0
    np.testing.assert_allclose(inf0(x, 0.5), u0(x))
    np.testing.assert_allclose(gen0(x, 1.0), score(x, 2.0) - u0(x))
    inf1, sc1 = lambda_family_drift(1.0, score, u0, "inference")
    assert sc1 == 0.0
    np.testing.assert_allclose(inf1(x, 0.5), u0(x) - 0.5 * score(x, 0.5))
    _, sch = lambda_family_drift(0.5, score, u0, "generative", horizon=1.0)
    assert abs(sch - math.sqrt(0.5)) < 1e-15
    with pytest.raises(DomainError):
        lambda_family_drift(1.5, score, u0, "inference")


def test_direct_torus_sampling():
    y0 = jnp.tile(Torus(2).from_angles(jnp.array([[0.5, 3.0]])), (10_000, 1))
    np.testing.assert_allclose(direct_torus_brownian(2, jnp.zeros(1), y0[:1], jax.random.PRNGKey(0)), y0[:1], atol=1e-15)
    far = np.asarray(direct_torus_brownian(2, jnp.full(10_000, 1e4), y0, jax.random.PRNGKey(1)))
    ang = np.asarray(Torus(2).angles(far))
    assert stats.kstest(ang[:, 0] / (2 * math.pi), "uniform").pvalue > 0.01
    near = np.asarray(direct_torus_brownian(2, jnp.full(10_000, 0.25), y0, jax.random.PRNGKey(2)))
    ang = np.asarray(Torus(2).angles(near))
    assert wrapped_normal_chisquare(ang[:, 0], 0.25, mu=0.5) > 0.01
    assert np.all(Torus(2).is_on(near))


def test_adaptive_ode_matches_exact_rotation():
    # rigid rotation on the circle: theta(t) = theta0 + omega t
    omega = 1.3

    def step(state, t, h, _):
        f = lambda x: omega * jnp.stack([-x[:, 1], x[:, 0]], -1)  # noqa: E731
        k1 = f(state)
        k2 = f(state + h * k1)
        return S1.retract(state + 0.5 * h * (k1 + k2))

    x0 = jnp.array([[1.0, 0.0]])
    y, n_acc, _ = integrate_adaptive(step, x0, 0.0, 2.0, rtol=1e-6, atol=1e-6)
    assert abs(circle_angles(np.asarray(y))[0] - 2.6) < 1e-4
    assert n_acc > 1


def test_adaptive_underflow():
    def step(state, t, h, _):
        return state + jnp.sign(h) * jnp.sqrt(h)  # error shrinks too slowly

    with pytest.raises(StepSizeUnderflowError):
        integrate_adaptive(step, jnp.zeros(1), 0.0, 1.0, rtol=1e-12, atol=1e-12)


def test_adaptive_sde_keeps_brownian_law():
    def step(state, t, h, dB):
        return S1.retract(state + 0.5 * (S1.project(state, dB) + S1.project(state + S1.project(state, dB), dB)))

    x0 = jnp.tile(jnp.array([[1.0, 0.0]]), (10_000, 1))
    y, _, _ = integrate_adaptive(step, x0, 0.0, 0.25, key=jax.random.PRNGKey(8), noise_shape=x0.shape, rtol=1e-2, atol=1e-2)
    assert wrapped_normal_chisquare(circle_angles(np.asarray(y)), 0.25) > 0.01
