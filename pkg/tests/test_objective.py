import dataclasses
import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from manifold_diffusion import RngStream, Sphere, Torus, network
from manifold_diffusion.manifolds import prior_sample
from manifold_diffusion.objective import (
    Model,
    ctelbo_estimate,
    ctelbo_integrand,
    generative_sample,
    integrand_batch,
    kelbo,
    loss_and_grad,
    ode_log_likelihood,
    proposal_loss_and_grad,
)
from manifold_diffusion.proposal import ProposalConfig, init_proposal

S2 = Sphere(2)
C = jnp.array([0.4, -0.3, 0.9])


def zero_model(m, horizon=2.0, **kw):
    net = network.NetworkConfig(m.ambient_dim, hidden_layers=1, hidden_width=8, horizon=horizon)
    return Model(m, net, n_steps=50, **kw), network.init(net, jax.random.PRNGKey(0))


def constant_field_model(horizon=2.0, **kw):
    """a(x, s) = C in ambient coordinates: P C has divergence -2 x.C on S^2."""
    model, params = zero_model(S2, horizon, **kw)
    params["layers"][-1]["b"] = C
    return model, params


def uniform(model):
    return init_proposal(ProposalConfig(model.horizon))


def constant_field_integral(x0, horizon):
    # E[Y_s] = x0 e^{-s}; (x.C)^2 - |C|^2/3 is a degree-2 harmonic decaying as e^{-3s}
    c2 = float(C @ C)
    xc = float(x0 @ C)
    amp = xc**2 - c2 / 3
    anorm = 0.5 * (2 * c2 / 3 * horizon - amp * (1 - math.exp(-3 * horizon)) / 3)
    div = -2 * xc * (1 - math.exp(-horizon))
    return anorm + div


def test_zero_network_integrand_vanishes():
    model, params = zero_model(S2)
    x = jnp.asarray(prior_sample(S2, RngStream(0), 16))
    (i, an, dv), s = integrand_batch(model, params, uniform(model), x, jax.random.PRNGKey(1))
    assert np.all(np.asarray(i) == 0.0)
    assert np.all((np.asarray(s) > 0) & (np.asarray(s) < model.horizon))


def test_uniform_proposal_weight_is_horizon():
    model, params = constant_field_model(horizon=3.0)
    x = jnp.asarray(prior_sample(S2, RngStream(1), 8))
    (i, an, dv), _ = integrand_batch(model, params, uniform(model), x, jax.random.PRNGKey(2))
    np.testing.assert_allclose(i, an + dv)
    # recompute at the same endpoints: 1/2 |P C|^2 - 2 y.C, times T
    key = jax.random.PRNGKey(2)
    from manifold_diffusion.objective import _draw

    _, _, y, _ = _draw(model, uniform(model), x, key)
    pc = S2.project(y, C)
    np.testing.assert_allclose(i, 3.0 * (0.5 * jnp.sum(pc * pc, -1) - 2 * y @ C), atol=1e-10)


def test_single_point_integrand_is_deterministic():
    model, params = constant_field_model()
    x = np.array([0.0, 0.6, 0.8])
    a = ctelbo_integrand(model, params, uniform(model), x, jax.random.PRNGKey(3))
    b = ctelbo_integrand(model, params, uniform(model), x, jax.random.PRNGKey(3))
    assert a == b


def test_integrand_mean_matches_analytic_time_integral():
    model, params = constant_field_model(horizon=2.0)
    # Heun is weak order one; 400 steps keep the bias well under the MC error
    model = dataclasses.replace(model, n_steps=400)
    x0 = jnp.array([0.0, 0.6, 0.8])
    x = jnp.tile(x0, (100_000, 1))
    (i, _, _), _ = integrand_batch(model, params, uniform(model), x, jax.random.PRNGKey(4))
    i = np.asarray(i)
    exact = constant_field_integral(np.asarray(x0), 2.0)
    # dense midpoint quadrature of the same closed form as a second route
    s = (np.arange(20_000) + 0.5) * 2.0 / 20_000
    xc, c2 = float(x0 @ C), float(C @ C)
    quad = np.sum(0.5 * (c2 - c2 / 3 - (xc**2 - c2 / 3) * np.exp(-3 * s)) - 2 * xc * np.exp(-s)) * (2.0 / 20_000)
    assert abs(quad - exact) < 1e-8
    assert abs(i.mean() - exact) < 3 * i.std() / math.sqrt(i.size)


def test_zero_network_elbo_is_log_prior():
    model, params = zero_model(S2)
    data = prior_sample(S2, RngStream(5), 20)
    est = ctelbo_estimate(model, params, uniform(model), data, 4, jax.random.PRNGKey(6))
    assert abs(est.value + math.log(4 * math.pi)) < 1e-12
    assert est.std_error < 1e-12 and est.n_samples == 80
    assert set(est.components) == {"prior", "a_norm", "divergence"}
    with pytest.raises(ValueError):
        ctelbo_estimate(model, params, uniform(model), np.zeros((0, 3)), 1, jax.random.PRNGKey(0))


def test_elbo_components_combine():
    model, params = constant_field_model()
    data = prior_sample(S2, RngStream(7), 10)
    est = ctelbo_estimate(model, params, uniform(model), data, 3, jax.random.PRNGKey(8))
    c = est.components
    assert abs(est.value - (c["prior"] - c["a_norm"] - c["divergence"])) < 1e-10
    assert est.per_point.shape == (10,)


def test_estimate_is_unbiased_across_proposals():
    model, params = constant_field_model()
    data = np.tile(np.array([[0.0, 0.6, 0.8]]), (1, 1))
    flat = ctelbo_estimate(model, params, uniform(model), data, 40_000, jax.random.PRNGKey(9))
    bent = init_proposal(ProposalConfig(model.horizon), jax.random.PRNGKey(10), jitter=0.5)
    other = ctelbo_estimate(model, params, bent, data, 40_000, jax.random.PRNGKey(11))
    assert abs(flat.value - other.value) < 3 * math.hypot(flat.std_error, other.std_error)


def test_loss_gradient_only_touches_network():
    model, params = constant_field_model()
    prop = init_proposal(ProposalConfig(model.horizon), jax.random.PRNGKey(12), jitter=0.3)
    x = jnp.asarray(prior_sample(S2, RngStream(13), 32))
    loss, i, g = loss_and_grad(params, model, prop, x, jax.random.PRNGKey(14))
    assert abs(float(loss) - float(jnp.mean(i))) < 1e-12
    assert jax.tree_util.tree_structure(g) == jax.tree_util.tree_structure(params)
    sq, pg = proposal_loss_and_grad(prop, model, params, x, jax.random.PRNGKey(15))
    assert float(sq) > 0
    assert jax.tree_util.tree_structure(pg) == jax.tree_util.tree_structure(prop)
    assert any(float(jnp.max(jnp.abs(v))) > 0 for v in jax.tree_util.tree_leaves(pg))


def test_kelbo_zero_network_is_exact():
    model, params = zero_model(S2)
    x = prior_sample(S2, RngStream(16), 5)
    vals = kelbo(model, params, x, 16, jax.random.PRNGKey(17))
    np.testing.assert_allclose(vals, -math.log(4 * math.pi), atol=1e-12)
    with pytest.raises(ValueError):
        kelbo(model, params, x, 0, jax.random.PRNGKey(0))


def test_kelbo_single_path_matches_ctelbo_and_tightens():
    model, params = constant_field_model(horizon=1.0)
    x = prior_sample(S2, RngStream(18), 50)
    k1 = kelbo(model, params, np.repeat(x, 400, axis=0), 1, jax.random.PRNGKey(19))
    elbo = ctelbo_estimate(model, params, uniform(model), x, 400, jax.random.PRNGKey(20))
    se = math.hypot(k1.std() / math.sqrt(k1.size), elbo.std_error)
    assert abs(k1.mean() - elbo.value) < 3 * se + 0.01  # 0.01 covers the left-point time discretization
    k100 = kelbo(model, params, x, 100, jax.random.PRNGKey(21))
    assert k100.mean() >= k1.mean() - 3 * k1.std() / math.sqrt(k1.size)


def test_ode_zero_network_returns_prior():
    model, params = zero_model(S2)
    x = prior_sample(S2, RngStream(22), 10)
    np.testing.assert_allclose(ode_log_likelihood(model, params, x), -math.log(4 * math.pi), rtol=0, atol=1e-15)


def test_ode_density_of_a_random_field_is_normalized():
    m = Sphere(2)
    net = network.NetworkConfig(3, hidden_layers=1, hidden_width=16, horizon=1.0)
    params = network.init(net, jax.random.PRNGKey(23), zero_last=False)
    model = Model(m, net)
    nz, nphi = 32, 64
    z = -1 + (np.arange(nz) + 0.5) * 2 / nz
    phi = (np.arange(nphi) + 0.5) * 2 * math.pi / nphi
    Z, P = np.meshgrid(z, phi, indexing="ij")
    r = np.sqrt(1 - Z**2)
    grid = np.stack([r * np.cos(P), r * np.sin(P), Z], -1).reshape(-1, 3)
    ll = ode_log_likelihood(model, params, grid)
    assert np.ptp(ll) > 0.1  # the flow is far from the identity
    mass = np.exp(ll).sum() * 4 * math.pi / grid.shape[0]
    assert abs(mass - 1) < 0.01


def test_probability_flow_of_zero_field_is_identity():
    m = Torus(1)
    model, params = zero_model(m)
    a = np.asarray(generative_sample(model, params, jax.random.PRNGKey(24), 50, lam=1.0))
    prior = np.asarray(m.prior_sample(jax.random.split(jax.random.PRNGKey(24))[0], 50))
    np.testing.assert_allclose(a, prior, atol=1e-12)
