"""Training loss, likelihood bounds and exact ODE likelihood.

The inference process is Riemannian Langevin dynamics towards the prior
(drift U0, zero on compact manifolds); only the generative drift is
learned through the tangential field P_x a(x, s). Conventions:

* integrand  I = (1/2 |P a|^2 + div(P a - U0)) / q(s), evaluated at Y_s
* CT-ELBO    = E log p0(Y_T) - E[I]
* ODE        dY = (U0 - 1/2 P a) ds,  log p(x) = log p0(Y_T) + int div(...) ds
"""

import functools
import math
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from . import network, proposal
from .divergence import div_with_frame, tangent_frame
from .errors import IntegrationError
from .manifolds import Torus
from .sde import grid_fractions, heun_update, integrate_adaptive, integrate_fixed

DIV_METHODS = ("qr", "hutchinson")


@dataclass(frozen=True)
class Model:
    """Static description of a model; hashable so it can key compiled code."""

    manifold: object
    net: network.NetworkConfig
    n_steps: int = 100
    div_method: str = "qr"
    n_probes: int = 1
    direct_torus: bool = False
    grid: str = "uniform"

    def __post_init__(self):
        if self.div_method not in DIV_METHODS:
            raise ValueError(f"div_method must be one of {DIV_METHODS}")
        if self.direct_torus and not isinstance(self.manifold, Torus):
            raise ValueError("direct sampling is only available on tori")

    @property
    def horizon(self):
        return self.net.horizon


def tangent_field(model, params):
    """Batched (x, s) -> P_x a(x, s)."""
    m = model.manifold
    return lambda x, s: m.project(x, network.apply(model.net, params, x, s))


def _point_field(model, params, s, ca=1.0, cu=-1.0):
    """Single-point field y -> ca * P_y a(y, s) + cu * U0(y) for divergences."""
    m = model.manifold

    def f(y):
        a = m.project(y, network.apply(model.net, params, y[None], s[None])[0])
        return ca * a + cu * m.prior_drift(y)

    return f


def batch_divergence(model, fields_of_s, x, s, key):
    """Divergence at each row of x of the field built by ``fields_of_s(s_i)``."""
    m = model.manifold
    if model.div_method == "qr":
        frames = tangent_frame(m, x, key)
        return jax.vmap(lambda xi, si, fi: div_with_frame(fields_of_s(si), xi, fi))(x, s, frames)
    n = model.n_probes
    z = jax.random.rademacher(key, x.shape[:-1] + (n, m.ambient_dim), dtype=jnp.float64)
    probes = m.project(x[..., None, :], z)

    def one(xi, si, pi):
        f = fields_of_s(si)
        jz = jax.vmap(lambda p: jax.jvp(f, (xi,), (p,))[1])(pi)
        return jnp.mean(jnp.sum(pi * jz, axis=-1))

    return jax.vmap(one)(x, s, probes)


def inference_endpoint(model, x, s, key):
    """Y_s for each row of x started at x; differentiable in s."""
    m = model.manifold
    if model.direct_torus:
        from .sde import direct_torus_brownian

        return direct_torus_brownian(m.d, s, x, key)
    drift = lambda y, t: m.prior_drift(y)  # noqa: E731
    return integrate_fixed(m, drift, x, 0.0, s, model.n_steps, key, grid=model.grid)


def integrand_terms(model, params, y, s, logq, key):
    """(I, a-norm term, divergence term) per row, both terms divided by q(s)."""
    a = tangent_field(model, params)(y, s)
    anorm = 0.5 * jnp.sum(a * a, axis=-1)
    div = batch_divergence(model, lambda si: _point_field(model, params, si), y, s, key)
    w = jnp.exp(-logq)
    return (anorm + div) * w, anorm * w, div * w


def _draw(model, prop_layers, x, key):
    ku, ky, kd = jax.random.split(key, 3)
    s, logq = proposal.sample(prop_layers, ku, x.shape[0], model.horizon)
    y = inference_endpoint(model, x, s, ky)
    return s, logq, y, kd


@functools.partial(jax.jit, static_argnums=0)
def integrand_batch(model, params, prop_layers, x, key):
    """One draw of I per data row; gradients flow only into ``params``."""
    prop_layers = jax.lax.stop_gradient(prop_layers)
    s, logq, y, kd = _draw(model, prop_layers, x, key)
    y = jax.lax.stop_gradient(y)
    return integrand_terms(model, params, y, s, logq, kd), s


def ctelbo_integrand(model, params, prop_layers, x, key):
    """Single point: returns (I, s)."""
    (i, _, _), s = integrand_batch(model, params, prop_layers, jnp.atleast_2d(x), key)
    return float(i[0]), float(s[0])


def loss_fn(params, model, prop_layers, x, key):
    (i, _, _), _ = integrand_batch(model, params, prop_layers, x, key)
    return jnp.mean(i), i


@functools.partial(jax.jit, static_argnums=1)
def loss_and_grad(params, model, prop_layers, x, key):
    (loss, i), g = jax.value_and_grad(loss_fn, has_aux=True)(params, model, prop_layers, x, key)
    return loss, i, g


def proposal_sq_loss(prop_layers, model, params, x, key):
    """Mean of I^2 with s, Y_s and 1/q(s) all reparameterized in the proposal."""
    params = jax.lax.stop_gradient(params)
    s, logq, y, kd = _draw(model, prop_layers, x, key)
    i, _, _ = integrand_terms(model, params, y, s, logq, kd)
    return jnp.mean(i**2)


@functools.partial(jax.jit, static_argnums=1)
def proposal_loss_and_grad(prop_layers, model, params, x, key):
    return jax.value_and_grad(proposal_sq_loss)(prop_layers, model, params, x, key)


@functools.partial(jax.jit, static_argnums=0)
def _prior_terms(model, x, key):
    s = jnp.full(x.shape[:-1], model.horizon)
    y = inference_endpoint(model, x, s, key)
    return model.manifold.prior_log_prob(y), y


@dataclass
class ElboEstimate:
    value: float
    std_error: float
    n_samples: int
    components: dict = field(default_factory=dict)
    per_point: np.ndarray = None


def ctelbo_estimate(model, params, prop_layers, data, n_mc, key, chunk=4096):
    """Monte Carlo CT-ELBO: mean over points and draws of log p0(Y_T) - I."""
    data = jnp.asarray(data)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("need a nonempty (n, m) batch of data points")
    rep = jnp.repeat(data, n_mc, axis=0)
    prior, anorm, div, total = [], [], [], []
    for c, start in enumerate(range(0, rep.shape[0], chunk)):
        xb = rep[start : start + chunk]
        kc = jax.random.fold_in(key, c)
        lp, _ = _prior_terms(model, xb, jax.random.fold_in(kc, 0))
        (i, an, dv), _ = integrand_batch(model, params, prop_layers, xb, jax.random.fold_in(kc, 1))
        prior.append(np.asarray(lp))
        anorm.append(np.asarray(an))
        div.append(np.asarray(dv))
        total.append(np.asarray(lp - i))
    prior, anorm, div, total = (np.concatenate(v) for v in (prior, anorm, div, total))
    per_point = total.reshape(data.shape[0], n_mc).mean(axis=1)
    n = total.size
    se = float(np.std(total, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    comps = {"prior": float(prior.mean()), "a_norm": float(anorm.mean()), "divergence": float(div.mean())}
    return ElboEstimate(float(total.mean()), se, n, comps, per_point)


@functools.partial(jax.jit, static_argnums=(0, 4, 5))
def _kelbo_log_weights(model, params, x, key, n_steps, grid="uniform"):
    """log L(Y) per row of x for paths simulated under the inference drift U0.

    The network contributes only through the likelihood ratio, so the state
    update never sees it. Ito and time integrals use left endpoints on the
    chosen time grid.
    """
    m = model.manifold
    times = model.horizon * grid_fractions(n_steps, grid)
    fld = tangent_field(model, params)
    drift = lambda y, t: m.prior_drift(y)  # noqa: E731

    def body(carry, i):
        y, ito, anorm, div = carry
        dt = times[i + 1] - times[i]
        s = jnp.full(y.shape[:-1], times[i])
        kb, kd = jax.random.split(jax.random.fold_in(key, i))
        dB = jax.random.normal(kb, y.shape) * jnp.sqrt(dt)
        a = fld(y, s)
        ito = ito + jnp.sum(a * dB, axis=-1)
        anorm = anorm + 0.5 * jnp.sum(a * a, axis=-1) * dt
        div = div + batch_divergence(model, lambda si: _point_field(model, params, si), y, s, kd) * dt
        y = heun_update(m, drift, y, s, dt, dB)
        return (y, ito, anorm, div), None

    z = jnp.zeros(x.shape[:-1])
    (y, ito, anorm, div), _ = jax.lax.scan(body, (x, z, z, z), jnp.arange(n_steps))
    return -ito - anorm + m.prior_log_prob(y) - div, y


def kelbo(model, params, x, K, key, n_steps=None, chunk=8192, grid=None):
    """Importance-weighted bound log mean_k L(Y^k) for each row of x."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = jnp.atleast_2d(jnp.asarray(x))
    n_steps = model.n_steps if n_steps is None else n_steps
    grid = grid or model.grid
    per = max(1, chunk // K)
    out = []
    for c, start in enumerate(range(0, x.shape[0], per)):
        xb = x[start : start + per]
        rep = jnp.repeat(xb, K, axis=0)
        lw, y = _kelbo_log_weights(model, params, rep, jax.random.fold_in(key, c), n_steps, grid)
        _check_points(model.manifold, y)
        lw = np.asarray(lw).reshape(xb.shape[0], K)
        if not np.all(np.isfinite(lw)):
            raise IntegrationError("non-finite path weight in KELBO")
        mx = lw.max(axis=1, keepdims=True)
        out.append((mx[:, 0] + np.log(np.mean(np.exp(lw - mx), axis=1))))
    return np.concatenate(out)


def _check_points(manifold, y):
    from .sde import _check_on_manifold

    _check_on_manifold(manifold, y)


@functools.partial(jax.jit, static_argnums=0)
def _ode_step(model, params, state, t, h, frame_key):
    m = model.manifold
    fld = tangent_field(model, params)

    def f(y, s):
        return m.prior_drift(y) - 0.5 * fld(y, s)

    def div(y, s):
        return batch_divergence(model, lambda si: _point_field(model, params, si, ca=-0.5, cu=1.0), y, s, frame_key)

    y, acc = state
    s0 = jnp.full(y.shape[:-1], t)
    k1, d1 = f(y, s0), div(y, s0)
    yp = y + h * k1
    k2, d2 = f(yp, s0 + h), div(yp, s0 + h)
    y1 = m.retract(y + 0.5 * h * (k1 + k2))
    return y1, acc + 0.5 * h * (d1 + d2)


def _ode_model(model):
    # divergence of the flow field must be exact, never a random estimate
    return replace(model, div_method="qr")


def ode_log_likelihood(model, params, x, rtol=1e-3, atol=1e-3, h_min=1e-5, key=None, chunk=4096, return_stats=False):
    """Exact log-density (w.r.t. the manifold's Riemannian volume) at each row of x."""
    x = jnp.atleast_2d(jnp.asarray(x, dtype=jnp.float64))
    model.manifold.check(x)
    om = _ode_model(model)
    key = jax.random.PRNGKey(0) if key is None else key
    out, steps = [], []
    for start in range(0, x.shape[0], chunk):
        xb = x[start : start + chunk]
        step = lambda st, t, h, _dB: _ode_step(om, params, st, t, h, key)  # noqa: E731
        (y, acc), n_acc, n_rej = integrate_adaptive(step, (xb, jnp.zeros(xb.shape[0])), 0.0, om.horizon, rtol=rtol, atol=atol, h_min=h_min)
        _check_points(om.manifold, y)
        out.append(np.asarray(om.manifold.prior_log_prob(y) + acc))
        steps.append((n_acc, n_rej))
    res = np.concatenate(out)
    return (res, steps) if return_stats else res


def generative_sample(model, params, key, n, lam=0.0, n_steps=None, grid=None):
    """X_T of the lambda-family generative process started from the prior."""
    from .sde import PathConfig, simulate_generative_batch

    cfg = PathConfig(horizon=model.horizon, n_steps=n_steps or model.n_steps, grid=grid or model.grid)
    return _generative_jit(model, cfg, lam, params, key, n)


@functools.partial(jax.jit, static_argnums=(0, 1, 2, 5))
def _generative_jit(model, cfg, lam, params, key, n):
    from .sde import simulate_generative_batch

    return simulate_generative_batch(model.manifold, tangent_field(model, params), cfg, key, n, lam)
