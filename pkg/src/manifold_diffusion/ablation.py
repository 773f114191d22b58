"""Estimator comparisons at a fixed checkpoint.

Each comparison holds the data points, times and divergence probes fixed
across the settings being compared, so differences reflect the setting
rather than fresh Monte Carlo noise.
"""

import math

import jax
import jax.numpy as jnp
import numpy as np

from . import proposal
from .errors import ConfigError
from .manifolds import Torus
from .objective import integrand_terms
from .sde import heun_update


def _summary(vals):
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)), float(vals.var(ddof=1))


def _draw_points(data, key, n):
    idx = jax.random.randint(key, (n,), 0, data.shape[0])
    return jnp.asarray(data)[idx]


def _coupled_endpoints(manifold, x, s, key, step_counts):
    """Inference endpoints for several step counts plus an exact torus sample.

    All schemes share one Brownian path on the finest grid; coarser grids
    sum groups of its increments. The exact sample adds, per circle, the
    Ito sum of the tangential components of those increments along the
    finest path, which is exactly N(0, s) distributed.
    """
    fine = max(step_counts)
    if any(fine % n for n in step_counts):
        raise ConfigError("step counts must divide the finest count")
    dt = s / fine
    dB = jax.random.normal(key, (fine,) + x.shape) * jnp.sqrt(dt)[None, :, None]
    drift = lambda y, t: manifold.prior_drift(y)  # noqa: E731
    out = {}
    for n in step_counts:
        agg = dB.reshape((n, fine // n) + x.shape).sum(axis=1)
        h = s / n

        def body(y, inc):
            return heun_update(manifold, drift, y, 0.0, h, inc), None

        out[n], _ = jax.lax.scan(body, x, agg)
    if isinstance(manifold, Torus):
        d = manifold.d
        h = s / fine

        def body(carry, inc):
            y, w = carry
            yb = y.reshape(y.shape[:-1] + (d, 2))
            tang = jnp.stack([-yb[..., 1], yb[..., 0]], -1)
            w = w + jnp.sum(tang * inc.reshape(yb.shape), -1)
            return (heun_update(manifold, drift, y, 0.0, h, inc), w), None

        (_, w), _ = jax.lax.scan(body, (x, jnp.zeros(x.shape[:-1] + (d,))), dB)
        out["direct"] = manifold.from_angles(jnp.mod(manifold.angles(x) + w, 2 * math.pi))
    return out


def integration_steps(model, params, prop_layers, data, n_draws, key, step_counts=(10, 100), chunk=2048):
    """Mean loss per integration setting; rows (setting, loss, se, variance)."""
    m = model.manifold
    sums = {}
    for c, start in enumerate(range(0, n_draws, chunk)):
        n = min(chunk, n_draws - start)
        kc = jax.random.fold_in(key, c)
        x = _draw_points(data, jax.random.fold_in(kc, 0), n)
        s, logq = proposal.sample(prop_layers, jax.random.fold_in(kc, 1), n, model.horizon)
        ends = _coupled_endpoints(m, x, s, jax.random.fold_in(kc, 2), step_counts)
        kd = jax.random.fold_in(kc, 3)
        for name, y in ends.items():
            i, _, _ = integrand_terms(model, params, y, s, logq, kd)
            sums.setdefault(name, []).append(np.asarray(i))
    rows = []
    for name, parts in sums.items():
        rows.append((str(name),) + _summary(np.concatenate(parts)))
    return rows


def importance(model, params, prop_layers, data, n_draws, key):
    """Estimator spread under the uniform and the given proposal."""
    pcfg_layers = len(prop_layers)
    uniform = proposal.init_proposal(proposal.ProposalConfig(model.horizon, pcfg_layers, prop_layers[0]["a"].shape[0]))
    rows = []
    for name, layers in (("uniform", uniform), ("trained", prop_layers)):
        vals = estimator_draws(model, params, layers, data, n_draws, key)
        rows.append((name,) + _summary(vals))
    return rows


def estimator_draws(model, params, prop_layers, data, n_draws, key, chunk=2048):
    from .objective import integrand_batch

    out = []
    for c, start in enumerate(range(0, n_draws, chunk)):
        n = min(chunk, n_draws - start)
        kc = jax.random.fold_in(key, c)
        x = _draw_points(data, jax.random.fold_in(kc, 0), n)
        (i, _, _), _ = integrand_batch(model, params, prop_layers, x, jax.random.fold_in(kc, 1))
        out.append(np.asarray(i))
    return np.concatenate(out)


def divergence_methods(model, params, prop_layers, data, n_draws, key):
    from dataclasses import replace

    rows = []
    for method in ("qr", "hutchinson"):
        mm = replace(model, div_method=method)
        vals = estimator_draws(mm, params, prop_layers, data, n_draws, key)
        rows.append((method,) + _summary(vals))
    return rows
