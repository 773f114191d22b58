"""Learned importance density q(s) on (0, T) from a deep sigmoidal flow.

Base noise u ~ U(0, 1) goes through logit, a stack of monotone sigmoidal
layers (each followed by logit except the last) and a final scaling by T.
All log-derivatives are kept in log space so tails do not underflow.
At initialisation with zero jitter every layer is the identity on the
logit scale, so q is exactly uniform.
"""

import functools
import math
import warnings
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

_A_IDENTITY = math.log(math.e - 1.0)  # softplus^-1(1)


@dataclass(frozen=True)
class ProposalConfig:
    horizon: float
    n_layers: int = 2
    n_units: int = 8

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_layers < 1 or self.n_units < 1:
            raise ValueError("need at least one layer with one unit")


def init_proposal(cfg, key=None, jitter=0.0):
    layers = []
    for i in range(cfg.n_layers):
        k = jax.random.fold_in(key, i) if key is not None else None
        layer = {
            "a": jnp.full(cfg.n_units, _A_IDENTITY),
            "b": jnp.zeros(cfg.n_units),
            "w": jnp.zeros(cfg.n_units),
        }
        if jitter > 0:
            noise = jax.random.normal(k, (3, cfg.n_units)) * jitter
            layer = {name: v + noise[j] for j, (name, v) in enumerate(layer.items())}
        layers.append(layer)
    return layers


def _layer(layer, x, final):
    """Returns (output, log d output / d x) for a batch of scalars."""
    a = jax.nn.softplus(layer["a"])
    logw = jax.nn.log_softmax(layer["w"])
    h = x[..., None] * a + layer["b"]
    ls_pos = jax.nn.log_sigmoid(h)
    ls_neg = jax.nn.log_sigmoid(-h)
    log_y = jax.nn.logsumexp(logw + ls_pos, axis=-1)
    log_1my = jax.nn.logsumexp(logw + ls_neg, axis=-1)
    log_dy = jax.nn.logsumexp(logw + jnp.log(a) + ls_pos + ls_neg, axis=-1)
    if final:
        return jnp.exp(log_y), log_dy
    # logit(y) and its derivative d logit / dy = 1 / (y (1 - y))
    return log_y - log_1my, log_dy - log_y - log_1my


def _from_logit(layers, z):
    """Flow from the logit scale; returns v in (0,1) and log dv/dz."""
    total = jnp.zeros_like(z)
    for i, layer in enumerate(layers):
        z, ld = _layer(layer, z, final=(i == len(layers) - 1))
        total = total + ld
    return z, total


def forward(layers, u, horizon):
    """u in (0,1) -> (s, log q(s))."""
    u = jnp.asarray(u, dtype=jnp.float64)
    z = jnp.log(u) - jnp.log1p(-u)
    log_dz = -jnp.log(u) - jnp.log1p(-u)
    v, log_dv = _from_logit(layers, z)
    return horizon * v, -(math.log(horizon) + log_dz + log_dv)


def sample(layers, key, n, horizon):
    """Draw n times; s is kept strictly inside (0, T)."""
    tiny = 1e-12
    u = jax.random.uniform(key, (n,), minval=tiny, maxval=1.0 - tiny)
    s, logq = forward(layers, u, horizon)
    return jnp.clip(s, horizon * tiny, horizon * (1 - tiny)), logq


def _invert_logit_scale(layers, v, iters=200):
    lo = jnp.full_like(v, -60.0)
    hi = jnp.full_like(v, 60.0)

    def body(_, bounds):
        lo, hi = bounds
        mid = 0.5 * (lo + hi)
        below = _from_logit(layers, mid)[0] < v
        return jnp.where(below, mid, lo), jnp.where(below, hi, mid)

    lo, hi = jax.lax.fori_loop(0, iters, body, (lo, hi))
    return 0.5 * (lo + hi)


@functools.partial(jax.jit, static_argnums=2)
def cdf(layers, s, horizon):
    z = _invert_logit_scale(layers, jnp.asarray(s, dtype=jnp.float64) / horizon)
    return jax.nn.sigmoid(z)


@functools.partial(jax.jit, static_argnums=2)
def log_prob(layers, s, horizon):
    s = jnp.asarray(s, dtype=jnp.float64)
    z = _invert_logit_scale(layers, s / horizon)
    _, log_dv = _from_logit(layers, z)
    log_dz = -jax.nn.log_sigmoid(z) - jax.nn.log_sigmoid(-z)  # dz/du at u = sigmoid(z)
    return -(math.log(horizon) + log_dz + log_dv)


@dataclass
class ProposalAdam:
    """Separate optimizer for the proposal parameters."""

    lr: float = 0.01
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: object = None
    v: object = None

    def update(self, params, grads):
        if self.m is None:
            self.m = jax.tree_util.tree_map(jnp.zeros_like, params)
            self.v = jax.tree_util.tree_map(jnp.zeros_like, params)
        self.step += 1
        t = self.step
        self.m = jax.tree_util.tree_map(lambda m, g: self.b1 * m + (1 - self.b1) * g, self.m, grads)
        self.v = jax.tree_util.tree_map(lambda v, g: self.b2 * v + (1 - self.b2) * g * g, self.v, grads)
        c1, c2 = 1 - self.b1**t, 1 - self.b2**t
        return jax.tree_util.tree_map(lambda p, m, v: p - self.lr * (m / c1) / (jnp.sqrt(v / c2) + self.eps), params, self.m, self.v)


def is_degenerate(layers, horizon, n_grid=257):
    """True when q underflows or goes non-finite somewhere on a probe grid."""
    s = jnp.linspace(0.0, horizon, n_grid + 2)[1:-1]
    logq = np.asarray(log_prob(layers, s, horizon))
    flat = [np.asarray(v) for layer in layers for v in layer.values()]
    return (not np.all(np.isfinite(logq))) or np.min(logq) < -700 or not all(np.all(np.isfinite(f)) for f in flat)


def proposal_variance_step(layers, opt, sq_loss_grad, cfg, *args):
    """One Adam step on E[I^2] with s reparameterized through the flow.

    ``sq_loss_grad(layers, *args)`` returns the batch mean of I^2 and its
    gradient in the proposal parameters, with times produced by ``forward``
    from fixed base noise and model parameters held constant.
    Returns (layers, opt, loss).
    """
    loss, grads = sq_loss_grad(layers, *args)
    loss = float(loss)
    new = opt.update(layers, grads)
    if not np.isfinite(loss) or is_degenerate(new, cfg.horizon):
        warnings.warn("time proposal became degenerate; resetting to uniform", RuntimeWarning, stacklevel=2)
        return init_proposal(cfg), ProposalAdam(lr=opt.lr), loss
    return new, opt, loss
