"""Projected Stratonovich-Heun integration of manifold SDEs and ODEs.

Diffusion is always the tangential projection applied to an ambient
Brownian increment (extrinsic Brownian motion), optionally scaled. Each
step ends with the manifold's closest-point retraction.
"""

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DomainError, IntegrationError, StepSizeUnderflowError
from .manifolds import ON_MANIFOLD_TOL, Torus

GRIDS = ("uniform", "quadratic")


@dataclass(frozen=True)
class PathConfig:
    horizon: float = 1.0
    n_steps: int = 100
    project: bool = True
    seed: int = 0
    grid: str = "uniform"

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.grid not in GRIDS:
            raise ValueError(f"grid must be one of {GRIDS}")


@dataclass
class PathRealization:
    times: np.ndarray  # (n+1,) or (n+1, B)
    points: np.ndarray  # (n+1, B, m)
    increments: np.ndarray  # (n, B, m)
    ito_integral: np.ndarray = field(default=None)  # int a . dB
    a_norm: np.ndarray = field(default=None)  # int 1/2 |a|^2 ds
    divergence: np.ndarray = field(default=None)  # int div(Va - U0) ds


def grid_fractions(n_steps, grid="uniform"):
    u = jnp.linspace(0.0, 1.0, n_steps + 1)
    return u if grid == "uniform" else u**2


def heun_update(manifold, drift, x, t, dt, dB, scale=1.0, project=True):
    """One predictor-corrector step; dt may be per-path with shape x.shape[:-1]."""
    dt_ = jnp.asarray(dt)[..., None]
    pdb = manifold.project(x, dB)
    f0 = drift(x, t)
    xp = x + f0 * dt_ + scale * pdb
    f1 = drift(xp, t + jnp.asarray(dt))
    x1 = x + 0.5 * (f0 + f1) * dt_ + 0.5 * scale * (pdb + manifold.project(xp, dB))
    return manifold.retract(x1) if project else x1


def heun_step(drift, manifold, x, dt, dB, t=0.0, scale=1.0, project=True):
    """Checked single step for one or many points."""
    x = jnp.asarray(manifold.check(x))
    x1 = heun_update(manifold, drift, x, t, dt, jnp.asarray(dB, dtype=jnp.float64), scale, project)
    if project:
        _check_on_manifold(manifold, x1)
    return np.asarray(x1)


def _check_on_manifold(manifold, x):
    defect = np.asarray(manifold.defect(jnp.asarray(x)))
    if not np.all(np.isfinite(defect)) or np.any(defect > ON_MANIFOLD_TOL):
        worst = np.max(np.where(np.isfinite(defect), defect, np.inf))
        raise IntegrationError(f"integrator left {manifold.kind}: max defect {worst:.3e}")


def _zero_drift(manifold):
    return lambda x, t: manifold.prior_drift(x)


def integrate_fixed(manifold, drift, x0, t_start, t_end, n_steps, key, scale=1.0, project=True, grid="uniform", record=False):
    """Heun on a fixed grid from t_start to t_end (scalars or per-path arrays).

    With ``grid='quadratic'`` the steps are dense near ``t_start``.
    Returns the endpoint, or (endpoint, points, increments) when recording.
    """
    batch = jnp.shape(x0)[:-1]
    t_start = jnp.broadcast_to(jnp.asarray(t_start, dtype=jnp.float64), batch)
    t_end = jnp.broadcast_to(jnp.asarray(t_end, dtype=jnp.float64), batch)
    frac = grid_fractions(n_steps, grid)

    def body(x, i):
        t0 = t_start + (t_end - t_start) * frac[i]
        t1 = t_start + (t_end - t_start) * frac[i + 1]
        dt = t1 - t0
        dB = jax.random.normal(jax.random.fold_in(key, i), jnp.shape(x0)) * jnp.sqrt(jnp.abs(dt))[..., None]
        x1 = heun_update(manifold, drift, x, t0, dt, dB, scale, project)
        return x1, ((x1, dB) if record else None)

    x_end, rec = jax.lax.scan(body, x0, jnp.arange(n_steps))
    if record:
        return x_end, rec[0], rec[1]
    return x_end


def simulate_inference(manifold, cfg, x0, key=None, s_end=None, drift=None):
    """Inference SDE dY = U0 ds + P o dB from s = 0 to ``s_end`` (default T)."""
    x0 = jnp.asarray(manifold.check(np.atleast_2d(x0)))
    key = jax.random.PRNGKey(cfg.seed) if key is None else key
    s_end = cfg.horizon if s_end is None else s_end
    drift = _zero_drift(manifold) if drift is None else drift
    if np.all(np.asarray(s_end) == 0):
        return PathRealization(np.zeros(1), np.asarray(x0)[None], np.zeros((0,) + x0.shape))
    _, pts, incs = integrate_fixed(manifold, drift, x0, 0.0, s_end, cfg.n_steps, key, project=cfg.project, grid=cfg.grid, record=True)
    points = np.concatenate([np.asarray(x0)[None], np.asarray(pts)], axis=0)
    if cfg.project:
        _check_on_manifold(manifold, points)
    times = np.asarray(s_end) * np.asarray(grid_fractions(cfg.n_steps, cfg.grid)).reshape((-1,) + (1,) * np.ndim(s_end))
    return PathRealization(times, points, np.asarray(incs))


def lambda_family_drift(lam, score, u0, direction, horizon=None):
    """Drift and diffusion scale of the marginally equivalent family.

    ``score(x, s)`` is evaluated at inference time s; generative drifts take
    generative time t and query the score at s = horizon - t.
    """
    if lam > 1:
        raise DomainError("lambda must be <= 1")
    scale = math.sqrt(1.0 - lam)
    if direction == "inference":
        return (lambda x, s: u0(x) - 0.5 * lam * score(x, s)), scale
    if direction == "generative":
        if horizon is None:
            raise ValueError("generative drift needs the horizon")
        return (lambda x, t: (1.0 - 0.5 * lam) * score(x, horizon - t) - u0(x)), scale
    raise ValueError(f"unknown direction {direction!r}")


def simulate_generative_batch(manifold, score, cfg, key, n, lam=0.0):
    """X_0 ~ p0, integrate the lambda-family generative SDE to t = T."""
    k0, k1 = jax.random.split(key)
    x0 = manifold.prior_sample(k0, n)
    drift, scale = lambda_family_drift(lam, score, manifold.prior_drift, "generative", cfg.horizon)
    if cfg.grid == "quadratic":
        return _reverse_quadratic(manifold, drift, x0, cfg, k1, scale)
    return integrate_fixed(manifold, drift, x0, 0.0, cfg.horizon, cfg.n_steps, k1, scale, cfg.project)


def _reverse_quadratic(manifold, drift, x0, cfg, key, scale):
    frac = grid_fractions(cfg.n_steps, "quadratic")
    times = cfg.horizon * (1.0 - frac[::-1])  # t grid, dense near t = T

    def body(x, i):
        t0, t1 = times[i], times[i + 1]
        dt = t1 - t0
        dB = jax.random.normal(jax.random.fold_in(key, i), jnp.shape(x)) * jnp.sqrt(dt)
        return heun_update(manifold, drift, x, t0, dt, dB, scale, cfg.project), None

    x, _ = jax.lax.scan(body, x0, jnp.arange(cfg.n_steps))
    return x


def direct_torus_brownian(d, t, y0, rng_key):
    """Exact Brownian motion on T^d: wrapped Gaussian angle increments."""
    torus = Torus(d)
    y0 = jnp.asarray(y0)
    theta = torus.angles(y0)
    theta = theta + jnp.sqrt(jnp.asarray(t))[..., None] * jax.random.normal(rng_key, theta.shape)
    return torus.from_angles(jnp.mod(theta, 2 * math.pi))


def integrate_adaptive(step, state, t0, t1, key=None, noise_shape=None, rtol=1e-3, atol=1e-3, h_min=1e-5, h0=None, max_steps=200_000):
    """Step-doubling error control around ``step(state, t, h, dB) -> state``.

    One step of size h is compared with two of size h/2 and the two-step
    result is kept. For SDEs (``noise_shape`` given) the half-step
    increments come from a Brownian bridge and rejected intervals are
    refined in place, so every accepted increment belongs to one path.
    Returns (state, n_accepted, n_rejected).
    """
    t = float(t0)
    t1 = float(t1)
    h = float(h0) if h0 is not None else (t1 - t0) / 20.0
    pending = []  # refined (h, dB) segments, next one last
    draws = 0
    accepted = rejected = 0

    def draw(shape, var):
        nonlocal draws
        draws += 1
        return jax.random.normal(jax.random.fold_in(key, draws), shape) * math.sqrt(var)

    while t1 - t > 1e-12 * max(1.0, abs(t1)):
        if accepted + rejected > max_steps:
            raise IntegrationError("adaptive integrator exceeded max_steps")
        if noise_shape is None:
            h = min(h, t1 - t)
            dB = dB1 = dB2 = None
        else:
            if pending:
                h, dB = pending.pop()
            else:
                h = min(h, t1 - t)
                dB = draw(noise_shape, h)
            dB1 = 0.5 * dB + draw(noise_shape, h / 4.0)
            dB2 = dB - dB1
        full = step(state, t, h, dB)
        half = step(step(state, t, 0.5 * h, dB1), t + 0.5 * h, 0.5 * h, dB2)
        err = _error_norm(full, half, rtol, atol)
        if not np.isfinite(err):
            raise IntegrationError("non-finite state in adaptive integration")
        if err <= 1.0:
            state = half
            t += h
            accepted += 1
            if noise_shape is None:
                h = h * min(2.0, max(0.2, 0.9 * err ** (-1.0 / 3.0))) if err > 0 else 2.0 * h
            elif not pending and err < 0.25:
                h = 2.0 * h
        else:
            rejected += 1
            if 0.5 * h < h_min:
                raise StepSizeUnderflowError(f"step size fell below {h_min} at t={t:.6g}")
            if noise_shape is None:
                h = max(0.5 * h, h * max(0.2, 0.9 * err ** (-1.0 / 3.0)))
                h = max(h, h_min)
            else:
                pending.append((0.5 * h, dB2))
                pending.append((0.5 * h, dB1))
    return state, accepted, rejected


def _error_norm(a, b, rtol, atol):
    errs = []
    for la, lb in zip(jax.tree_util.tree_leaves(a), jax.tree_util.tree_leaves(b)):
        la, lb = np.asarray(la), np.asarray(lb)
        batch = la.shape[0] if la.ndim else 1
        scale = atol + rtol * np.maximum(np.abs(la), np.abs(lb))
        errs.append(((la - lb) / scale).reshape(batch, -1))
    e = np.concatenate(errs, axis=1)
    return float(np.max(np.sqrt(np.mean(e**2, axis=1))))
