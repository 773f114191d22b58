"""Riemannian divergence of ambient vector fields on embedded manifolds.

A field is any function mapping one ambient point of shape (m,) to an
ambient vector of shape (m,). The divergence is tr(P_x (dv/dx) P_x), which
we contract against an orthonormal tangent frame (exact) or against
projected random probes (unbiased).
"""

import functools
import math

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DomainError, RankDeficiencyError
from .numeric import RANK_TOL, batched_tangent_qr, qr_decompose


def tangent_frame(manifold, x, key):
    """Orthonormal tangent frame of shape (..., m, d) from projected Gaussians."""
    d, m = manifold.dim, manifold.ambient_dim
    g = jax.random.normal(key, jnp.shape(x)[:-1] + (d, m))
    pg = manifold.project(x[..., None, :], g)
    return batched_tangent_qr(jnp.swapaxes(pg, -1, -2))


def div_with_frame(field, x, frame):
    """sum_j e_j^T (dv/dx) e_j for a single point and an (m, d) frame."""
    jac_cols = jax.vmap(lambda e: jax.jvp(field, (x,), (e,))[1], in_axes=1, out_axes=1)(frame)
    return jnp.sum(frame * jac_cols)


def hutchinson_probes(manifold, x, key, n, dist="rademacher"):
    shape = (n, manifold.ambient_dim)
    if dist == "rademacher":
        z = jax.random.rademacher(key, shape, dtype=jnp.float64)
    elif dist == "gaussian":
        z = jax.random.normal(key, shape)
    else:
        raise ValueError(f"unknown probe distribution {dist!r}")
    return manifold.project(x[None, :], z)


def hutchinson_terms(field, x, probes):
    """z'^T (dv/dx) z' for each projected probe row."""
    jz = jax.vmap(lambda z: jax.jvp(field, (x,), (z,))[1])(probes)
    return jnp.sum(probes * jz, axis=-1)


# jitted per field object; reusing one field across points reuses the trace
_div_with_frame_jit = jax.jit(div_with_frame, static_argnums=0)
_hutchinson_terms_jit = jax.jit(hutchinson_terms, static_argnums=0)


# checked, single-point public operations


def divergence_qr(field, manifold, x, rng):
    x = jnp.asarray(manifold.check(x))
    for attempt in range(2):
        key = jax.random.fold_in(rng.key, attempt)
        g = np.asarray(manifold.project(x[None, :], jax.random.normal(key, (manifold.dim, manifold.ambient_dim))))
        try:
            q, _ = qr_decompose(g.T)
        except RankDeficiencyError:
            continue
        return float(_div_with_frame_jit(field, x, jnp.asarray(q)))
    raise RankDeficiencyError("projected probe vectors were rank deficient twice")


def divergence_hutchinson(field, manifold, x, n_samples, dist="rademacher", rng=None):
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = jnp.asarray(manifold.check(x))
    probes = hutchinson_probes(manifold, x, rng.key, n_samples, dist)
    terms = np.asarray(_hutchinson_terms_jit(field, x, probes))
    est = float(np.mean(terms))
    se = float(np.std(terms, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return est, se


def _sphere_chart(theta, phi):
    return np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])


def _sphere_chart_jacobian(theta, phi):
    return np.array(
        [
            [np.cos(theta) * np.cos(phi), -np.sin(theta) * np.sin(phi)],
            [np.cos(theta) * np.sin(phi), np.sin(theta) * np.cos(phi)],
            [-np.sin(theta), 0.0],
        ]
    )


def divergence_intrinsic_sphere2(field, x, step=1e-5):
    """Chart formula |G|^-1/2 sum_j d_j(|G|^1/2 v_j) in (theta, phi).

    Test oracle only: coefficients are pulled back through the chart
    Jacobian and differentiated by central differences.
    """
    x = np.asarray(x, dtype=np.float64)
    theta = math.acos(max(-1.0, min(1.0, x[2])))
    phi = math.atan2(x[1], x[0])
    if math.sin(theta) <= 1e-3:
        raise DomainError("point too close to a pole for the (theta, phi) chart")

    def weighted_coeffs(th, ph):
        j = _sphere_chart_jacobian(th, ph)
        v = np.asarray(field(jnp.asarray(_sphere_chart(th, ph))), dtype=np.float64)
        coeffs = np.linalg.solve(j.T @ j, j.T @ v)
        return math.sin(th) * coeffs

    d_theta = (weighted_coeffs(theta + step, phi)[0] - weighted_coeffs(theta - step, phi)[0]) / (2 * step)
    d_phi = (weighted_coeffs(theta, phi + step)[1] - weighted_coeffs(theta, phi - step)[1]) / (2 * step)
    return (d_theta + d_phi) / math.sin(theta)


def tangential_field_self_divergence(manifold, x, rng=None):
    """sum_k (div V_k) V_k with V_k the k-th column of P_x as a field.

    For the tangential projection matrix this is identically zero; the
    routine exists to verify that numerically.
    """
    x = jnp.asarray(manifold.check(x))
    key = rng.key if rng is not None else jax.random.PRNGKey(0)
    return np.asarray(_self_divergence(manifold, x, tangent_frame(manifold, x, key)))


@functools.partial(jax.jit, static_argnums=0)
def _self_divergence(manifold, x, frame):
    pmat = manifold.projection_matrix
    # dp[j, :, k] = (dP_{:,k}/dx) e_j
    dp = jax.vmap(lambda e: jax.jvp(pmat, (x,), (e,))[1], in_axes=1, out_axes=0)(frame)  # (d, m, m)
    divs = jnp.einsum("ij,jik->k", frame, dp)
    return pmat(x) @ divs
