"""Embedded manifolds: tangential projections, retractions, and priors.

Every manifold works on arrays whose last axis holds ambient coordinates, so
the same code serves single points and batches. SO(n) points are row-major
flattenings of n x n matrices.
"""

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import gammaln

from .errors import ConfigError, ConstraintError, DomainError

ON_MANIFOLD_TOL = 1e-8


def _log_sphere_area(d):
    # surface area of the unit d-sphere in R^{d+1}
    return math.log(2.0) + 0.5 * (d + 1) * math.log(math.pi) - gammaln(0.5 * (d + 1))


def lorentz_inner(x, y):
    x = jnp.asarray(x)
    y = jnp.asarray(y)
    return -x[..., 0] * y[..., 0] + jnp.sum(x[..., 1:] * y[..., 1:], axis=-1)


class Manifold:
    kind: str
    dim: int
    ambient_dim: int

    def project(self, x, u):
        raise NotImplementedError

    def retract(self, x):
        raise NotImplementedError

    def defect(self, x):
        raise NotImplementedError

    def prior_log_prob(self, x):
        raise NotImplementedError

    def prior_sample(self, key, n):
        raise NotImplementedError

    def prior_drift(self, x):
        """U0 = 1/2 grad_g log p0; zero for uniform priors."""
        return jnp.zeros_like(x)

    @property
    def compact(self):
        return True

    @property
    def spectral_gap(self):
        """Slowest decay rate of the inference process towards its prior."""
        raise NotImplementedError

    @property
    def default_horizon(self):
        # leaves at most e^-5 of the slowest mode of the data at the prior end
        return 5.0 / self.spectral_gap

    @property
    def default_train_steps(self):
        return 100

    def projection_matrix(self, x):
        eye = jnp.eye(self.ambient_dim)
        cols = jax.vmap(lambda e: self.project(x, e), out_axes=-1)(eye)
        return cols

    def is_on(self, x, tol=ON_MANIFOLD_TOL):
        return np.asarray(self.defect(jnp.asarray(x)) <= tol)

    def check(self, x, tol=ON_MANIFOLD_TOL):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.ambient_dim:
            raise ConstraintError(f"expected {self.ambient_dim} ambient coordinates, got {x.shape[-1]}")
        bad = ~self.is_on(x, tol)
        if np.any(bad):
            worst = float(np.max(np.asarray(self.defect(jnp.asarray(x)))))
            raise ConstraintError(f"{int(np.sum(bad))} point(s) off {self.kind} (max defect {worst:.3e})")
        return x

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Sphere(Manifold):
    d: int = 2
    kind = "sphere"

    @property
    def dim(self):
        return self.d

    @property
    def ambient_dim(self):
        return self.d + 1

    def project(self, x, u):
        return u - jnp.sum(x * u, -1, keepdims=True) / jnp.sum(x * x, -1, keepdims=True) * x

    def retract(self, x):
        return x / jnp.linalg.norm(x, axis=-1, keepdims=True)

    def defect(self, x):
        return jnp.abs(jnp.linalg.norm(x, axis=-1) - 1.0)

    def prior_log_prob(self, x):
        return jnp.full(jnp.shape(x)[:-1], -_log_sphere_area(self.d))

    def prior_sample(self, key, n):
        return self.retract(jax.random.normal(key, (n, self.ambient_dim)))

    @property
    def spectral_gap(self):
        # first eigenvalue of Delta/2 on S^d
        return self.d / 2.0

    def to_dict(self):
        return {"kind": "sphere", "dim": self.d}


@dataclass(frozen=True)
class Torus(Manifold):
    """Product of d unit circles embedded in R^{2d}."""

    d: int = 2
    kind = "torus"

    @property
    def dim(self):
        return self.d

    @property
    def ambient_dim(self):
        return 2 * self.d

    def _blocks(self, x):
        return jnp.reshape(x, jnp.shape(x)[:-1] + (self.d, 2))

    def project(self, x, u):
        xb, ub = self._blocks(x), self._blocks(u)
        out = ub - jnp.sum(xb * ub, -1, keepdims=True) / jnp.sum(xb * xb, -1, keepdims=True) * xb
        return jnp.reshape(out, jnp.shape(u))

    def retract(self, x):
        xb = self._blocks(x)
        return jnp.reshape(xb / jnp.linalg.norm(xb, axis=-1, keepdims=True), jnp.shape(x))

    def defect(self, x):
        return jnp.max(jnp.abs(jnp.linalg.norm(self._blocks(x), axis=-1) - 1.0), axis=-1)

    def prior_log_prob(self, x):
        return jnp.full(jnp.shape(x)[:-1], -self.d * math.log(2 * math.pi))

    def prior_sample(self, key, n):
        return self.retract(jax.random.normal(key, (n, self.ambient_dim)))

    def angles(self, x):
        xb = self._blocks(x)
        return jnp.mod(jnp.arctan2(xb[..., 1], xb[..., 0]), 2 * math.pi)

    def from_angles(self, theta):
        theta = jnp.asarray(theta)
        xb = jnp.stack([jnp.cos(theta), jnp.sin(theta)], axis=-1)
        return jnp.reshape(xb, theta.shape[:-1] + (2 * theta.shape[-1],))

    @property
    def spectral_gap(self):
        return 0.5

    @property
    def default_train_steps(self):
        return 1000

    def to_dict(self):
        return {"kind": "torus", "dim": self.d}


@dataclass(frozen=True)
class Hyperboloid(Manifold):
    """Upper sheet of <x, x>_L = 1/K in R^{d+1}, K < 0.

    Divergences and densities use the metric induced by the Euclidean
    ambient inner product; see ``hyperbolic_density_conversion`` for the
    Lorentz-metric density.
    """

    d: int = 2
    curvature: float = -1.0
    kind = "hyperboloid"

    def __post_init__(self):
        if not self.curvature < 0:
            raise ConfigError("hyperboloid curvature must be negative")

    @property
    def dim(self):
        return self.d

    @property
    def ambient_dim(self):
        return self.d + 1

    @property
    def compact(self):
        return False

    def normal(self, x):
        return jnp.concatenate([-x[..., :1], x[..., 1:]], axis=-1)

    def project(self, x, u):
        n = self.normal(x)
        return u - jnp.sum(n * u, -1, keepdims=True) / jnp.sum(n * n, -1, keepdims=True) * n

    def retract(self, x):
        # closest point in the Lorentz norm, not in Euclidean distance
        scale = jnp.sqrt(self.curvature * lorentz_inner(x, x))
        return x / (jnp.sign(x[..., :1]) * scale[..., None])

    def defect(self, x):
        gap = jnp.abs(lorentz_inner(x, x) - 1.0 / self.curvature)
        return jnp.where(x[..., 0] > 0, gap, jnp.inf)

    def lift(self, v):
        """Graph coordinates (x_1..x_d) -> point on the sheet."""
        v = jnp.asarray(v)
        x0 = jnp.sqrt(-1.0 / self.curvature + jnp.sum(v * v, -1, keepdims=True))
        return jnp.concatenate([x0, v], axis=-1)

    def log_det_euclidean_metric(self, x):
        r2 = jnp.sum(x[..., 1:] ** 2, -1)
        return jnp.log1p(r2 / x[..., 0] ** 2)

    def log_det_lorentz_metric(self, x):
        r2 = jnp.sum(x[..., 1:] ** 2, -1)
        return jnp.log1p(-r2 / x[..., 0] ** 2)

    def prior_log_prob(self, x):
        # standard normal on the graph coordinates, expressed per unit of
        # Euclidean-induced volume
        r2 = jnp.sum(x[..., 1:] ** 2, -1)
        return -0.5 * r2 - 0.5 * self.d * math.log(2 * math.pi) - 0.5 * self.log_det_euclidean_metric(x)

    def prior_sample(self, key, n):
        return self.lift(jax.random.normal(key, (n, self.d)))

    def prior_drift(self, x):
        x0 = x[..., :1]
        xs = x[..., 1:]
        r2 = jnp.sum(xs * xs, -1, keepdims=True)
        h = r2 / x0**2
        g0 = (r2 / x0**3) / (1.0 + h)
        gs = -xs - (xs / x0**2) / (1.0 + h)
        return 0.5 * self.project(x, jnp.concatenate([g0, gs], axis=-1))

    @property
    def spectral_gap(self):
        # the mean of the Langevin process relaxes like exp(-s/2)
        return 0.5

    def to_dict(self):
        return {"kind": "hyperboloid", "dim": self.d, "curvature": self.curvature}


@dataclass(frozen=True)
class SpecialOrthogonal(Manifold):
    n: int = 3
    kind = "special_orthogonal"

    @property
    def dim(self):
        return self.n * (self.n - 1) // 2

    @property
    def ambient_dim(self):
        return self.n * self.n

    def _mat(self, x):
        return jnp.reshape(x, jnp.shape(x)[:-1] + (self.n, self.n))

    def _flat(self, x):
        return jnp.reshape(x, jnp.shape(x)[:-2] + (self.n * self.n,))

    def project(self, x, u):
        X, U = self._mat(x), self._mat(u)
        return self._flat(0.5 * (U - X @ jnp.swapaxes(U, -1, -2) @ X))

    def retract(self, x):
        u, _, vt = jnp.linalg.svd(self._mat(x))
        flip = jnp.linalg.det(u @ vt) < 0
        u = u.at[..., :, -1].multiply(jnp.where(flip, -1.0, 1.0)[..., None])
        return self._flat(u @ vt)

    def defect(self, x):
        X = self._mat(x)
        eye = jnp.eye(self.n)
        gap = jnp.max(jnp.abs(jnp.swapaxes(X, -1, -2) @ X - eye), axis=(-1, -2))
        return jnp.where(jnp.linalg.det(X) > 0, gap, jnp.inf)

    @property
    def log_volume(self):
        # volume under the bi-invariant metric <A, B> = tr(A^T B) / 2, i.e.
        # prod_k |S^{k-1}| (8 pi^2 for SO(3)). This metric is half the
        # Frobenius one, a constant factor, so divergences are unchanged and
        # every density on SO(n) is reported against this volume.
        return sum(_log_sphere_area(k - 1) for k in range(2, self.n + 1))

    def prior_log_prob(self, x):
        return jnp.full(jnp.shape(x)[:-1], -self.log_volume)

    def prior_sample(self, key, n):
        g = jax.random.normal(key, (n, self.n, self.n))
        q, r = jnp.linalg.qr(g)
        q = q * jnp.where(jnp.diagonal(r, axis1=-2, axis2=-1) < 0, -1.0, 1.0)[..., None, :]
        flip = jnp.linalg.det(q) < 0
        q = q.at[..., :, 0].multiply(jnp.where(flip, -1.0, 1.0)[..., None])
        return self._flat(q)

    @property
    def spectral_gap(self):
        # first eigenvalue of Delta/2 under the Frobenius metric on SO(3)
        return 0.5

    def to_dict(self):
        return {"kind": "special_orthogonal", "n": self.n}


def manifold_from_dict(spec):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    try:
        if kind == "sphere":
            return Sphere(int(spec.pop("dim")))
        if kind == "torus":
            return Torus(int(spec.pop("dim")))
        if kind == "hyperboloid":
            return Hyperboloid(int(spec.pop("dim")), float(spec.pop("curvature", -1.0)))
        if kind == "special_orthogonal":
            return SpecialOrthogonal(int(spec.pop("n")))
    except KeyError as exc:
        raise ConfigError(f"manifold spec missing {exc}") from exc
    raise ConfigError(f"unknown manifold kind {kind!r}")


# checked public operations


def tangential_projection(manifold, x, u):
    x = manifold.check(x)
    return np.asarray(manifold.project(jnp.asarray(x), jnp.asarray(u, dtype=jnp.float64)))


def closest_point(manifold, x):
    x = np.asarray(x, dtype=np.float64)
    if isinstance(manifold, Sphere):
        if np.any(np.linalg.norm(x, axis=-1) == 0):
            raise DomainError("cannot project the origin onto a sphere")
    elif isinstance(manifold, Torus):
        if np.any(np.linalg.norm(x.reshape(x.shape[:-1] + (manifold.d, 2)), axis=-1) == 0):
            raise DomainError("a circle block is zero")
    elif isinstance(manifold, Hyperboloid):
        if np.any(np.asarray(lorentz_inner(x, x)) >= 0):
            raise DomainError("closest_point needs <x, x>_L < 0")
    elif isinstance(manifold, SpecialOrthogonal):
        mats = x.reshape(x.shape[:-1] + (manifold.n, manifold.n))
        if np.any(np.abs(np.linalg.det(mats)) < 1e-14):
            raise DomainError("matrix is singular")
    return np.asarray(manifold.retract(jnp.asarray(x)))


def prior_log_density(manifold, x):
    x = manifold.check(x)
    return np.asarray(manifold.prior_log_prob(jnp.asarray(x)))


def prior_sample(manifold, rng, n=1):
    return np.asarray(manifold.prior_sample(rng.key, n))


def hyperbolic_density_conversion(manifold, log_p_euclidean, x):
    """log p_L = log p_E - 1/2 log(|G_L| / |G_E|) in graph coordinates."""
    x = jnp.asarray(manifold.check(x))
    return log_p_euclidean - 0.5 * (manifold.log_det_lorentz_metric(x) - manifold.log_det_euclidean_metric(x))


def hyperbolic_density_to_euclidean(manifold, log_p_lorentz, x):
    x = jnp.asarray(manifold.check(x))
    return log_p_lorentz + 0.5 * (manifold.log_det_lorentz_metric(x) - manifold.log_det_euclidean_metric(x))
