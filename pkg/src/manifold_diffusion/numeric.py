"""Small dense linear algebra and reproducible random streams.

QR and SVD delegate to LAPACK through numpy; the wrappers pin down sign
conventions and turn failures into the package's exception types.
"""

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .errors import NumericFailureError, RankDeficiencyError

RANK_TOL = 1e-10


@dataclass(frozen=True)
class RngStream:
    """A (seed, stream-id) pair naming one counter-based threefry sequence.

    Streams are values: the same pair always yields the same draws, and
    distinct stream ids are independent by construction of ``fold_in``.
    """

    seed: int
    stream_id: int = 0

    @property
    def key(self):
        base = jax.random.PRNGKey(np.uint32(self.seed % 2**32))
        hi = self.seed >> 32
        if hi:
            base = jax.random.fold_in(base, np.uint32(hi % 2**32))
        return jax.random.fold_in(base, np.uint32(self.stream_id % 2**32))

    def generator(self):
        """numpy Generator for host-side rejection loops on the same stream."""
        return np.random.default_rng([self.seed % 2**63, self.stream_id % 2**63])

    def child(self, i):
        return RngStream(self.seed, (self.stream_id * 1_000_003 + int(i) + 1) % 2**64)

    def split(self, n):
        return [self.child(i) for i in range(n)]


def sample_gaussian(rng, n):
    return np.asarray(jax.random.normal(rng.key, (n,), dtype=jnp.float64))


def sample_rademacher(rng, n):
    return np.asarray(jax.random.rademacher(rng.key, (n,), dtype=jnp.float64))


def qr_decompose(a):
    """Thin QR of an m x k matrix with nonnegative diag(R)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] > a.shape[0]:
        raise ValueError(f"qr_decompose needs m x k with k <= m, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    r = r * signs[:, None]
    if np.any(np.abs(np.diag(r)) < RANK_TOL):
        raise RankDeficiencyError("columns are linearly dependent")
    return q, r


def svd_square(a):
    """U, S (descending), V with A = U diag(S) V^T."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"svd_square needs a nonempty square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericFailureError("non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(str(exc)) from exc
    return u, s, vt.T


def batched_tangent_qr(g):
    """Orthonormalize the columns of a (..., m, k) stack (jit-friendly)."""
    q, r = jnp.linalg.qr(g)
    signs = jnp.where(jnp.diagonal(r, axis1=-2, axis2=-1) < 0, -1.0, 1.0)
    return q * signs[..., None, :]
