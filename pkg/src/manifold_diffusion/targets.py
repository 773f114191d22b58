"""Synthetic target distributions and CSV ingestion.

Host-side samplers draw from a numpy Generator tied to the caller's
RngStream, since several of them are rejection loops.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ive, logsumexp

from .errors import ConfigError, ConstraintError, UnsupportedDensityError
from .manifolds import Hyperboloid, SpecialOrthogonal, Sphere, Torus, _log_sphere_area

KINDS = ("vmf-mixture", "wrapped-gaussian-mixture", "hyperbolic-checkerboard", "so3-multimodal")
MAPPINGS = ("latlon-to-sphere", "angles-to-torus", "ambient-raw")


@dataclass
class TargetSpec:
    kind: str
    manifold: object
    means: np.ndarray = None  # (k, m) ambient points, or (k, d) angles on tori
    scales: np.ndarray = None  # vMF concentrations or Gaussian std devs, (k,)
    weights: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown target kind {self.kind!r}")
        if self.kind in ("hyperbolic-checkerboard",):
            return
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        self.scales = np.broadcast_to(np.asarray(self.scales, dtype=np.float64), (k,)).copy()
        w = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (k,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be nonnegative and sum to 1")
        self.weights = w
        if self.kind == "vmf-mixture":
            if not isinstance(self.manifold, Sphere):
                raise ConfigError("vMF mixtures live on spheres")
            if np.any(self.scales < 0):
                raise ConfigError("concentrations must be >= 0")
            self.manifold.check(self.means)
        elif self.kind == "wrapped-gaussian-mixture":
            if np.any(self.scales <= 0):
                raise ConfigError("scales must be positive")
            if isinstance(self.manifold, Torus):
                if self.means.shape[1] != self.manifold.d:
                    raise ConfigError("torus means are given as d angles")
            elif isinstance(self.manifold, Hyperboloid):
                self.manifold.check(self.means)
            else:
                raise ConfigError("wrapped Gaussians live on tori or hyperboloids")
        elif self.kind == "so3-multimodal":
            if not (isinstance(self.manifold, SpecialOrthogonal) and self.manifold.n == 3):
                raise ConfigError("the SO(3) target needs SpecialOrthogonal(3)")
            if np.any(self.scales <= 0):
                raise ConfigError("concentrations must be positive")
            self.manifold.check(self.means)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.means is not None:
            d.update(means=self.means.tolist(), scales=self.scales.tolist(), weights=self.weights.tolist())
        return d


def target_from_dict(manifold, spec):
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind == "so3-multimodal" and "means" not in spec:
        return default_so3_target(spec.get("concentration", 8.0))
    if kind == "hyperbolic-checkerboard":
        return TargetSpec(kind, manifold)
    means = spec.pop("means", None)
    if kind == "vmf-mixture" and means is not None:
        means = np.asarray(means, dtype=np.float64)
        means = means / np.linalg.norm(means, axis=-1, keepdims=True)
    try:
        return TargetSpec(kind, manifold, means, spec.pop("scales"), spec.pop("weights", None))
    except KeyError as exc:
        raise ConfigError(f"target spec missing {exc}") from exc


# densities


def vmf_log_normalizer(kappa, p):
    """log C_p(kappa) for the vMF density on S^{p-1} w.r.t. surface measure."""
    kappa = np.asarray(kappa, dtype=np.float64)
    nu = 0.5 * p - 1.0
    small = kappa < 1e-8
    k = np.where(small, 1.0, kappa)
    val = nu * np.log(k) - 0.5 * p * math.log(2 * math.pi) - (np.log(ive(nu, k)) + k)
    return np.where(small, -_log_sphere_area(p - 1), val)


def wrapped_normal_log_pdf(theta, mu, sigma, n_terms=30):
    """Wrapped normal on the circle by truncated series.

    Uses the theta-sum over images for sigma < 1 and the Fourier series for
    sigma >= 1, each truncated at |k| <= n_terms.
    """
    diff = np.mod(np.asarray(theta, dtype=np.float64) - mu + math.pi, 2 * math.pi) - math.pi
    if sigma < 1.0:
        k = np.arange(-n_terms, n_terms + 1)
        z = (diff[..., None] + 2 * math.pi * k) / sigma
        return logsumexp(-0.5 * z**2, axis=-1) - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    n = np.arange(1, n_terms + 1)
    series = 1.0 + 2.0 * np.sum(np.exp(-0.5 * n**2 * sigma**2) * np.cos(n * diff[..., None]), axis=-1)
    return np.log(series) - math.log(2 * math.pi)


def log_density(spec, x):
    """Normalized log-density w.r.t. the manifold's Riemannian volume."""
    x = np.asarray(x, dtype=np.float64)
    m = spec.manifold
    if spec.kind == "vmf-mixture":
        x = m.check(x)
        p = m.ambient_dim
        comps = [vmf_log_normalizer(k, p) + k * (x @ mu) for mu, k in zip(spec.means, spec.scales)]
        return logsumexp(np.stack(comps, -1), axis=-1, b=spec.weights)
    if spec.kind == "wrapped-gaussian-mixture" and isinstance(m, Torus):
        x = m.check(x)
        theta = np.asarray(m.angles(x))
        comps = []
        for mu, s in zip(spec.means, spec.scales):
            comps.append(sum(wrapped_normal_log_pdf(theta[..., j], mu[j], s) for j in range(m.d)))
        return logsumexp(np.stack(comps, -1), axis=-1, b=spec.weights)
    raise UnsupportedDensityError(f"no closed-form density for {spec.kind} on {m.kind}")


# samplers


def _sample_vmf(gen, mu, kappa, n):
    p = mu.shape[0]
    if kappa < 1e-8:
        g = gen.standard_normal((n, p))
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    # Wood's rejection sampler for the component along mu
    b = (-2 * kappa + math.sqrt(4 * kappa**2 + (p - 1) ** 2)) / (p - 1)
    x0 = (1 - b) / (1 + b)
    c = kappa * x0 + (p - 1) * math.log(1 - x0**2)
    w = np.empty(0)
    while w.size < n:
        m = 2 * (n - w.size) + 16
        z = gen.beta(0.5 * (p - 1), 0.5 * (p - 1), m)
        cand = (1 - (1 + b) * z) / (1 - (1 - b) * z)
        u = gen.uniform(size=m)
        ok = kappa * cand + (p - 1) * np.log(1 - x0 * cand) - c >= np.log(u)
        w = np.concatenate([w, cand[ok]])
    w = w[:n]
    v = gen.standard_normal((n, p))
    v -= (v @ mu)[:, None] * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = w[:, None] * mu + np.sqrt(np.clip(1 - w**2, 0, None))[:, None] * v
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _hyperbolic_wrapped_normal(gen, m, mu, sigma, n):
    """exp_mu of a parallel-transported N(0, sigma^2 I) tangent at the origin."""
    R = 1.0 / math.sqrt(-m.curvature)
    mu1 = mu / R  # work on the unit hyperboloid, then rescale
    o = np.zeros(m.ambient_dim)
    o[0] = 1.0
    v = np.zeros((n, m.ambient_dim))
    v[:, 1:] = gen.standard_normal((n, m.d)) * (sigma / R)
    alpha = mu1[0]  # -<o, mu>_L
    lor = lambda a, b: -a[..., 0] * b[..., 0] + np.sum(a[..., 1:] * b[..., 1:], -1)  # noqa: E731
    u = v + (lor(v, mu1) / (alpha + 1.0))[:, None] * (o + mu1)
    norm = np.sqrt(np.clip(lor(u, u), 0, None))[:, None]
    safe = np.where(norm > 0, norm, 1.0)
    x = np.cosh(norm) * mu1 + np.sinh(norm) * u / safe
    return m.retract(R * x)


def _checkerboard(gen, m, n):
    out = np.empty((0, 2))
    while out.shape[0] < n:
        c = gen.uniform(-3, 3, size=(2 * n + 16, 2))
        keep = (np.floor(c[:, 0]) + np.floor(c[:, 1])) % 2 == 0
        out = np.concatenate([out, c[keep]])
    v = np.zeros((n, m.d))
    v[:, :2] = out[:n]
    return np.asarray(m.lift(v))


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def default_so3_target(concentration=8.0):
    """Four modes: the identity and half-turns about the coordinate axes."""
    means = [np.eye(3)] + [_rotation(ax, math.pi) for ax in np.eye(3)]
    return TargetSpec("so3-multimodal", SpecialOrthogonal(3), np.stack([mm.reshape(-1) for mm in means]), concentration)


def _haar(gen, n):
    g = gen.standard_normal((n, 3, 3))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diagonal(r, axis1=1, axis2=2) < 0, -1.0, 1.0)[:, None, :]
    q[np.linalg.det(q) < 0, :, 0] *= -1
    return q


def _so3_component(gen, M, kappa, n):
    # accept Haar draws with probability exp(kappa (tr(M^T X) - 3)) <= 1
    out = np.empty((0, 3, 3))
    while out.shape[0] < n:
        X = _haar(gen, max(4096, 50 * (n - out.shape[0])))
        tr = np.einsum("ij,nij->n", M, X)
        keep = np.log(gen.uniform(size=X.shape[0])) < kappa * (tr - 3.0)
        out = np.concatenate([out, X[keep]])
    return out[:n].reshape(n, 9)


def sample(spec, rng, n):
    gen = rng.generator()
    m = spec.manifold
    if n == 0:
        return np.zeros((0, m.ambient_dim))
    if spec.kind == "hyperbolic-checkerboard":
        return _checkerboard(gen, m, n)
    counts = gen.multinomial(n, spec.weights)
    parts = []
    for j, c in enumerate(counts):
        if c == 0:
            continue
        mu, s = spec.means[j], spec.scales[j]
        if spec.kind == "vmf-mixture":
            parts.append(_sample_vmf(gen, mu, s, c))
        elif spec.kind == "so3-multimodal":
            parts.append(_so3_component(gen, mu.reshape(3, 3), s, c))
        elif isinstance(m, Torus):
            theta = mu + s * gen.standard_normal((c, m.d))
            parts.append(np.asarray(m.from_angles(np.mod(theta, 2 * math.pi))))
        else:
            parts.append(np.asarray(_hyperbolic_wrapped_normal(gen, m, mu, s, c)))
    x = np.concatenate(parts)[gen.permutation(n)]
    return m.check(x)


def differential_entropy_circle(spec, n_grid=512):
    """-int p log p on S^1 / T^1 by midpoint quadrature."""
    theta = (np.arange(n_grid) + 0.5) * 2 * math.pi / n_grid
    x = np.stack([np.cos(theta), np.sin(theta)], -1)
    lp = log_density(spec, x)
    return float(-np.sum(np.exp(lp) * lp) * 2 * math.pi / n_grid)


# CSV ingestion


def _read_rows(path):
    """Header and (line number, fields) pairs, skipping blank and '#' lines."""
    with open(path, newline="", encoding="utf-8") as fh:
        numbered = [(i, line) for i, line in enumerate(fh, start=1) if line.strip() and not line.startswith("#")]
    if not numbered:
        raise ValueError(f"{path}: empty file, header row required")
    parsed = [(i, next(csv.reader([line]))) for i, line in numbered]
    header = [h.strip() for h in parsed[0][1]]
    return header, parsed[1:]


def _floats(line, row, n_expected):
    if len(row) != n_expected:
        raise ValueError(f"line {line}: expected {n_expected} columns, found {len(row)}")
    try:
        return [float(c) for c in row]
    except ValueError:
        raise ValueError(f"line {line}: non-numeric value in {row!r}") from None


def ingest_csv(path, mapping, manifold=None, degrees=False):
    """Read a headed CSV into ambient points.

    latlon-to-sphere: columns (lat, lon) in degrees.
    angles-to-torus: one column per circle, radians unless ``degrees``.
    ambient-raw: ambient coordinates, checked against ``manifold``.
    """
    if mapping not in MAPPINGS:
        raise ConfigError(f"mapping must be one of {MAPPINGS}")
    header, rows = _read_rows(path)
    ncol = len(header)
    out = []
    if mapping == "latlon-to-sphere":
        lower = [h.lower() for h in header]
        ilat = next((lower.index(k) for k in ("lat", "latitude") if k in lower), 0)
        ilon = next((lower.index(k) for k in ("lon", "lng", "longitude") if k in lower), 1)
        for line, row in rows:
            vals = _floats(line, row, ncol)
            lat, lon = vals[ilat], vals[ilon]
            if not -90.0 <= lat <= 90.0:
                raise ValueError(f"line {line}: latitude {lat} outside [-90, 90]")
            la, lo = math.radians(lat), math.radians(lon)
            out.append([math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la)])
        target = Sphere(2)
    elif mapping == "angles-to-torus":
        for line, row in rows:
            ang = np.asarray(_floats(line, row, ncol))
            if degrees:
                ang = np.radians(ang)
            out.append(np.stack([np.cos(ang), np.sin(ang)], -1).reshape(-1))
        target = Torus(ncol)
    else:
        if manifold is None:
            raise ConfigError("ambient-raw ingestion needs a manifold")
        if ncol != manifold.ambient_dim:
            raise ValueError(f"expected {manifold.ambient_dim} columns, header has {ncol}")
        for line, row in rows:
            vals = np.asarray(_floats(line, row, ncol))
            if not manifold.is_on(vals):
                raise ConstraintError(f"line {line}: point is off {manifold.kind}")
            out.append(vals)
        target = manifold
    x = np.asarray(out, dtype=np.float64).reshape(-1, target.ambient_dim)
    return target.check(x) if len(x) else x
