import math

import numpy as np
import pytest
from scipy import stats

from manifold_diffusion import ConfigError, Hyperboloid, RngStream, Sphere, SpecialOrthogonal, Torus, UnsupportedDensityError
from manifold_diffusion.targets import (
    TargetSpec,
    default_so3_target,
    differential_entropy_circle,
    ingest_csv,
    log_density,
    sample,
    target_from_dict,
    vmf_log_normalizer,
    wrapped_normal_log_pdf,
)

S2 = Sphere(2)
NORTH = np.array([0.0, 0.0, 1.0])


def three_vmf():
    means = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8], [-0.6, -0.8, 0.0]])
    return TargetSpec("vmf-mixture", S2, means, [10.0, 5.0, 20.0], [0.3, 0.3, 0.4])


def torus_mixture():
    return TargetSpec("wrapped-gaussian-mixture", Torus(2), [[1.0, 2.0], [4.0, 5.5]], [0.3, 0.8], [0.6, 0.4])


def sphere_grid(n_z=64, n_phi=128):
    # midpoints in (z, phi) are an equal-area grid with cell area 4 pi / (n_z n_phi)
    z = -1 + (np.arange(n_z) + 0.5) * 2 / n_z
    phi = (np.arange(n_phi) + 0.5) * 2 * math.pi / n_phi
    Z, P = np.meshgrid(z, phi, indexing="ij")
    r = np.sqrt(1 - Z**2)
    return np.stack([r * np.cos(P), r * np.sin(P), Z], -1).reshape(-1, 3), 4 * math.pi / (n_z * n_phi)


def test_uniform_limits():
    x = np.asarray(sample(TargetSpec("vmf-mixture", S2, [NORTH], [0.0]), RngStream(0), 5))
    flat = TargetSpec("vmf-mixture", S2, [NORTH], [0.0])
    np.testing.assert_allclose(log_density(flat, x), -math.log(4 * math.pi), atol=1e-12)
    wide = TargetSpec("wrapped-gaussian-mixture", Torus(1), [[2.0]], [50.0])
    theta = np.linspace(0, 6, 7)
    np.testing.assert_allclose(log_density(wide, np.stack([np.cos(theta), np.sin(theta)], -1)), -math.log(2 * math.pi), atol=1e-12)


def test_vmf_normalizer_matches_closed_form_on_s2():
    for k in (0.5, 3.0, 40.0):
        exact = math.log(k) - math.log(2 * math.pi) - math.log1p(-math.exp(-2 * k)) - k
        assert abs(float(vmf_log_normalizer(k, 3)) - exact) < 1e-12
    assert abs(float(vmf_log_normalizer(1e-12, 3)) + math.log(4 * math.pi)) < 1e-14


def test_wrapped_normal_branches_agree():
    theta = np.linspace(0, 2 * math.pi, 50)
    # both the image sum and the Fourier series are accurate near sigma = 1
    a = wrapped_normal_log_pdf(theta, 0.3, 0.999)
    n = np.arange(1, 31)
    fourier = np.log(1 + 2 * np.sum(np.exp(-0.5 * n**2 * 0.999**2) * np.cos(n * (theta[:, None] - 0.3)), -1)) - math.log(2 * math.pi)
    np.testing.assert_allclose(a, fourier, atol=1e-12)


def test_vmf_sample_mean_direction():
    x = sample(TargetSpec("vmf-mixture", S2, [NORTH], [10.0]), RngStream(1), 10_000)
    mean = x.mean(0)
    angle = math.degrees(math.acos(mean[2] / np.linalg.norm(mean)))
    assert angle < 2.0
    # mean resultant length coth(k) - 1/k
    assert abs(np.linalg.norm(mean) - (1 / math.tanh(10.0) - 0.1)) < 0.01


def test_densities_are_normalized_on_grids():
    x, area = sphere_grid()
    assert abs(np.exp(log_density(three_vmf(), x)).sum() * area - 1) < 0.01
    t = (np.arange(256) + 0.5) * 2 * math.pi / 256
    A, B = np.meshgrid(t, t, indexing="ij")
    pts = Torus(2).from_angles(np.stack([A.ravel(), B.ravel()], -1))
    mass = np.exp(log_density(torus_mixture(), np.asarray(pts))).sum() * (2 * math.pi / 256) ** 2
    assert abs(mass - 1) < 0.01


def _merge_small(counts, expected, min_expected=5.0):
    order = np.argsort(expected)
    c, e = counts[order], expected[order]
    k = np.searchsorted(np.cumsum(e), min_expected) + 1
    return np.concatenate([[c[:k].sum()], c[k:]]), np.concatenate([[e[:k].sum()], e[k:]])


def test_vmf_mixture_samples_match_density():
    spec = three_vmf()
    n = 100_000
    x = sample(spec, RngStream(2), n)
    nz, nphi, sub = 20, 40, 8
    fine, area = sphere_grid(nz * sub, nphi * sub)
    p = np.exp(log_density(spec, fine)).reshape(nz, sub, nphi, sub).sum((1, 3)) * area
    zi = np.clip(((x[:, 2] + 1) / 2 * nz).astype(int), 0, nz - 1)
    pi = np.clip((np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * math.pi) / (2 * math.pi) * nphi).astype(int), 0, nphi - 1)
    counts = np.bincount(zi * nphi + pi, minlength=nz * nphi).astype(float)
    c, e = _merge_small(counts, p.ravel() / p.sum() * n)
    assert stats.chisquare(c, e).pvalue > 0.01


def _wrapped_interval_probs(mu, sigma, edges):
    fine = np.linspace(edges[0], edges[-1], 64 * (len(edges) - 1) + 1)
    pdf = np.exp(wrapped_normal_log_pdf(fine, mu, sigma))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(fine))])
    return np.diff(np.interp(edges, fine, cdf))


def test_torus_mixture_samples_match_density():
    spec = torus_mixture()
    n = 100_000
    ang = np.asarray(Torus(2).angles(sample(spec, RngStream(3), n)))
    edges = np.linspace(0, 2 * math.pi, 33)
    p = sum(w * np.outer(_wrapped_interval_probs(mu[0], s, edges), _wrapped_interval_probs(mu[1], s, edges)) for mu, s, w in zip(spec.means, spec.scales, spec.weights))
    counts = np.histogram2d(ang[:, 0], ang[:, 1], bins=[edges, edges])[0].ravel()
    c, e = _merge_small(counts, p.ravel() / p.sum() * n)
    assert stats.chisquare(c, e).pvalue > 0.01


def test_hyperbolic_wrapped_normal_radius():
    m = Hyperboloid(2)
    spec = TargetSpec("wrapped-gaussian-mixture", m, [[1.0, 0.0, 0.0]], [0.5])
    x = sample(spec, RngStream(4), 20_000)
    assert np.all(m.is_on(x))
    r = np.arccosh(x[:, 0])
    # geodesic radius of an isotropic 2D Gaussian is Rayleigh
    assert stats.kstest(r, stats.rayleigh(scale=0.5).cdf).pvalue > 0.01


def test_hyperbolic_wrapped_normal_off_origin_stays_on_sheet():
    m = Hyperboloid(2, -0.5)
    mu = np.asarray(m.lift(np.array([[1.0, -2.0]])))
    x = sample(TargetSpec("wrapped-gaussian-mixture", m, mu, [0.7]), RngStream(5), 1000)
    assert np.all(m.is_on(x))


def test_checkerboard_support():
    m = Hyperboloid(2)
    x = sample(TargetSpec("hyperbolic-checkerboard", m), RngStream(6), 5000)
    assert np.all(m.is_on(x))
    c = x[:, 1:]
    assert np.all(np.abs(c) <= 3)
    assert np.all((np.floor(c[:, 0]) + np.floor(c[:, 1])) % 2 == 0)


def test_so3_target_modes():
    spec = default_so3_target()
    x = sample(spec, RngStream(7), 4000)
    assert np.all(SpecialOrthogonal(3).is_on(x))
    tr = x @ spec.means.T  # tr(M_i^T X) for each mode
    nearest = np.argmax(tr, axis=1)
    assert np.all(np.bincount(nearest, minlength=4) > 800)
    assert np.median(tr.max(1)) > 2.5


def test_unsupported_densities():
    with pytest.raises(UnsupportedDensityError):
        log_density(default_so3_target(), np.eye(3).reshape(1, 9))
    with pytest.raises(UnsupportedDensityError):
        log_density(TargetSpec("hyperbolic-checkerboard", Hyperboloid(2)), np.array([[1.0, 0.0, 0.0]]))


def test_spec_validation():
    with pytest.raises(ConfigError):
        TargetSpec("vmf-mixture", S2, [NORTH, NORTH], [1.0, 1.0], [0.5, 0.6])
    with pytest.raises(ConfigError):
        TargetSpec("vmf-mixture", Torus(2), [NORTH], [1.0])
    with pytest.raises(ConfigError):
        TargetSpec("wrapped-gaussian-mixture", Torus(2), [[0.0, 0.0]], [0.0])
    with pytest.raises(ConfigError):
        TargetSpec("banana", S2)
    spec = target_from_dict(S2, {"kind": "vmf-mixture", "means": [[0, 0, 2]], "scales": [3.0]})
    np.testing.assert_allclose(spec.means, [NORTH])


def test_sampling_is_deterministic_per_stream():
    spec = three_vmf()
    a, b = sample(spec, RngStream(8), 100), sample(spec, RngStream(8), 100)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample(spec, RngStream(8, 1), 100))
    assert sample(spec, RngStream(8), 0).shape == (0, 3)


def test_circle_entropy_of_narrow_gaussian():
    spec = TargetSpec("wrapped-gaussian-mixture", Torus(1), [[1.0]], [0.3])
    assert abs(differential_entropy_circle(spec) - 0.5 * math.log(2 * math.pi * math.e * 0.09)) < 1e-6


def test_ingest_latlon(tmp_path):
    f = tmp_path / "quakes.csv"
    f.write_text("latitude,longitude\n# comment\n90,123\n0,0\n")
    np.testing.assert_allclose(ingest_csv(f, "latlon-to-sphere"), [[0, 0, 1], [1, 0, 0]], atol=1e-15)


def test_ingest_angles(tmp_path):
    f = tmp_path / "angles.csv"
    f.write_text("phi,psi\n180,90\n")
    np.testing.assert_allclose(ingest_csv(f, "angles-to-torus", degrees=True), [[-1, 0, 0, 1]], atol=1e-15)
    g = tmp_path / "rad.csv"
    g.write_text("phi\n3.141592653589793\n")
    np.testing.assert_allclose(ingest_csv(g, "angles-to-torus"), [[-1, 0]], atol=1e-15)


def test_ingest_errors_report_lines(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("lat,lon\n# note\n10,20\n10,abc\n")
    with pytest.raises(ValueError, match="line 4"):
        ingest_csv(f, "latlon-to-sphere")
    g = tmp_path / "range.csv"
    g.write_text("lat,lon\n95,0\n")
    with pytest.raises(ValueError, match="latitude"):
        ingest_csv(g, "latlon-to-sphere")
    h = tmp_path / "raw.csv"
    h.write_text("x,y,z\n1,1,0\n")
    with pytest.raises(Exception, match="line 2"):
        ingest_csv(h, "ambient-raw", manifold=S2)
    with pytest.raises(ConfigError):
        ingest_csv(h, "polar")
