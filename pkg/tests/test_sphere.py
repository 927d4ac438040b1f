import numpy as np
import pytest
from scipy.special import sph_harm_y

from qmfg.sphere import (
    SphereField,
    SphereGrid,
    SphereMeasure,
    cap_coeffs,
    coefficient_mask,
    heat_kernel_cos,
    heat_kernel_point,
    heat_multiplier,
    kernel_tail,
    kernel_truncation,
    legendre_table,
    legendre_theta_derivative,
    real_sph_harm,
    smoothing_constant_probe,
)

GRID = SphereGrid()


def random_coeffs(rng, L, lmax=None):
    c = rng.normal(size=(L + 1, 2 * L + 1)) * coefficient_mask(L)
    if lmax is not None:
        c[lmax + 1:] = 0
    return c


def test_real_harmonics_match_scipy():
    th, ph = 0.7, 1.3
    Y = real_sph_harm(12, th, ph)
    for l in range(13):
        for m in range(-l, l + 1):
            c = sph_harm_y(l, abs(m), th, ph) * (-1) ** m  # remove the Condon-Shortley phase
            ref = c.real if m == 0 else np.sqrt(2) * (c.real if m > 0 else c.imag)
            assert Y[l, 12 + m] == pytest.approx(ref, abs=1e-13)


def test_legendre_derivative_finite_difference():
    x = np.array([0.3, -0.8, 0.95])
    th = np.arccos(x)
    h = 1e-6
    P = legendre_table(20, x)
    dP = legendre_theta_derivative(P, x)
    fd = (legendre_table(20, np.cos(th + h)) - legendre_table(20, np.cos(th - h))) / (2 * h)
    np.testing.assert_allclose(dP, fd, atol=1e-6)


def test_transform_round_trip_and_orthonormality():
    rng = np.random.default_rng(0)
    c = random_coeffs(rng, GRID.L)
    v = GRID.synthesize(c)
    np.testing.assert_allclose(GRID.analyze(v), c, atol=1e-11)
    f = SphereField(GRID, c)
    assert f.consistency_error() < 1e-9
    # Parseval on the quadrature grid
    assert GRID.integrate(v * v) == pytest.approx(np.sum(c * c), rel=1e-12)


def test_transform_rejects_wrong_layout():
    with pytest.raises(ValueError):
        GRID.synthesize(np.zeros((10, 19)))
    with pytest.raises(ValueError):
        SphereGrid(L=64, nlat=64, nlon=128)


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    c = random_coeffs(rng, GRID.L, lmax=15)
    gt, gp = GRID.gradient(c)
    T, P = GRID.mesh
    h = 1e-6
    for i, j in [(5, 3), (31, 77), (60, 120)]:
        dth = (GRID.evaluate(c, T[i, j] + h, P[i, j]) - GRID.evaluate(c, T[i, j] - h, P[i, j])) / (2 * h)
        dph = (GRID.evaluate(c, T[i, j], P[i, j] + h) - GRID.evaluate(c, T[i, j], P[i, j] - h)) / (2 * h)
        assert gt[i, j] == pytest.approx(dth, abs=1e-6)
        assert gp[i, j] == pytest.approx(dph / np.sin(T[i, j]), abs=1e-6)


def test_divergence_of_gradient_is_laplacian_and_conserves_mass():
    rng = np.random.default_rng(2)
    c = random_coeffs(rng, GRID.L, lmax=20)
    gt, gp = GRID.gradient(c)
    np.testing.assert_allclose(GRID.divergence(gt, gp), GRID.laplacian(c), atol=1e-9)
    vt = rng.normal(size=GRID.shape)
    vp = rng.normal(size=GRID.shape)
    assert abs(GRID.divergence(vt, vp)[0, GRID.L]) < 1e-15


def test_divergence_of_rotation_field():
    # rigid rotation about z is divergence free
    T, P = GRID.mesh
    assert np.max(np.abs(GRID.divergence(np.zeros_like(T), np.sin(T)))) < 1e-12


def test_heat_eigen_decay():
    rng = np.random.default_rng(3)
    c = random_coeffs(rng, GRID.L)
    for t in (0.0, 0.01, 0.3):
        out = GRID.heat(c, t)
        for l in (0, 1, 5, 30):
            np.testing.assert_allclose(out[l], c[l] * np.exp(-2 * l * (l + 1) * t), rtol=1e-10, atol=0)
    np.testing.assert_array_equal(GRID.heat(c, 0.0), c)
    with pytest.raises(ValueError):
        heat_multiplier(4, -1.0)


def test_heat_is_sup_contraction_and_conserves_mass():
    rng = np.random.default_rng(4)
    f = SphereField(GRID, cap_coeffs(GRID.L, 0.8, 1.0, 2.0) + 0.1 * random_coeffs(rng, GRID.L, lmax=5))
    m = SphereMeasure(GRID, f.coeffs)
    for t in (1e-3, 1e-2, 0.1):
        g = f.heat(t)
        assert g.sup_norm() <= f.sup_norm() * (1 + 1e-12)
        assert m.heat(t).total_mass == pytest.approx(m.total_mass, abs=1e-12)


def test_kernel_point_properties():
    t = 0.01
    v = (0.4, 1.0)
    T, P = GRID.mesh
    k = heat_kernel_point(t, v, (T, P))
    assert GRID.integrate(k) == pytest.approx(1.0, abs=1e-10)
    w = (2.1, 4.0)
    assert heat_kernel_point(t, v, w) == pytest.approx(heat_kernel_point(t, w, v), rel=1e-14)
    for tt in (0.005, 0.05, 0.5):
        assert np.min(heat_kernel_point(tt, v, (T, P))) >= -1e-9
    # band-limited grid kernel agrees with the point series
    kc = GRID.kernel_coeffs(0.02, *v)
    np.testing.assert_allclose(GRID.synthesize(kc), heat_kernel_point(0.02, v, (T, P)), atol=1e-10)


def test_kernel_truncation_and_errors():
    L = kernel_truncation(0.005)
    assert kernel_tail(0.005, L) < 1e-12
    assert kernel_tail(0.005, L - 1) >= 1e-12
    # the default band limit leaves a tail above 1e-12 at t = 0.005
    assert kernel_tail(0.005, 48) > 1e-12
    with pytest.raises(ValueError):
        heat_kernel_cos(0.005, 0.3, L=48)
    with pytest.raises(ValueError):
        heat_kernel_cos(0.0, 0.3)


def test_kernel_semigroup():
    # K(s) * K(t) = K(s + t) by quadrature
    T, P = GRID.mesh
    v, w = (0.5, 0.3), (1.9, 2.5)
    s, t = 0.02, 0.03
    lhs = GRID.integrate(heat_kernel_point(s, v, (T, P)) * heat_kernel_point(t, (T, P), w))
    assert lhs == pytest.approx(heat_kernel_point(s + t, v, w), rel=1e-9)


def test_cap_coefficients():
    c = cap_coeffs(GRID.L, np.pi / 2, 0.0, 0.0)
    assert c[0, GRID.L] * np.sqrt(4 * np.pi) == pytest.approx(2 * np.pi)
    v = GRID.synthesize(cap_coeffs(GRID.L, 0.9, 1.2, 0.4))
    T, P = GRID.mesh
    inside = np.cos(T) * np.cos(1.2) + np.sin(T) * np.sin(1.2) * np.cos(P - 0.4) > np.cos(0.6)
    outside = np.cos(T) * np.cos(1.2) + np.sin(T) * np.sin(1.2) * np.cos(P - 0.4) < np.cos(1.2)
    assert np.all(np.abs(v[inside] - 1) < 0.1) and np.all(np.abs(v[outside]) < 0.1)


def test_smoothing_probe():
    rng = np.random.default_rng(5)
    probe = smoothing_constant_probe(GRID, np.geomspace(1e-3, 1e-1, 9), 6, rng)
    assert -0.6 <= probe.exponent <= -0.4
    const = SphereField(GRID, np.zeros((GRID.L + 1, 2 * GRID.L + 1)))
    const.coeffs[0, GRID.L] = 1.0
    assert const.heat(0.01).sup_gradient() < 1e-12


def test_c1_contraction_smooth_field():
    rng = np.random.default_rng(6)
    f = SphereField(GRID, random_coeffs(rng, GRID.L, lmax=8))
    for t in (1e-3, 1e-2, 1e-1):
        assert f.heat(t).c1_norm() <= f.c1_norm() * (1 + 1e-6)


def test_transfer_between_band_limits():
    rng = np.random.default_rng(7)
    c = random_coeffs(rng, GRID.L, lmax=10)
    fine = GRID.refined()
    up = GRID.transfer(c, fine)
    T, P = 0.7, 2.0
    assert fine.evaluate(up, T, P) == pytest.approx(GRID.evaluate(c, T, P), rel=1e-12)
    np.testing.assert_allclose(fine.transfer(up, GRID), c)
