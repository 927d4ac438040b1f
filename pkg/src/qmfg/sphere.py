"""Spectral calculus on the unit sphere (the Bloch sphere of a qubit).

Fields are stored on a Gauss-Legendre (in ``cos theta``) by uniform (in ``phi``)
grid and expanded in real orthonormal spherical harmonics

    Y_l0 = P_l0(cos theta),  Y_lm = sqrt(2) P_lm cos(m phi),  Y_l,-m = sqrt(2) P_lm sin(m phi)

with ``P_lm`` the orthonormal associated Legendre functions (no Condon-Shortley
phase).  Coefficients are stored in an ``(L+1, 2L+1)`` array indexed
``[l, L + m]``.  The Laplace-Beltrami eigenvalue of degree ``l`` is
``-l(l+1)``; the heat semigroup used by the game solver is ``exp(2 t Delta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

DEFAULT_L = 48
DEFAULT_NLAT = 64
DEFAULT_NLON = 128
KERNEL_TAIL_TOL = 1e-12


def legendre_table(L: int, x) -> np.ndarray:
    """Orthonormal ``P_lm(x)`` for ``0 <= m <= l <= L``; shape ``(L+1, L+1) + x.shape``.

    ``2 pi int P_lm^2 dx = 1``; entries with ``m > l`` are zero.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = np.zeros((L + 1, L + 1) + x.shape)
    P[0, 0] = 1.0 / np.sqrt(4.0 * np.pi)
    for m in range(1, L + 1):
        P[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * s * P[m - 1, m - 1]
    for m in range(0, L):
        P[m + 1, m] = np.sqrt(2 * m + 3.0) * x * P[m, m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
            P[l, m] = a * (x * P[l - 1, m] - b * P[l - 2, m])
    return P


def legendre_theta_derivative(P: np.ndarray, x) -> np.ndarray:
    """``d P_lm / d theta`` from the table ``P`` (requires ``sin theta > 0``)."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(1.0 - x * x)
    L = P.shape[0] - 1
    dP = np.zeros_like(P)
    for l in range(1, L + 1):
        for m in range(0, l + 1):
            c = np.sqrt((2 * l + 1.0) / (2 * l - 1) * (l + m) * (l - m))
            dP[l, m] = (l * x * P[l, m] - c * P[l - 1, m]) / s
    return dP


def degree_array(L: int) -> np.ndarray:
    """``l`` broadcast to the coefficient layout ``(L+1, 2L+1)``."""
    return np.repeat(np.arange(L + 1)[:, None], 2 * L + 1, axis=1)


def coefficient_mask(L: int) -> np.ndarray:
    l = np.arange(L + 1)[:, None]
    m = np.arange(-L, L + 1)[None, :]
    return np.abs(m) <= l


def heat_multiplier(L: int, t: float) -> np.ndarray:
    """Spectral multiplier of ``exp(2 t Delta)``."""
    if t < 0:
        raise ValueError("heat time must be non-negative")
    l = degree_array(L)
    return np.exp(-2.0 * l * (l + 1) * t)


def real_sph_harm(L: int, theta, phi) -> np.ndarray:
    """All real harmonics at points; shape ``(L+1, 2L+1) + theta.shape``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    P = legendre_table(L, np.cos(theta))
    out = np.zeros((L + 1, 2 * L + 1) + theta.shape)
    out[:, L] = P[:, 0]
    for m in range(1, L + 1):
        out[:, L + m] = np.sqrt(2.0) * P[:, m] * np.cos(m * phi)
        out[:, L - m] = np.sqrt(2.0) * P[:, m] * np.sin(m * phi)
    return out


@dataclass(frozen=True)
class SphereGrid:
    """Quadrature grid and transform tables for band limit ``L``."""

    L: int = DEFAULT_L
    nlat: int = DEFAULT_NLAT
    nlon: int = DEFAULT_NLON

    def __post_init__(self):
        if self.nlon <= 2 * self.L:
            raise ValueError("need nlon > 2L to resolve all azimuthal orders")
        if self.nlat <= self.L:
            raise ValueError("need nlat > L for exact Gauss-Legendre transforms")

    @cached_property
    def _gl(self):
        x, w = np.polynomial.legendre.leggauss(self.nlat)
        # descending x so that theta increases with the row index
        return x[::-1].copy(), w[::-1].copy()

    @property
    def x(self) -> np.ndarray:
        return self._gl[0]

    @property
    def weights(self) -> np.ndarray:
        return self._gl[1]

    @cached_property
    def theta(self) -> np.ndarray:
        return np.arccos(self.x)

    @cached_property
    def phi(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.nlon) / self.nlon

    @cached_property
    def mesh(self):
        """``(theta, phi)`` arrays of shape ``(nlat, nlon)``."""
        return np.meshgrid(self.theta, self.phi, indexing="ij")

    @cached_property
    def area_weights(self) -> np.ndarray:
        """Quadrature weights for ``int f dOmega`` on the grid."""
        return np.repeat(self.weights[:, None] * (2.0 * np.pi / self.nlon), self.nlon, axis=1)

    @cached_property
    def P(self) -> np.ndarray:
        return legendre_table(self.L, self.x)

    @cached_property
    def dP(self) -> np.ndarray:
        return legendre_theta_derivative(self.P, self.x)

    @cached_property
    def P_over_sin(self) -> np.ndarray:
        return self.P / np.sqrt(1.0 - self.x**2)

    @property
    def shape(self):
        return (self.nlat, self.nlon)

    def refined(self) -> "SphereGrid":
        """Grid with doubled band limit and resolution."""
        return SphereGrid(2 * self.L, 2 * self.nlat, 2 * self.nlon)

    def integrate(self, values) -> float:
        return float(np.sum(np.asarray(values) * self.area_weights))

    # -- transforms --------------------------------------------------------

    def _analyze(self, values, table, dphi=False):
        L = self.L
        F = np.fft.rfft(values, axis=-1) * (2.0 * np.pi / self.nlon)
        F = F[..., : L + 1]
        c = F.real  # int f cos(m phi)
        s = -F.imag  # int f sin(m phi)
        if dphi:
            m = np.arange(L + 1)
            c, s = -m * s, m * c
        wt = table * self.weights  # (l, m, i)
        cc = np.einsum("lmi,...im->...lm", wt, c)
        ss = np.einsum("lmi,...im->...lm", wt, s)
        out = np.zeros(values.shape[:-2] + (L + 1, 2 * L + 1))
        out[..., L] = cc[..., 0]
        r2 = np.sqrt(2.0)
        out[..., L + 1:] = r2 * cc[..., 1:]
        out[..., :L] = r2 * ss[..., 1:][..., ::-1]
        return out

    def _synthesize(self, coeffs, table, dphi=False):
        L = self.L
        coeffs = np.asarray(coeffs, dtype=float)
        a_c = np.concatenate([coeffs[..., L:L + 1], coeffs[..., L + 1:]], axis=-1)  # m = 0..L
        a_s = np.concatenate([np.zeros_like(coeffs[..., :1]), coeffs[..., :L][..., ::-1]], axis=-1)
        gc = np.einsum("lmi,...lm->...im", table, a_c)
        gs = np.einsum("lmi,...lm->...im", table, a_s)
        n = self.nlon
        X = np.zeros(coeffs.shape[:-2] + (self.nlat, n // 2 + 1), dtype=complex)
        X[..., 0] = n * gc[..., 0]
        X[..., 1:L + 1] = (n / np.sqrt(2.0)) * (gc[..., 1:] - 1j * gs[..., 1:])
        if dphi:
            X[..., : L + 1] *= 1j * np.arange(L + 1)
        return np.fft.irfft(X, n=n, axis=-1)

    def analyze(self, values) -> np.ndarray:
        """Grid values to coefficients (exact for fields band-limited to ``L``)."""
        values = np.asarray(values, dtype=float)
        if values.shape[-2:] != self.shape:
            raise ValueError(f"expected grid shape {self.shape}, got {values.shape[-2:]}")
        return self._analyze(values, self.P)

    def synthesize(self, coeffs) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape[-2:] != (self.L + 1, 2 * self.L + 1):
            raise ValueError("band limit exceeded or coefficient layout mismatch")
        return self._synthesize(coeffs, self.P)

    def gradient(self, coeffs):
        """Orthonormal components ``(d/dtheta, (1/sin theta) d/dphi)`` on the grid."""
        return self._synthesize(coeffs, self.dP), self._synthesize(coeffs, self.P_over_sin, dphi=True)

    def divergence(self, v_theta, v_phi) -> np.ndarray:
        """Coefficients of ``div V`` via the weak form ``<Y, div V> = -<grad Y, V>``.

        The ``l = 0`` coefficient vanishes identically, so mass is conserved
        exactly.
        """
        a = self._analyze(np.asarray(v_theta, dtype=float), self.dP)
        b = self._analyze(np.asarray(v_phi, dtype=float), self.P_over_sin, dphi=True)
        return -(a + b)

    def laplacian(self, coeffs) -> np.ndarray:
        l = degree_array(self.L)
        return -l * (l + 1) * coeffs

    def heat(self, coeffs, t: float) -> np.ndarray:
        """Apply ``exp(2 t Delta)``."""
        return coeffs * heat_multiplier(self.L, t)

    def evaluate(self, coeffs, theta, phi) -> np.ndarray:
        """Evaluate a band-limited field at arbitrary points."""
        Y = real_sph_harm(self.L, theta, phi)
        return np.einsum("lm,lm...->...", coeffs, Y)

    def kernel_coeffs(self, t: float, theta0: float, phi0: float) -> np.ndarray:
        """Band-limited heat kernel ``K(t, ., w0)`` centred at ``(theta0, phi0)``."""
        if t < 0:
            raise ValueError("heat time must be non-negative")
        return heat_multiplier(self.L, t) * real_sph_harm(self.L, theta0, phi0)

    def transfer(self, coeffs, other: "SphereGrid") -> np.ndarray:
        """Re-embed coefficients into another band limit (truncate or zero-pad)."""
        out = np.zeros(coeffs.shape[:-2] + (other.L + 1, 2 * other.L + 1))
        k = min(self.L, other.L)
        out[..., : k + 1, other.L - k: other.L + k + 1] = coeffs[..., : k + 1, self.L - k: self.L + k + 1]
        return out


@dataclass
class SphereField:
    """Band-limited scalar field: spectrum plus its grid values."""

    grid: SphereGrid
    coeffs: np.ndarray

    @classmethod
    def from_values(cls, grid: SphereGrid, values) -> "SphereField":
        return cls(grid, grid.analyze(values))

    @classmethod
    def from_function(cls, grid: SphereGrid, f) -> "SphereField":
        th, ph = grid.mesh
        return cls.from_values(grid, f(th, ph))

    @cached_property
    def values(self) -> np.ndarray:
        return self.grid.synthesize(self.coeffs)

    @property
    def band_limit(self) -> int:
        return self.grid.L

    def heat(self, t: float) -> "SphereField":
        return type(self)(self.grid, self.grid.heat(self.coeffs, t))

    def laplacian(self) -> "SphereField":
        return type(self)(self.grid, self.grid.laplacian(self.coeffs))

    def gradient(self):
        return self.grid.gradient(self.coeffs)

    def sup_gradient(self) -> float:
        gt, gp = self.gradient()
        return float(np.max(np.hypot(gt, gp)))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def c1_norm(self) -> float:
        return self.sup_norm() + self.sup_gradient()

    def consistency_error(self) -> float:
        """Relative round-trip error grid -> spectrum -> grid."""
        back = self.grid.synthesize(self.grid.analyze(self.values))
        scale = max(np.max(np.abs(self.values)), 1e-300)
        return float(np.max(np.abs(back - self.values)) / scale)


@dataclass
class SphereMeasure(SphereField):
    """Probability density with respect to the area element on the unit sphere."""

    defects: list = field(default_factory=list)

    @property
    def total_mass(self) -> float:
        return float(self.coeffs[0, self.grid.L] * np.sqrt(4.0 * np.pi))

    def heat(self, t: float) -> "SphereMeasure":
        return SphereMeasure(self.grid, self.grid.heat(self.coeffs, t))


def kernel_truncation(t: float, tol: float = KERNEL_TAIL_TOL, l_cap: int = 20000) -> int:
    """Smallest ``L`` with ``sum_{l > L} (2l+1)/(4 pi) e^{-2 l(l+1) t} < tol``."""
    if t <= 0:
        raise ValueError("heat kernel needs t > 0")
    l = np.arange(l_cap + 2)
    terms = (2 * l + 1) / (4 * np.pi) * np.exp(-2.0 * l * (l + 1) * t)
    tail = np.cumsum(terms[::-1])[::-1]  # tail[k] = sum_{l >= k}
    ok = np.nonzero(tail[1:] < tol)[0]
    if ok.size == 0:
        raise ValueError(f"t = {t} too small for band limit {l_cap}")
    return int(ok[0])


def kernel_tail(t: float, L: int) -> float:
    """Upper bound on the sup-norm truncation error of the degree-``L`` kernel series."""
    l = np.arange(L + 1, L + 1 + 20000)
    return float(np.sum((2 * l + 1) / (4 * np.pi) * np.exp(-2.0 * l * (l + 1) * t)))


def heat_kernel_cos(t: float, cos_d, L: int | None = None, tol: float = KERNEL_TAIL_TOL) -> np.ndarray:
    """``K(t, v, w)`` as a function of ``cos`` of the geodesic distance.

    The Legendre series is truncated where its tail drops below ``tol``; if a
    band limit ``L`` is imposed and its tail exceeds ``tol`` a ``ValueError``
    is raised.
    """
    if t <= 0:
        raise ValueError("heat kernel needs t > 0")
    if L is None:
        L = kernel_truncation(t, tol)
    elif kernel_tail(t, L) >= tol:
        raise ValueError(f"band limit {L} too small at t = {t}: tail {kernel_tail(t, L):.2e}")
    x = np.clip(np.asarray(cos_d, dtype=float), -1.0, 1.0)
    # three-term recurrence for P_l(x)
    p_prev = np.ones_like(x)
    out = p_prev / (4 * np.pi)
    if L >= 1:
        p = x.copy()
        out = out + 3 / (4 * np.pi) * np.exp(-4.0 * t) * p
        for l in range(2, L + 1):
            p, p_prev = ((2 * l - 1) * x * p - (l - 1) * p_prev) / l, p
            out = out + (2 * l + 1) / (4 * np.pi) * np.exp(-2.0 * l * (l + 1) * t) * p
    return out


def unit_vector(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)


def heat_kernel_point(t: float, v, w, L: int | None = None) -> np.ndarray:
    """Heat kernel of ``exp(2 t Delta)`` between points given as ``(theta, phi)`` pairs."""
    cv = unit_vector(*v)
    cw = unit_vector(*w)
    return heat_kernel_cos(t, np.sum(cv * cw, axis=-1), L)


def cap_coeffs(L: int, radius: float, theta0: float, phi0: float) -> np.ndarray:
    """Spectrum (degree ``<= L``) of the indicator of a geodesic cap."""
    a = np.cos(radius)
    Pl = np.zeros(L + 2)
    Pl[0], Pl[1] = 1.0, a
    for l in range(2, L + 2):
        Pl[l] = ((2 * l - 1) * a * Pl[l - 1] - (l - 1) * Pl[l - 2]) / l
    g = np.zeros(L + 1)
    g[0] = 2 * np.pi * (1 - a)
    for l in range(1, L + 1):
        g[l] = 2 * np.pi * (Pl[l - 1] - Pl[l + 1]) / (2 * l + 1)
    return g[:, None] * real_sph_harm(L, theta0, phi0)


@dataclass
class SmoothingProbe:
    times: np.ndarray
    ratios: np.ndarray  # sup|grad e^{2t Delta} f| / sup|f| per (field, time)
    exponent: float
    c1_contraction: float  # max over fields/times of ||e^{2t Delta}f||_C1 / ||f||_C1


def smoothing_constant_probe(grid: SphereGrid, times, n_fields: int, rng: np.random.Generator) -> SmoothingProbe:
    """Measure how the heat flow turns sup-norm data into gradients.

    Test data are indicators of random caps (discontinuous, projected to the
    band limit).  The exponent is the least-squares slope of
    ``log mean ratio`` against ``log t``.
    """
    times = np.asarray(times, dtype=float)
    ratios = np.zeros((n_fields, times.size))
    c1 = 0.0
    for k in range(n_fields):
        radius = rng.uniform(np.pi / 3, 2 * np.pi / 3)
        th0 = np.arccos(rng.uniform(-1, 1))
        ph0 = rng.uniform(0, 2 * np.pi)
        f = SphereField(grid, cap_coeffs(grid.L, radius, th0, ph0))
        fs = f.sup_norm()
        fc1 = f.c1_norm()
        for i, t in enumerate(times):
            g = f.heat(t)
            ratios[k, i] = g.sup_gradient() / fs
            c1 = max(c1, g.c1_norm() / fc1)
    slope = float(np.polyfit(np.log(times), np.log(ratios.mean(axis=0)), 1)[0])
    return SmoothingProbe(times, ratios, slope, c1)
