"""Projective coordinates on CP^n and the filtered SDE written in them.

A state ``psi`` in chart ``V_c`` (``psi_c != 0``) has coordinates
``w_k = psi_k / psi_c`` for ``k != c``; the lifted vector ``W`` has ``W_c = 1``.
For a qubit the Bloch angles give the chart-free picture:
``psi ~ (cos(theta/2), e^{i phi} sin(theta/2))`` and ``w = tan(theta/2) e^{i phi}``
in chart ``V_0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PAULIS, as_state

CHART_THRESHOLD = 0.1  # switch charts when |psi_c|^2 / ||psi||^2 drops below this


class ChartError(ValueError):
    """The state is too close to the boundary of the requested chart."""


@dataclass(frozen=True)
class ProjectivePoint:
    w: np.ndarray
    chart: int = 0

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=complex))
        if not np.all(np.isfinite(w)):
            raise ValueError("projective coordinates must be finite")
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.shape[-1]

    @property
    def W(self) -> np.ndarray:
        return lift(self.w, self.chart)


def lift(w, chart: int = 0) -> np.ndarray:
    """``W`` with a 1 inserted at position ``chart``; batched over leading axes."""
    w = np.asarray(w, dtype=complex)
    one = np.ones(w.shape[:-1] + (1,), dtype=complex)
    return np.concatenate([w[..., :chart], one, w[..., chart:]], axis=-1)


def best_chart(psi) -> np.ndarray:
    return np.argmax(np.abs(as_state(psi)), axis=-1)


def to_projective(psi, chart: int = 0, threshold: float = CHART_THRESHOLD) -> ProjectivePoint:
    psi = as_state(psi)
    nrm2 = np.vdot(psi, psi).real
    if nrm2 <= 0:
        raise ValueError("zero vector has no projective point")
    if abs(psi[chart]) ** 2 < threshold * nrm2:
        raise ChartError(f"|psi_{chart}|^2 below chart threshold; use chart {int(best_chart(psi))}")
    w = np.delete(psi, chart) / psi[chart]
    return ProjectivePoint(w, chart)


def from_projective(p: ProjectivePoint) -> np.ndarray:
    """Unit vector with the chart component real and positive."""
    W = p.W
    return W / np.linalg.norm(W, axis=-1, keepdims=True)


def projective_drift(w, H, Hc=None, u=0.0, a_eta=None, chart: int = 0) -> np.ndarray:
    """Hamiltonian drift ``i[w_k (M W)_c - (M W)_k]`` with ``M = H + u Hc + A^{eta-bar}``.

    ``w`` may be batched (``(..., n)``); ``u`` broadcasts over the batch.
    """
    w = np.asarray(w, dtype=complex)
    W = lift(w, chart)
    M = np.asarray(H, dtype=complex)
    if a_eta is not None:
        M = M + np.asarray(a_eta, dtype=complex)
    MW = W @ M.T
    if Hc is not None:
        u = np.asarray(u, dtype=float)
        MW = MW + u[..., None] * (W @ np.asarray(Hc, dtype=complex).T)
    out = 1j * (W * MW[..., chart:chart + 1] - MW)
    return np.delete(out, chart, axis=-1)


def projective_diffusion(w, Ls, chart: int = 0) -> np.ndarray:
    """Diffusion vectors ``(L W)_k - w_k (L W)_c``, shape ``(P,) + w.shape``."""
    W = lift(w, chart)
    out = []
    for L in Ls:
        LW = W @ np.asarray(L, dtype=complex).T
        out.append(np.delete(LW - W * LW[..., chart:chart + 1], chart, axis=-1))
    return np.array(out)


def ito_drift_terms(w, Ls, chart: int = 0) -> np.ndarray:
    """The two channel-induced drift terms of the chart SDE (they cancel for Gell-Mann families).

    ``1/2 sum_p [(L^2 W)_k - w_k (L^2 W)_c] + sum_p [w_k (L W)_c^2 - (L W)_c (L W)_k]``
    """
    W = lift(w, chart)
    out = np.zeros_like(W)
    for L in Ls:
        L = np.asarray(L, dtype=complex)
        LW = W @ L.T
        L2W = W @ (L @ L).T
        out += 0.5 * (L2W - W * L2W[..., chart:chart + 1])
        out += W * LW[..., chart:chart + 1] ** 2 - LW[..., chart:chart + 1] * LW
    return np.delete(out, chart, axis=-1)


def full_projective_drift(w, H, Ls, Hc=None, u=0.0, a_eta=None, chart: int = 0) -> np.ndarray:
    return projective_drift(w, H, Hc, u, a_eta, chart) + ito_drift_terms(w, Ls, chart)


def diffusion_matrix(w, Ls, chart: int = 0):
    """``(sum_p b^a b^c, sum_p b^a conj(b^c))`` for the channel diffusion vectors ``b``."""
    b = projective_diffusion(w, Ls, chart)
    holo = np.einsum("p...a,p...c->...ac", b, b)
    herm = np.einsum("p...a,p...c->...ac", b, b.conj())
    return holo, herm


def delta_pro_coefficients(w) -> np.ndarray:
    """Coefficients ``g^{a c}`` with ``Delta_pro S = sum g^{ac} d^2 S / dw_a d conj(w_c)``.

    ``g^{ac} = (1 + |w|^2)(delta_ac + w_a conj(w_c))``; for one coordinate this
    is the Laplace-Beltrami operator of the unit sphere.
    """
    w = np.asarray(w, dtype=complex)
    n = w.shape[-1]
    s = 1.0 + np.sum(np.abs(w) ** 2, axis=-1)
    return s[..., None, None] * (np.eye(n) + w[..., :, None] * w.conj()[..., None, :])


def wirtinger_hessian(f, w, h: float = 1e-4) -> np.ndarray:
    """``d^2 f / dw_a d conj(w_c)`` of a real function by central differences."""
    w = np.asarray(w, dtype=complex)
    n = w.shape[-1]

    def d2(e1, e2):
        return (f(w + h * e1 + h * e2) - f(w + h * e1 - h * e2) - f(w - h * e1 + h * e2) + f(w - h * e1 - h * e2)) / (
            4 * h * h)

    eye = np.eye(n)
    hess = np.zeros((n, n), dtype=complex)
    for a in range(n):
        for c in range(n):
            xa, ya = eye[a], 1j * eye[a]
            xc, yc = eye[c], 1j * eye[c]
            # d_a dbar_c = 1/4 (dx_a - i dy_a)(dx_c + i dy_c)
            hess[a, c] = 0.25 * (d2(xa, xc) + d2(ya, yc) + 1j * (d2(xa, yc) - d2(ya, xc)))
    return hess


def delta_pro_apply(field, w=None, h: float = 1e-4):
    """``Delta_pro`` of a sphere field (spectrally) or of a chart function at ``w``.

    For a ``SphereField`` the Laplace-Beltrami operator is applied exactly in
    the harmonic basis.  For a callable ``f(w)`` on the chart of CP^1 or CP^2
    the second-order chart formula is evaluated with a finite-difference
    Hessian.
    """
    from .sphere import SphereField

    if isinstance(field, SphereField):
        return field.laplacian()
    if w is None:
        raise ValueError("a chart point is required for chart functions")
    w = np.atleast_1d(np.asarray(w, dtype=complex))
    if w.shape[-1] not in (1, 2):
        raise ValueError("chart formula provided for CP^1 and CP^2 only")
    g = delta_pro_coefficients(w)
    return float(np.real(np.sum(g * wirtinger_hessian(field, w, h))))


# --- Bloch sphere ----------------------------------------------------------


def psi_to_bloch(psi):
    """Bloch angles ``(theta, phi)`` of qubit states (batched)."""
    psi = as_state(psi)
    a0, a1 = np.abs(psi[..., 0]), np.abs(psi[..., 1])
    theta = 2.0 * np.arctan2(a1, a0)
    phi = np.mod(np.angle(psi[..., 1]) - np.angle(psi[..., 0]), 2 * np.pi)
    return theta, phi


def bloch_to_psi(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return np.stack([np.cos(theta / 2) + 0j, np.exp(1j * phi) * np.sin(theta / 2)], axis=-1)


def w_to_bloch(w):
    """Chart ``V_0`` coordinate of a qubit to Bloch angles."""
    w = np.asarray(w, dtype=complex)
    return 2.0 * np.arctan(np.abs(w)), np.mod(np.angle(w), 2 * np.pi)


def bloch_to_w(theta, phi):
    return np.tan(np.asarray(theta) / 2) * np.exp(1j * np.asarray(phi))


def bloch_vector(rho) -> np.ndarray:
    """``(tr(rho sigma_x), tr(rho sigma_y), tr(rho sigma_z))``."""
    rho = np.asarray(rho)
    return np.stack([np.einsum("...ij,ji->...", rho, s).real for s in PAULIS], axis=-1)


def pauli_components(M):
    """``(m0, m)`` with ``M = m0 I + m . sigma`` for a Hermitian 2x2 matrix."""
    M = np.asarray(M, dtype=complex)
    m0 = 0.5 * np.trace(M).real
    m = np.array([0.5 * np.trace(M @ s).real for s in PAULIS])
    return m0, m


def sphere_frame(theta, phi):
    """Unit vectors ``(r, theta_hat, phi_hat)`` at the given points."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    r = np.stack([st * cp, st * sp, ct], axis=-1)
    th = np.stack([ct * cp, ct * sp, -st], axis=-1)
    ph = np.stack([-sp, cp, np.zeros_like(st)], axis=-1)
    return r, th, ph


def bloch_drift(M, theta, phi):
    """Velocity of ``psi' = -i M psi`` on the sphere, as ``(v_theta, v_phi)``.

    For ``M = m0 I + m . sigma`` the Bloch vector obeys ``r' = 2 m x r``.
    """
    _, m = pauli_components(M)
    r, th, ph = sphere_frame(theta, phi)
    v = 2.0 * np.cross(m, r)
    return np.sum(v * th, axis=-1), np.sum(v * ph, axis=-1)


def simulate_projective(w0, H, Ls, dt, steps, rng, *, samples=1, Hc=None, u=None, a_eta=None):
    """Euler-Maruyama for the chart SDE with chart switching (any ``n``).

    ``u`` is an optional callable ``u(t, psi)`` on normalized states.  Returns
    the final normalized states ``(samples, n + 1)``.
    """
    w0 = np.atleast_1d(np.asarray(w0, dtype=complex))
    n = w0.shape[-1]
    psi = np.tile(lift(w0) / np.linalg.norm(lift(w0)), (samples, 1))
    for k in range(steps):
        t = k * dt
        chart = best_chart(psi)
        new = np.empty_like(psi)
        uu = np.zeros(samples) if u is None else np.asarray(u(t, psi), dtype=float)
        dY = rng.standard_normal((len(Ls), samples)) * np.sqrt(dt)
        for c in range(n + 1):
            sel = chart == c
            if not np.any(sel):
                continue
            p = psi[sel]
            w = np.delete(p, c, axis=-1) / p[:, c:c + 1]
            drift = full_projective_drift(w, H, Ls, Hc, uu[sel], a_eta, c)
            diff = projective_diffusion(w, Ls, c)
            w = w + drift * dt + np.einsum("ps,psk->sk", dY[:, sel], diff)
            W = lift(w, c)
            new[sel] = W / np.linalg.norm(W, axis=-1, keepdims=True)
        psi = new
    return psi


def mc_generator(f, w0, Ls, dt, pairs, rng, *, H=None, chart: int = 0):
    """Monte-Carlo estimate of the generator ``(E f(w_dt) - f(w_0)) / dt`` of one Euler step.

    Antithetic pairs ``+-dY`` cancel the martingale part exactly; returns
    ``(estimate, standard error)``.
    """
    w0 = np.atleast_1d(np.asarray(w0, dtype=complex))
    n = w0.shape[-1]
    drift = ito_drift_terms(w0, Ls, chart)
    if H is not None:
        drift = drift + projective_drift(w0, H, chart=chart)
    b = projective_diffusion(w0, Ls, chart)  # (P, n)
    dY = rng.standard_normal((pairs, len(Ls))) * np.sqrt(dt)
    step = dY @ b
    base = w0 + drift * dt
    f0 = f(w0[None, :])
    vals = (f(base + step) + f(base - step) - 2.0 * f0) / (2.0 * dt)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(pairs))
