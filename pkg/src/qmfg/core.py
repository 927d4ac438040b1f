"""Complex linear-algebra substrate for finite-dimensional atoms.

States are plain numpy arrays.  A single atom is a complex vector of length
``d = n + 1``; an N-atom wave function is a vector of length ``d**N`` whose
index is site-major with site 1 varying slowest, i.e. ``psi.reshape((d,)*N)``
has site ``j`` (1-based) on axis ``j - 1``.  Batched states carry any number of
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

HERMITIAN_TOL = 1e-12
STATE_TOL = 1e-10
UNIT_NORM_TOL = 1e-8

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (PAULI_X, PAULI_Y, PAULI_Z)


def as_state(v) -> np.ndarray:
    return np.asarray(v, dtype=complex)


def is_hermitian(a, tol: float = HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    return bool(np.max(np.abs(a - a.conj().T), initial=0.0) <= tol)


def is_anti_hermitian(a, tol: float = HERMITIAN_TOL) -> bool:
    a = np.asarray(a)
    return bool(np.max(np.abs(a + a.conj().T), initial=0.0) <= tol)


def check_density_matrix(rho, tol: float = STATE_TOL) -> None:
    """Raise ``ValueError`` unless ``rho`` is Hermitian, PSD and of unit trace."""
    rho = np.asarray(rho)
    if not is_hermitian(rho, max(tol, HERMITIAN_TOL)):
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > tol:
        raise ValueError(f"density matrix trace {np.trace(rho).real:.3e} != 1")
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0] < -tol:
        raise ValueError("density matrix is not positive semi-definite")


def operator_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a), 2))


def expectation_value(a, v):
    """Average value ``(v, A v) / (v, v)``; real when ``A`` is Hermitian."""
    a = np.asarray(a, dtype=complex)
    v = as_state(v)
    if a.shape != (v.shape[-1], v.shape[-1]):
        raise ValueError(f"operator shape {a.shape} does not match state length {v.shape[-1]}")
    nrm = np.vdot(v, v).real
    if nrm <= 0.0:
        raise ValueError("expectation value of the zero vector")
    val = np.vdot(v, a @ v) / nrm
    if is_hermitian(a):
        return float(val.real)
    return complex(val)


def pure_density(v) -> np.ndarray:
    """Projector ``v v^*`` onto a unit vector."""
    v = as_state(v)
    if abs(np.vdot(v, v).real - 1.0) > UNIT_NORM_TOL:
        raise ValueError("pure_density requires a unit vector")
    return np.outer(v, v.conj())


def num_sites(psi, d: int) -> int:
    n = int(round(np.log(psi.shape[-1]) / np.log(d)))
    if d**n != psi.shape[-1]:
        raise ValueError(f"length {psi.shape[-1]} is not a power of {d}")
    return n


def partial_trace_site(psi, j: int, d: int = 2) -> np.ndarray:
    """Single-site marginal of ``psi psi^*`` on site ``j`` (1-based).

    Works on batches: leading axes of ``psi`` are preserved.  The trace of the
    result equals ``||psi||^2``.
    """
    psi = as_state(psi)
    n = num_sites(psi, d)
    if not 1 <= j <= n:
        raise ValueError(f"site {j} out of range 1..{n}")
    batch = psi.shape[:-1]
    t = psi.reshape(batch + (d**(j - 1), d, d**(n - j)))
    m = np.moveaxis(t, -2, -3).reshape(batch + (d, -1))
    return m @ np.swapaxes(m.conj(), -1, -2)


def all_marginals(psi, d: int = 2) -> np.ndarray:
    """Stack of all single-site marginals, shape ``batch + (N, d, d)``."""
    psi = as_state(psi)
    n = num_sites(psi, d)
    return np.stack([partial_trace_site(psi, j, d) for j in range(1, n + 1)], axis=-3)


def alpha_j(psi, gamma, j: int, d: int = 2) -> float:
    """Deviation functional ``1 - tr(gamma Gamma^(j))``."""
    gamma = np.asarray(gamma, dtype=complex)
    if gamma.shape != (d, d):
        raise ValueError("gamma has the wrong dimension")
    marg = partial_trace_site(psi, j, d)
    return float(1.0 - np.einsum("ij,ji->", gamma, marg).real)


def overlap_k(psi, phi, sites, d: int = 2) -> float:
    """``1 - (P psi, psi)`` where ``P`` projects every listed site onto ``phi``."""
    sites = list(sites)
    if len(set(sites)) != len(sites):
        raise ValueError("repeated sites")
    psi = as_state(psi)
    phi = as_state(phi)
    n = num_sites(psi, d)
    t = psi.reshape((d,) * n)
    # contract from the highest site down so earlier axis numbers stay valid
    for s in sorted(sites, reverse=True):
        if not 1 <= s <= n:
            raise ValueError(f"site {s} out of range 1..{n}")
        t = np.tensordot(t, phi.conj(), axes=([s - 1], [0]))
    return float(1.0 - np.vdot(t, t).real)


def trace_distance(rho, sigma) -> float:
    """Trace norm ``tr|rho - sigma|`` of the Hermitian difference."""
    rho = np.asarray(rho, dtype=complex)
    sigma = np.asarray(sigma, dtype=complex)
    if rho.shape != sigma.shape:
        raise ValueError("dimension mismatch")
    diff = rho - sigma
    ev = np.linalg.eigvalsh(0.5 * (diff + np.swapaxes(diff.conj(), -1, -2)))
    return np.abs(ev).sum(axis=-1)


@dataclass(frozen=True)
class InteractionTensor:
    """Two-body coefficients ``A(j,k; j',k')`` acting as ``(A f)(j,k) = sum A(j,k;j',k') f(j',k')``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 4 or len(set(c.shape)) != 1:
            raise ValueError("interaction tensor must have shape (d, d, d, d)")
        object.__setattr__(self, "coeffs", c)
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self, tol: float = HERMITIAN_TOL) -> list[str]:
        c = self.coeffs
        out = []
        if np.max(np.abs(c - c.transpose(1, 0, 3, 2)), initial=0.0) > tol:
            out.append("pair symmetry A(j,k;j',k') = A(k,j;k',j') violated")
        if np.max(np.abs(c - c.transpose(2, 3, 0, 1).conj()), initial=0.0) > tol:
            out.append("self-adjointness A(j,k;j',k') = conj(A(j',k';j,k)) violated")
        return out

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    @cached_property
    def matrix(self) -> np.ndarray:
        """Two-site operator as a ``d^2 x d^2`` matrix, rows ``(j,k)``, columns ``(j',k')``."""
        d = self.dim
        return self.coeffs.reshape(d * d, d * d)

    @property
    def hs_norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    @classmethod
    def zero(cls, d: int = 2) -> "InteractionTensor":
        return cls(np.zeros((d, d, d, d), dtype=complex))

    @classmethod
    def from_potential(cls, v) -> "InteractionTensor":
        """Multiplication-type interaction ``V(j,k)`` as the diagonal tensor."""
        v = np.asarray(v, dtype=complex)
        d = v.shape[0]
        c = np.zeros((d, d, d, d), dtype=complex)
        for j in range(d):
            for k in range(d):
                c[j, k, j, k] = v[j, k]
        return cls(c)

    @classmethod
    def from_matrix(cls, m) -> "InteractionTensor":
        m = np.asarray(m, dtype=complex)
        d = int(round(np.sqrt(m.shape[0])))
        return cls(m.reshape(d, d, d, d))


def exchange_tensor(strength: float = 1.0) -> InteractionTensor:
    """Photon-exchange coupling ``a1^* a2 + a2^* a1`` between two qubits."""
    c = np.zeros((2, 2, 2, 2), dtype=complex)
    c[1, 0, 0, 1] = strength
    c[0, 1, 1, 0] = strength
    return InteractionTensor(c)


def random_interaction_tensor(d: int, rng: np.random.Generator) -> InteractionTensor:
    """Random Hermitian two-site operator commuting with the swap."""
    g = rng.normal(size=(d * d, d * d)) + 1j * rng.normal(size=(d * d, d * d))
    swap = np.eye(d * d)[[k * d + j for j in range(d) for k in range(d)]]
    h = g + g.conj().T
    h = 0.5 * (h + swap @ h @ swap)
    return InteractionTensor.from_matrix(h)


def contract_interaction(a: InteractionTensor, eta) -> np.ndarray:
    """Mean-field operator ``A^{eta-bar}(j; j') = sum_{k,k'} A(j,k;j',k') conj(eta(k,k'))``."""
    eta = np.asarray(eta, dtype=complex)
    if eta.shape[-2:] != (a.dim, a.dim):
        raise ValueError("dimension mismatch between tensor and eta")
    return np.einsum("jkJK,...kK->...jJ", a.coeffs, eta.conj())


def gell_mann_family(n: int) -> list[np.ndarray]:
    """``i`` times the generalized Gell-Mann basis of su(n+1), ``tr(l_a l_b) = 2 delta_ab``.

    For ``n = 1`` this is ``[i sx, i sy, i sz]``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d = n + 1
    out = []
    for j in range(d):
        for k in range(j + 1, d):
            s = np.zeros((d, d), dtype=complex)
            s[j, k] = s[k, j] = 1
            a = np.zeros((d, d), dtype=complex)
            a[j, k] = -1j
            a[k, j] = 1j
            out.append((j, k, s, a))
    # order so that n=1 gives (x, y, z)
    mats = []
    for _, _, s, a in out:
        mats.extend([s, a])
    for l in range(1, d):
        diag = np.zeros(d)
        diag[:l] = 1
        diag[l] = -l
        mats.append(np.diag(np.sqrt(2.0 / (l * (l + 1))) * diag).astype(complex))
    return [1j * m for m in mats]


def site_operator(op, psi, j: int, d: int = 2) -> np.ndarray:
    """Apply a one-site operator (or a batch of them) to site ``j`` of ``psi``.

    ``op`` has shape ``(d, d)`` or ``batch + (d, d)`` matching the leading axes
    of ``psi``.  Strided application, no Kronecker expansion.
    """
    psi = np.asarray(psi)
    n = num_sites(psi, d)
    batch = psi.shape[:-1]
    rest = d**(n - j)
    op = np.asarray(op)
    if d * rest <= 24:
        # trailing sites: one GEMM against op (x) I_rest beats many tiny matmuls
        k = np.einsum("...ik,rs->...irks", op, np.eye(rest)).reshape(op.shape[:-2] + (d * rest, d * rest))
        t = psi.reshape(batch + (d**(j - 1), d * rest))
        return (t @ np.swapaxes(k, -1, -2)).reshape(psi.shape)
    t = psi.reshape(batch + (d**(j - 1), d, rest))
    if op.ndim > 2:
        op = op.reshape(op.shape[:-2] + (1,) + op.shape[-2:])
    return (op @ t).reshape(psi.shape)


def pair_operator(mat, psi, l: int, j: int, d: int = 2) -> np.ndarray:
    """Apply a two-site operator (``d^2 x d^2`` matrix) to sites ``l < j`` of ``psi``."""
    psi = np.asarray(psi)
    n = num_sites(psi, d)
    if not 1 <= l < j <= n:
        raise ValueError("need 1 <= l < j <= N")
    batch = psi.shape[:-1]
    t = psi.reshape(batch + (d**(l - 1), d, d**(j - l - 1), d, d**(n - j)))
    nb = len(batch)
    # bring the two site axes last, apply, restore
    t = np.moveaxis(t, (nb + 1, nb + 3), (-2, -1))
    shp = t.shape
    t = t.reshape(shp[:-2] + (d * d,)) @ np.asarray(mat).T
    t = np.moveaxis(t.reshape(shp), (-2, -1), (nb + 1, nb + 3))
    return t.reshape(psi.shape)


def product_state(phis) -> np.ndarray:
    out = np.array([1.0 + 0j])
    for p in phis:
        out = np.kron(out, as_state(p))
    return out


def cancellation_check(a: InteractionTensor, phi) -> float:
    """Max-entry defect of ``g_m A_{jm} g_m = g_m A_j^{g_m-bar}`` on two sites.

    Site ``j`` is the first factor and site ``m`` the second; ``g_m`` is the
    projector onto ``phi`` acting on site ``m``.
    """
    d = a.dim
    g = pure_density(phi)
    eye = np.eye(d)
    gm = np.kron(eye, g)
    lhs = gm @ a.matrix @ gm
    rhs = gm @ np.kron(contract_interaction(a, g), eye)
    return float(np.max(np.abs(lhs - rhs)))
